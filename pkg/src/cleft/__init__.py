"""Two-tower contrastive image/text pretraining with parameter-efficient adapters on a
frozen causal text encoder, followed by prompt-context tuning."""

__version__ = "0.1.0"
