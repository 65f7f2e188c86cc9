from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from cleft import pipeline
from cleft.config import RunConfig, config_from_dict
from cleft.encoders import TextEncoderConfig, VisionEncoderConfig
from cleft.model import ModelConfig

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` prints and records one PASS/FAIL line."""
    store = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:>4}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        print(line)
        store.append((str(number).zfill(4), line))
        return ok

    return record


# --- small models and data ---------------------------------------------------------

def tiny_model_config(adapter=None, vocab_size: int = 20, d: int = 16, heads: int = 2, layers: int = 2,
                      max_seq_len: int = 12, d_joint: int = 8) -> ModelConfig:
    return ModelConfig(
        TextEncoderConfig(vocab_size=vocab_size, d_model=d, n_heads=heads, n_layers=layers,
                          max_seq_len=max_seq_len),
        VisionEncoderConfig(image_size=8, patch_size=4, channels=1, d_model=d, n_heads=heads, n_layers=layers),
        d_joint=d_joint, adapter=adapter)


def random_tokens(rng, batch: int, length: int, vocab_size: int, eos: int = 2, pad: int = 0,
                  min_len: int = 2) -> np.ndarray:
    """Random id rows with exactly one EOS followed by padding."""
    ids = np.full((batch, length), pad, dtype=np.int64)
    for i in range(batch):
        n = int(rng.integers(min_len, length + 1))
        ids[i, :n - 1] = rng.integers(3, vocab_size, size=n - 1)
        ids[i, n - 1] = eos
    return ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(samples_per_class=20, steps=40, warmup_steps=5, eval_interval=20, batch_size=8,
            prompt_steps=20, prompt_warmup_steps=2, prompt_batch_size=8, prompt_length=4,
            prompt_sweep="1,2", probe_steps=30, ft_steps=5,
            text_d_model=16, text_heads=2, vision_d_model=16, vision_heads=2, d_joint=8, lora_rank=2,
            lora_alpha=4.0)


def tiny_run_config(**overrides) -> RunConfig:
    return config_from_dict({**TINY, **overrides}, apply_env=False)


def write_config(path: Path, **overrides) -> Path:
    path.write_text(json.dumps({**TINY, **overrides}, indent=2))
    return path


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Generated tiny corpus shared by the unit tests (read-only)."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_run_config(data_dir=str(root / "data"))
    pipeline.gen_data(cfg, root / "data")
    return cfg, root / "data"


@pytest.fixture(scope="session")
def tiny_corpus(tiny_data):
    cfg, data_dir = tiny_data
    return pipeline.load_corpus(cfg, data_dir)


TRAINED = dict(samples_per_class=50, steps=800, warmup_steps=40, eval_interval=100, batch_size=16, ft_steps=60)


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory):
    """Small stage-1 run that learns the synthetic task: ``(cfg, corpus, best_checkpoint)``."""
    root = tmp_path_factory.mktemp("trained")
    cfg = tiny_run_config(**TRAINED, data_dir=str(root / "data"))
    pipeline.gen_data(cfg, root / "data")
    corpus = pipeline.load_corpus(cfg, root / "data")
    summary = pipeline.pretrain(cfg, corpus, root / "stage1")
    return cfg, corpus, summary.best_checkpoint
