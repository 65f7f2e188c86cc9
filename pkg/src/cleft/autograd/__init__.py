"""Dense float tensors with reverse-mode autodiff and NN primitives."""

from cleft.autograd import ops
from cleft.autograd.gradcheck import finite_diff_check, finite_diff_check_param
from cleft.autograd.params import COMPONENT_TAGS, ParameterStore
from cleft.autograd.tensor_io import decode_tensor, encode_tensor, read_tensor, write_tensor
from cleft.autograd.variable import Variable, backward, is_grad_enabled, no_grad

__all__ = [
    "COMPONENT_TAGS",
    "ParameterStore",
    "Variable",
    "backward",
    "decode_tensor",
    "encode_tensor",
    "finite_diff_check",
    "finite_diff_check_param",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "read_tensor",
    "write_tensor",
]
