"""Meta-learned GGNN initializations for low-resource molecular property prediction."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, grad  # noqa: F401
