"""A tiny dependency-free neural network package."""

from tinynet.tensor import Matrix
from tinynet.layers import Linear, ReLU
from tinynet.model import MLP

__all__ = ["Matrix", "Linear", "ReLU", "MLP"]
