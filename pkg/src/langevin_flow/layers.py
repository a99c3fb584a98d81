"""
Parameter containers shared by the encoder, potential and decoder.
"""

import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import Tensor, broadcast_rows, matmul

logger = logging.getLogger(__name__)


class Module:
    """
    Base class for anything that owns learned tensors.

    Parameters are the ``Tensor`` attributes with ``requires_grad=True``;
    sub-modules are discovered the same way, in attribute definition order, so
    parameter names and their ordering are stable across runs.
    """

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = '') -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                params.update(value.named_parameters(prefix=f"{full}."))
            else:
                params[full] = value
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Overwrite parameter values in place.

        Raises:
            FormatError: If names or shapes do not match this module
        """
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise FormatError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise FormatError(f"parameter '{name}' has shape {value.shape}, expected {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


def uniform(rng: np.random.Generator, shape, bound: float, name: Optional[str] = None) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    """
    Affine map ``x @ weight + bias`` applied over the last axis.

    Args:
        in_dim: Input features
        out_dim: Output features
        rng: Generator used for initialization
        bound: Uniform init half-width (default 1/sqrt(in_dim))
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bound: Optional[float] = None):
        bound = 1.0 / np.sqrt(in_dim) if bound is None else bound
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = uniform(rng, (in_dim, out_dim), bound, name='weight')
        self.bias = uniform(rng, (out_dim,), bound, name='bias')

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects {self.in_dim} input features, got shape {x.shape}")
        if x.ndim == 1:
            return (x.reshape(1, self.in_dim) @ self.weight).reshape(self.out_dim) + self.bias
        return matmul(x, self.weight) + broadcast_rows(self.bias, x.shape[:-1])
