"""
Rate decoders.

``TransformerDecoder`` is one multi-head self-attention layer over the whole
sequence of per-bin features [z_t, v_t, h_t], with sinusoidal positions, a
residual connection around attention and a linear rate readout. There is no
feed-forward sublayer and no layer normalization. ``LinearDecoder`` is the
per-bin affine ablation.

Rates are exp(log-rate) with the log-rate clamped to [ln 1e-7, ln 1e4].
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Linear, Module
from .tensor import Tensor, broadcast_rows, concat, matmul, softmax, stack

logger = logging.getLogger(__name__)

RATE_BOUNDS = (1e-7, 1e4)
LOG_RATE_BOUNDS = (math.log(RATE_BOUNDS[0]), math.log(RATE_BOUNDS[1]))
MASKED_SCORE = -1e9


def positional_encoding(max_len: int, dim: int) -> np.ndarray:
    """Sinusoidal table (max_len x dim): sin on even columns, cos on odd."""
    position = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[:dim // 2])
    return table


def rates_from_log(log_rates: Tensor) -> Tensor:
    low, high = LOG_RATE_BOUNDS
    return log_rates.clip(low, high).exp()


def features(zs: Optional[Sequence[Tensor]], vs: Optional[Sequence[Tensor]], hs: Sequence[Tensor]) -> Tensor:
    """
    Stack per-bin [z_t, v_t, h_t] into (batch, bins, features).

    Either latent sequence may be None (ablations without velocity or
    without latents).

    Raises:
        ContractError: If the sequences have different lengths
    """
    lengths = {len(seq) for seq in (zs, vs, hs) if seq is not None}
    if len(lengths) != 1:
        raise ContractError(f"decoder inputs have mismatched lengths {sorted(lengths)}")
    per_bin = []
    for t in range(len(hs)):
        parts = [seq[t] for seq in (zs, vs) if seq is not None] + [hs[t]]
        per_bin.append(concat(parts, axis=-1) if len(parts) > 1 else parts[0])
    return stack(per_bin, axis=1)


class TransformerDecoder(Module):
    """
    Single self-attention layer with a rate readout.

    Args:
        input_dim: Per-bin feature width (2d + hidden for the full model)
        model_dim: Attention width, divisible by heads
        n_neurons: Readout width
        heads: Number of attention heads
        max_len: Positional table length
        rng: Generator for initialization
        use_positional: Add sinusoidal positions after the input projection
    """

    def __init__(self, input_dim: int, model_dim: int, n_neurons: int, rng: np.random.Generator,
                 heads: int = 4, max_len: int = 256, use_positional: bool = True):
        if model_dim % heads != 0:
            raise ConfigurationError(f"model_dim {model_dim} is not divisible by heads {heads}")
        self.input_dim = input_dim
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = model_dim // heads
        self.max_len = max_len
        self.use_positional = use_positional
        self.input_proj = Linear(input_dim, model_dim, rng)
        self.query = Linear(model_dim, model_dim, rng)
        self.key = Linear(model_dim, model_dim, rng)
        self.value = Linear(model_dim, model_dim, rng)
        self.output_proj = Linear(model_dim, model_dim, rng)
        self.readout = Linear(model_dim, n_neurons, rng)
        self._positions = positional_encoding(max_len, model_dim)
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, bin_mask: Optional[np.ndarray] = None) -> Tensor:
        """
        Args:
            x: Features (batch, bins, input_dim)
            bin_mask: Optional (batch, bins) bool; False bins are never attended to

        Returns:
            Rates (batch, bins, n_neurons)
        """
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise DimensionError(f"decoder expects (batch, bins, {self.input_dim}), got {x.shape}")
        batch, length, _ = x.shape
        if length > self.max_len:
            raise ContractError(f"sequence of {length} bins exceeds max_len {self.max_len}")
        hidden = self.input_proj(x)
        if self.use_positional:
            table = Tensor(self._positions[:length], dtype=x.data.dtype)
            hidden = hidden + broadcast_rows(table, (batch,))

        q = self._split_heads(self.query(hidden))
        k = self._split_heads(self.key(hidden))
        v = self._split_heads(self.value(hidden))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        if bin_mask is not None:
            blocked = np.where(np.asarray(bin_mask, dtype=bool), 0.0, MASKED_SCORE)
            bias = np.broadcast_to(blocked[:, None, None, :], scores.shape)
            scores = scores + Tensor(bias, dtype=x.data.dtype)
        attention = softmax(scores, axis=-1)
        self.last_attention = attention.data
        mixed = matmul(attention, v).transpose(0, 2, 1, 3).reshape(batch, length, self.model_dim)
        hidden = hidden + self.output_proj(mixed)
        return rates_from_log(self.readout(hidden))


class LinearDecoder(Module):
    """Per-bin affine readout of [z_t, v_t, h_t]; no mixing across time."""

    def __init__(self, input_dim: int, n_neurons: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.readout = Linear(input_dim, n_neurons, rng)

    def __call__(self, x: Tensor, bin_mask: Optional[np.ndarray] = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise DimensionError(f"decoder expects (batch, bins, {self.input_dim}), got {x.shape}")
        return rates_from_log(self.readout(x))


def decode(decoder: Module, zs: Optional[Sequence[Tensor]], vs: Optional[Sequence[Tensor]],
           hs: Sequence[Tensor], bin_mask: Optional[np.ndarray] = None) -> Tensor:
    """Rates (batch, bins, n_neurons) from the latent and hidden sequences."""
    return decoder(features(zs, vs, hs), bin_mask)
