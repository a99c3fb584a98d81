"""
Spike encoders and the initial latent head.

``RecurrentEncoder`` runs a GRU over the held-in spikes, h_0 = GRU(x_0, 0) and
h_{i+1} = GRU(x_{i+1}, h_i). ``LinearEncoder`` is the ablation with a
per-timestep affine map and no recurrence. Both return the hidden sequence in
the layout (batch, bins, hidden).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .langevin import gaussian_kl
from .layers import Linear, Module
from .tensor import Tensor, concat, getitem, stack

logger = logging.getLogger(__name__)

LOGVAR_BOUNDS = (-10.0, 10.0)


class GruCell(Module):
    """
    Gated recurrent unit.

    r = sigmoid(W_r [x, h]), u = sigmoid(W_u [x, h]),
    c = tanh(W_c [x, r * h]), h' = (1 - u) * h + u * c
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / np.sqrt(hidden_dim)
        self.reset_gate = Linear(input_dim + hidden_dim, hidden_dim, rng, bound)
        self.update_gate = Linear(input_dim + hidden_dim, hidden_dim, rng, bound)
        self.candidate = Linear(input_dim + hidden_dim, hidden_dim, rng, bound)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(self, x, h)


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """
    One GRU update for a single step (1-d) or a batch (2-d).

    Raises:
        DimensionError: If the input or hidden width does not match the cell
    """
    if x.shape[-1] != cell.input_dim:
        raise DimensionError(f"GRU expects {cell.input_dim} input features, got {x.shape}")
    if h_prev.shape[-1] != cell.hidden_dim or h_prev.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"hidden state {h_prev.shape} does not fit input {x.shape}")
    xh = concat([x, h_prev], axis=-1)
    r = cell.reset_gate(xh).sigmoid()
    u = cell.update_gate(xh).sigmoid()
    c = cell.candidate(concat([x, r * h_prev], axis=-1)).tanh()
    return h_prev + u * (c - h_prev)


@dataclass
class InitialLatents:
    """Samples of z_0 (and v_0) with their KL terms (batch means)."""
    z0: Tensor
    v0: Optional[Tensor]
    kl_z: Tensor
    kl_v: Optional[Tensor]
    mu_z: np.ndarray
    logvar_z: np.ndarray


class InitialLatentHead(Module):
    """
    Linear map h_0 -> (mu_z, logvar_z, mu_v, logvar_v), four equal d-blocks.

    With ``with_velocity=False`` only the two position blocks are produced.
    """

    def __init__(self, hidden_dim: int, latent_dim: int, rng: np.random.Generator, with_velocity: bool = True):
        self.latent_dim = latent_dim
        self.with_velocity = with_velocity
        blocks = 4 if with_velocity else 2
        self.projection = Linear(hidden_dim, blocks * latent_dim, rng)

    def __call__(self, h0: Tensor, eps_z: Optional[np.ndarray] = None,
                 eps_v: Optional[np.ndarray] = None) -> InitialLatents:
        return init_latents(self, h0, eps_z, eps_v)


def _block(out: Tensor, index: int, d: int) -> Tensor:
    return getitem(out, (Ellipsis, slice(index * d, (index + 1) * d)))


def _sample(mu: Tensor, logvar: Tensor, eps: Optional[np.ndarray]) -> Tensor:
    if eps is None:
        return mu
    eps = np.asarray(eps)
    if eps.shape != mu.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match latent {mu.shape}")
    return mu + (logvar * 0.5).exp() * Tensor(eps, dtype=mu.data.dtype)


def init_latents(head: InitialLatentHead, h0: Tensor, eps_z: Optional[np.ndarray] = None,
                 eps_v: Optional[np.ndarray] = None) -> InitialLatents:
    """
    Re-parameterized initial latents and their closed-form KLs to N(0, I).

    Args:
        head: The initial latent head
        h0: First hidden state, (hidden,) or (batch, hidden)
        eps_z: Standard normal noise for z_0; None returns the mean
        eps_v: Standard normal noise for v_0; None returns the mean

    Returns:
        InitialLatents whose KL terms are averaged over the batch
    """
    d = head.latent_dim
    out = head.projection(h0)
    n_batch = h0.shape[0] if h0.ndim == 2 else 1
    low, high = LOGVAR_BOUNDS
    mu_z = _block(out, 0, d)
    logvar_z = _block(out, 1, d).clip(low, high)
    z0 = _sample(mu_z, logvar_z, eps_z)
    kl_z = gaussian_kl(mu_z, logvar_z.exp(), logvar_z) * (1.0 / n_batch)
    v0, kl_v = None, None
    if head.with_velocity:
        mu_v = _block(out, 2, d)
        logvar_v = _block(out, 3, d).clip(low, high)
        v0 = _sample(mu_v, logvar_v, eps_v)
        kl_v = gaussian_kl(mu_v, logvar_v.exp(), logvar_v) * (1.0 / n_batch)
    return InitialLatents(z0, v0, kl_z, kl_v, mu_z.data.copy(), logvar_z.data.copy())


class RecurrentEncoder(Module):
    """GRU over held-in spikes with a zero initial hidden state."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.cell = GruCell(input_dim, hidden_dim, rng)

    def steps(self, spikes: Tensor) -> List[Tensor]:
        """Hidden states h_0..h_T for spikes shaped (batch, bins, n_in)."""
        if spikes.ndim != 3 or spikes.shape[1] == 0:
            raise ContractError(f"encoder needs spikes shaped (batch, bins >= 1, neurons), got {spikes.shape}")
        h = Tensor(np.zeros((spikes.shape[0], self.hidden_dim), dtype=spikes.data.dtype))
        hs = []
        for t in range(spikes.shape[1]):
            h = gru_step(self.cell, getitem(spikes, (slice(None), t)), h)
            hs.append(h)
        return hs

    def encode_sequence(self, spikes: Tensor) -> Tensor:
        return stack(self.steps(spikes), axis=1)


class LinearEncoder(Module):
    """Per-timestep affine encoder h_t = A x_t + b (no hidden recurrence)."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.projection = Linear(input_dim, hidden_dim, rng)

    def steps(self, spikes: Tensor) -> List[Tensor]:
        if spikes.ndim != 3 or spikes.shape[1] == 0:
            raise ContractError(f"encoder needs spikes shaped (batch, bins >= 1, neurons), got {spikes.shape}")
        return [self.projection(getitem(spikes, (slice(None), t))) for t in range(spikes.shape[1])]

    def encode_sequence(self, spikes: Tensor) -> Tensor:
        return self.projection(spikes)
