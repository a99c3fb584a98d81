"""
Coupled-oscillator potential over the latent position.

The latent vector is split into ``groups`` independent channels. Inside each
channel neighbouring oscillators are coupled through a learned palindromic
kernel, i.e. a symmetric Toeplitz operator W applied by zero-padded 1-d
convolution. The potential is the normalized quadratic form

    U(z) = sum_g z_g^T (W_g / ||W_g||_2) z_g

and its gradient is 2 W_g z_g / ||W_g||_2 per group. The spectral norm is
computed each forward pass (power iteration, with an exact dense fallback
for groups it does not resolve) and is held constant for differentiation.
"""

import contextlib
import logging
from typing import Iterator, Optional

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DimensionError
from .layers import Module, uniform
from .tensor import Tensor, conv1d_grouped, getitem, grouped_correlate, matmul, no_grad

logger = logging.getLogger(__name__)


def mirror_index(half: int) -> np.ndarray:
    """Index expanding ``half`` taps (outermost first, center last) into a palindrome."""
    return np.concatenate([np.arange(half), np.arange(half - 2, -1, -1)])


class OscillatorPotential(Module):
    """
    Grouped symmetric Toeplitz coupling realizing U(z).

    Args:
        latent_dim: Latent dimension d (divisible by groups)
        groups: Number of independent channels
        kernel_size: Odd kernel length k
        rng: Generator for initialization
        input_dim: If given, adds the input coupling W_x (input_dim x d)
        init_bound: Half-width of the uniform kernel initialization
    """

    def __init__(self, latent_dim: int, groups: int = 4, kernel_size: int = 7,
                 rng: Optional[np.random.Generator] = None, input_dim: Optional[int] = None,
                 init_bound: float = 0.1):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigurationError(f"kernel_size must be odd and positive, got {kernel_size}")
        if groups < 1 or latent_dim % groups != 0:
            raise ConfigurationError(f"latent_dim {latent_dim} is not divisible by groups {groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.groups = groups
        self.kernel_size = kernel_size
        self.group_size = latent_dim // groups
        self._mirror = mirror_index((kernel_size + 1) // 2)
        self._frozen_norm: Optional[np.ndarray] = None

        self.kernel_half = uniform(rng, (groups, (kernel_size + 1) // 2), init_bound, name='kernel_half')
        # start with ||W|| close to 1 in every group
        self.kernel_half.data = self.kernel_half.data / self.spectral_norm()[:, None]

        self.input_coupling = None
        if input_dim is not None:
            self.input_coupling = uniform(rng, (input_dim, latent_dim), 0.01, name='input_coupling')

    # -- kernels ------------------------------------------------------------

    def kernels(self) -> Tensor:
        """Palindromic kernels (groups x k) on the tape."""
        return getitem(self.kernel_half, (slice(None), self._mirror))

    def kernel_array(self) -> np.ndarray:
        return self.kernel_half.data[:, self._mirror]

    def dense_operator(self, group: int, length: Optional[int] = None) -> np.ndarray:
        """Materialize the (unnormalized) Toeplitz matrix of one group."""
        length = self.group_size if length is None else length
        kernel = self.kernel_array()[group]
        pad = (self.kernel_size - 1) // 2
        first_col = np.zeros(length)
        first_row = np.zeros(length)
        for m in range(min(pad + 1, length)):
            first_col[m] = kernel[pad - m]
            first_row[m] = kernel[pad + m]
        return scipy.linalg.toeplitz(first_col, first_row)

    # -- normalization ------------------------------------------------------

    def spectral_norm(self, max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
        """
        Largest singular value of each group's Toeplitz operator.

        Power iteration from a fixed, non-symmetric start vector for at most
        ``max_iter`` iterations. A group counts as converged once its Rayleigh
        residual ||W x - rho x|| falls below ``tol`` relative to |rho|; any
        group that has not converged (slow spectral gap, or the +/- sigma tie
        of a bipartite kernel) is resolved exactly with ``eigvalsh`` on the
        dense operator, which is symmetric. An all-zero kernel reports 1,
        which makes its potential identically zero.

        Returns:
            Array of shape (groups,)
        """
        if self._frozen_norm is not None:
            return self._frozen_norm
        kernels = self.kernel_array()
        x = np.tile(1.0 + np.arange(self.group_size) / self.group_size, (self.groups, 1))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        sigma = np.zeros(self.groups)
        converged = np.zeros(self.groups, dtype=bool)
        for _ in range(max_iter):
            y = grouped_correlate(x, kernels)
            rho = np.einsum('gl,gl->g', x, y)
            residual = np.linalg.norm(y - rho[:, None] * x, axis=1)
            sigma = np.abs(rho)
            converged = residual <= tol * np.maximum(sigma, 1e-300)
            if np.all(converged):
                break
            norm = np.linalg.norm(y, axis=1)
            nonzero = norm > 0
            x[nonzero] = y[nonzero] / norm[nonzero, None]
        for g in np.flatnonzero(~converged):
            sigma[g] = np.abs(np.linalg.eigvalsh(self.dense_operator(g))).max()
            logger.debug("power iteration did not converge for group %d, exact norm %.6g", g, sigma[g])
        return np.where(sigma > 1e-12, sigma, 1.0)

    @contextlib.contextmanager
    def frozen_norm(self, norms: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
        """Hold the spectral norms fixed (current values unless given)."""
        norms = self.spectral_norm() if norms is None else np.asarray(norms, dtype=float)
        previous = self._frozen_norm
        self._frozen_norm = norms
        try:
            yield norms
        finally:
            self._frozen_norm = previous

    def normalized_kernels(self) -> Tensor:
        """Kernels divided by their group's spectral norm (norm held constant)."""
        inv = 1.0 / self.spectral_norm()
        return self.kernels() * Tensor(np.repeat(inv[:, None], self.kernel_size, axis=1))

    # -- potential ----------------------------------------------------------

    def _grouped(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"latent has {z.shape[-1]} dims, potential expects {self.latent_dim}")
        return z.reshape(z.shape[:-1] + (self.groups, self.group_size))

    def energy(self, z: Tensor) -> Tensor:
        """U(z); shape () for a single latent or (batch,) for a batch."""
        zg = self._grouped(z)
        wz = conv1d_grouped(zg, self.normalized_kernels())
        return (zg * wz).sum(axis=(-2, -1))

    def grad_z(self, z: Tensor) -> Tensor:
        """Analytic gradient 2 W z / ||W|| with the shape of ``z``."""
        zg = self._grouped(z)
        wz = conv1d_grouped(zg, self.normalized_kernels())
        return (wz * 2.0).reshape(z.shape)

    def _input_drive(self, x: Tensor) -> Tensor:
        if self.input_coupling is None:
            raise ConfigurationError("input coupling W_x is only available for the input-potential variant")
        if x.ndim == 1:
            return matmul(x.reshape(1, x.shape[0]), self.input_coupling).reshape(self.latent_dim)
        return matmul(x, self.input_coupling)

    def energy_with_input(self, z: Tensor, x: Tensor) -> Tensor:
        """U(z, x) = U(z) + z^T W_x x."""
        return self.energy(z) + (z * self._input_drive(x)).sum(axis=-1)

    def grad_z_with_input(self, z: Tensor, x: Tensor) -> Tensor:
        return self.grad_z(z) + self._input_drive(x)

    def gradient(self, z: Tensor, x: Optional[Tensor] = None) -> Tensor:
        """grad_z of whichever potential form applies (autonomous unless x is given)."""
        if x is None or self.input_coupling is None:
            return self.grad_z(z)
        return self.grad_z_with_input(z, x)

    def energy_value(self, z: np.ndarray) -> float:
        """Plain float U(z) for diagnostics."""
        with no_grad():
            return float(self.energy(Tensor(z)).data.sum())
