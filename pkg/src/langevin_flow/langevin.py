"""
Latent posterior flow under discretized underdamped Langevin dynamics.

Each transition is split into
  1. a deterministic Hamiltonian step moving position with velocity and
     kicking velocity with the potential force, and
  2. an Ornstein-Uhlenbeck step that damps velocity by (1 - gamma) and adds
     Gaussian noise of variance 2 m gamma k_B tau (re-parameterized).

With ``integrator='euler'`` the force is evaluated at the pre-update position,
exactly as in the training algorithm. ``integrator='leapfrog'`` splits the
kick around the drift and is the variant that conserves energy over long
noise-free runs.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, DomainError, NumericError
from .potential import OscillatorPotential
from .seeding import substream
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

INTEGRATORS = ('euler', 'leapfrog')

NoiseLike = Union[None, np.random.Generator, np.ndarray]


@dataclass
class LangevinParams:
    """
    Physical constants of the latent dynamics.

    Attributes:
        gamma: Damping coefficient in [0, 1]
        mass: Scalar mass m
        k_b: Boltzmann constant
        tau: Temperature
        dt: Integration step
        integrator: 'euler' or 'leapfrog'
    """
    gamma: float = 0.7
    mass: float = 1.0
    k_b: float = 1.0
    tau: float = 1.0
    dt: float = 1.0
    integrator: str = 'euler'

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ('mass', 'k_b', 'tau', 'dt'):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.integrator not in INTEGRATORS:
            raise ConfigurationError(f"Unknown integrator '{self.integrator}'. Available: {list(INTEGRATORS)}")

    @property
    def posterior_variance(self) -> float:
        return 2.0 * self.mass * self.gamma * self.k_b * self.tau

    @property
    def noise_scale(self) -> float:
        return math.sqrt(self.posterior_variance)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LangevinParams':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class LangevinState:
    """Latent position and velocity at step ``t`` (shape (d,) or (batch, d))."""
    z: Tensor
    v: Tensor
    t: int = 0

    def __post_init__(self):
        if self.z.shape != self.v.shape:
            raise DimensionError(f"position {self.z.shape} and velocity {self.v.shape} differ")


@dataclass
class LatentNoise:
    """
    Pre-drawn standard normal noise for one batch.

    Attributes:
        z0: (batch, d) noise for the initial position sample
        v0: (batch, d) noise for the initial velocity sample, None without velocity
        steps: (n_steps, batch, d) noise for the OU transitions
    """
    z0: np.ndarray
    v0: Optional[np.ndarray]
    steps: np.ndarray


def draw_noise(seed: int, trial_ids: Sequence[int], n_steps: int, latent_dim: int,
               epoch: int = 0, sample: int = 0, with_velocity: bool = True) -> LatentNoise:
    """
    Draw the noise of a batch, one independent stream per trial id.

    The draw for a trial depends only on (seed, epoch, sample, trial id), so
    it does not change with batch composition or scheduling.
    """
    z0, v0, steps = [], [], []
    for trial_id in trial_ids:
        rng = substream(seed, 'ou_noise', epoch, sample, trial_id)
        z0.append(rng.standard_normal(latent_dim))
        v0.append(rng.standard_normal(latent_dim))
        steps.append(rng.standard_normal((n_steps, latent_dim)))
    return LatentNoise(
        z0=np.stack(z0),
        v0=np.stack(v0) if with_velocity else None,
        steps=np.stack(steps, axis=1) if n_steps > 0 else np.zeros((0, len(trial_ids), latent_dim)),
    )


def _check_finite(state: LangevinState) -> None:
    if not (np.all(np.isfinite(state.z.data)) and np.all(np.isfinite(state.v.data))):
        raise NumericError("non-finite latent state", step=state.t)


def deterministic_step(state: LangevinState, params: LangevinParams, potential: OscillatorPotential,
                       x: Optional[Tensor] = None) -> LangevinState:
    """
    Hamiltonian part of one transition.

    Returns:
        State holding z_{t+1} and the half-updated velocity v_{t+1/2}

    Raises:
        NumericError: If the incoming state is not finite
    """
    _check_finite(state)
    dt, m = params.dt, params.mass
    if params.integrator == 'euler':
        force = potential.gradient(state.z, x)
        z_next = state.z + state.v * dt
        v_half = state.v - force * (dt / m)
    else:
        v_mid = state.v - potential.gradient(state.z, x) * (0.5 * dt / m)
        z_next = state.z + v_mid * dt
        v_half = v_mid - potential.gradient(z_next, x) * (0.5 * dt / m)
    return LangevinState(z_next, v_half, state.t + 1)


def ou_step(v_half: Tensor, params: LangevinParams, noise: NoiseLike = None) -> Tuple[Tensor, Tensor]:
    """
    Ornstein-Uhlenbeck velocity update.

    Args:
        v_half: Velocity after the deterministic step
        params: Langevin constants
        noise: A generator to draw eps from, a pre-drawn eps array, or None
            for the noise-free transition mean

    Returns:
        (v_next, mu_q) where mu_q = (1 - gamma) v_half is the transition mean
    """
    mu_q = v_half * (1.0 - params.gamma)
    if noise is None:
        return mu_q, mu_q
    if isinstance(noise, np.random.Generator):
        eps = noise.standard_normal(v_half.shape)
    else:
        eps = np.asarray(noise)
        if eps.shape != v_half.shape:
            raise DimensionError(f"noise shape {eps.shape} does not match velocity {v_half.shape}")
    v_next = mu_q + Tensor(eps * params.noise_scale, dtype=v_half.data.dtype)
    return v_next, mu_q


def gaussian_kl(mu: Tensor, variance: Union[float, Tensor], log_variance: Union[float, Tensor, None] = None) -> Tensor:
    """
    KL( N(mu, variance) || N(0, 1) ) summed over every element.

    ``variance`` may be a python float shared by all elements or a tensor
    shaped like ``mu``.
    """
    if isinstance(variance, Tensor):
        return ((mu * mu + variance - log_variance) - 1.0).sum() * 0.5
    if variance <= 0:
        raise DomainError(f"posterior variance must be positive, got {variance}")
    constant = 0.5 * mu.size * (variance - 1.0 - math.log(variance))
    return (mu * mu).sum() * 0.5 + constant


def kl_velocity_step(mu_q: Tensor, params: LangevinParams, weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Closed-form KL of the velocity transition N(mu_q, 2 m gamma k_B tau I) to N(0, I).

    Args:
        mu_q: Transition mean, (d,) or (batch, d)
        params: Langevin constants
        weights: Optional 0/1 array shaped like ``mu_q`` excluding padded steps

    Raises:
        DomainError: If gamma == 0 (the transition is degenerate)
    """
    if weights is None:
        return gaussian_kl(mu_q, params.posterior_variance)
    variance = params.posterior_variance
    if variance <= 0:
        raise DomainError(f"posterior variance must be positive, got {variance}")
    weights = np.asarray(weights, dtype=mu_q.data.dtype)
    if weights.shape != mu_q.shape:
        raise DimensionError(f"weights {weights.shape} do not match transition mean {mu_q.shape}")
    constant = 0.5 * float(weights.sum()) * (variance - 1.0 - math.log(variance))
    return (mu_q * mu_q * Tensor(weights)).sum() * 0.5 + constant


@dataclass
class RolloutResult:
    """Trajectories of a rollout; each list has steps + 1 entries (mu_qs has steps)."""
    zs: List[Tensor] = field(default_factory=list)
    vs: List[Tensor] = field(default_factory=list)
    mu_qs: List[Tensor] = field(default_factory=list)


def rollout(init: LangevinState, params: LangevinParams, potential: OscillatorPotential, steps: int,
            noise: Union[NoiseLike, Sequence[np.ndarray]] = None,
            inputs: Optional[Sequence[Tensor]] = None) -> RolloutResult:
    """
    Alternate the deterministic step and the OU step ``steps`` times.

    Args:
        init: Initial state (z_0, v_0)
        params: Langevin constants
        potential: Learned potential
        steps: Number of transitions T (>= 1)
        noise: None for the deterministic posterior-mean trajectory, a
            generator, or a sequence of per-step eps arrays
        inputs: Optional per-step spike tensors for the input-coupled potential

    Returns:
        RolloutResult with z_0..z_T, v_0..v_T and the T transition means
    """
    if steps < 1:
        raise ContractError(f"rollout needs at least one step, got {steps}")
    if inputs is not None and len(inputs) < steps:
        raise ContractError(f"rollout over {steps} steps got only {len(inputs)} inputs")
    result = RolloutResult(zs=[init.z], vs=[init.v])
    state = init
    for i in range(steps):
        x = inputs[i] if inputs is not None else None
        half = deterministic_step(state, params, potential, x)
        if noise is None or isinstance(noise, np.random.Generator):
            step_noise = noise
        else:
            step_noise = noise[i]
        v_next, mu_q = ou_step(half.v, params, step_noise)
        state = LangevinState(half.z, v_next, half.t)
        result.zs.append(state.z)
        result.vs.append(state.v)
        result.mu_qs.append(mu_q)
    logger.debug(f"Rolled out {steps} Langevin steps")
    return result


def first_order_step(z: Tensor, potential: OscillatorPotential, params: Optional[LangevinParams] = None,
                     x: Optional[Tensor] = None) -> Tensor:
    """Gradient-flow update z - dt * grad U(z), no velocity."""
    dt = params.dt if params is not None else 1.0
    if not np.all(np.isfinite(z.data)):
        raise NumericError("non-finite latent position")
    return z - potential.gradient(z, x) * dt


def first_order_rollout(z0: Tensor, potential: OscillatorPotential, params: LangevinParams, steps: int,
                        inputs: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
    zs = [z0]
    for i in range(steps):
        x = inputs[i] if inputs is not None else None
        zs.append(first_order_step(zs[-1], potential, params, x))
    return zs


def hamiltonian(z: np.ndarray, v: np.ndarray, potential: OscillatorPotential, params: LangevinParams) -> float:
    """Total energy U(z) / m + |v|^2 / 2 (summed over a batch if given)."""
    with no_grad():
        u = float(potential.energy(Tensor(z)).data.sum())
    return u / params.mass + 0.5 * float(np.sum(np.asarray(v) ** 2))
