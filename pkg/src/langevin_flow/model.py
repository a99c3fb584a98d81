"""
LangevinFlow: GRU encoder, Langevin latent rollout and attention decoder.

Per trial the model encodes held-in spikes into hidden states h_0..h_T, draws
(z_0, v_0) from h_0, advances the latents T steps under the learned potential
and decodes rates for every neuron from [z_t, v_t, h_t]. The objective is the
Poisson negative log-likelihood plus a weighted sum of KL terms, with
per-trial sums averaged over the batch.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln

from .config import MODEL_SETTINGS, load_config
from .data import TrialBatch, TrialStack, stack_trials, FORWARD_INPUTS
from .decoder import LinearDecoder, TransformerDecoder, decode
from .encoder import InitialLatentHead, LinearEncoder, RecurrentEncoder, init_latents
from .errors import ConfigurationError, ContractError, DataError, DimensionError
from .langevin import (LangevinParams, LangevinState, LatentNoise, draw_noise, first_order_rollout,
                       kl_velocity_step, rollout)
from .layers import Module
from .potential import OscillatorPotential
from .seeding import substream
from .tensor import Tensor, getitem, no_grad

logger = logging.getLogger(__name__)

VARIANTS = (
    'full',
    'baseline1_linear_decoder',
    'baseline2_linear_encoder',
    'baseline3_no_langevin',
    'baseline4_input_potential',
    'baseline5_first_order',
)
DTYPES = ('float64', 'float32')


@dataclass
class ModelConfig:
    """
    Architecture and dynamics settings of one model.

    ``n_neurons`` is the readout width (all neurons) and ``n_held_in`` the
    encoder input width; both come from the dataset, the rest from
    ``model_settings.yaml``.
    """
    n_neurons: int
    n_held_in: int
    latent_dim: int = 32
    hidden_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    groups: int = 4
    kernel_size: int = 7
    max_len: int = 256
    positional_encoding: bool = True
    coordinated_dropout_rate: float = 0.25
    forward_input: str = 'zeros'
    eval_samples: int = 1
    variant: str = 'full'
    dtype: str = 'float64'
    seed: int = 0
    langevin: LangevinParams = field(default_factory=LangevinParams)

    def __post_init__(self):
        if isinstance(self.langevin, dict):
            self.langevin = LangevinParams.from_dict(self.langevin)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Unknown variant '{self.variant}'. Available variants: {list(VARIANTS)}")
        for name in ('n_neurons', 'n_held_in', 'latent_dim', 'hidden_dim', 'model_dim', 'heads', 'max_len',
                     'eval_samples'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_held_in > self.n_neurons:
            raise ConfigurationError(f"n_held_in {self.n_held_in} exceeds n_neurons {self.n_neurons}")
        if self.model_dim % self.heads != 0:
            raise ConfigurationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.groups < 1 or self.latent_dim % self.groups != 0:
            raise ConfigurationError(f"latent_dim {self.latent_dim} is not divisible by groups {self.groups}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.coordinated_dropout_rate < 1.0:
            raise ConfigurationError(f"coordinated_dropout_rate must lie in [0, 1), got {self.coordinated_dropout_rate}")
        if self.forward_input not in FORWARD_INPUTS:
            raise ConfigurationError(f"Unknown forward_input '{self.forward_input}'. Available: {list(FORWARD_INPUTS)}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"Unknown dtype '{self.dtype}'. Available: {list(DTYPES)}")
        self.langevin.validate()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_settings(cls, n_neurons: int, n_held_in: int, settings: Optional[Dict[str, Any]] = None) -> 'ModelConfig':
        """Build from a resolved settings dictionary (``model`` and ``langevin`` sections)."""
        settings = settings if settings is not None else load_config(MODEL_SETTINGS)
        data = dict(settings.get('model', {}))
        data.update(n_neurons=n_neurons, n_held_in=n_held_in, langevin=settings.get('langevin', {}))
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['langevin'] = self.langevin.to_dict()
        return data

    @property
    def uses_latents(self) -> bool:
        return self.variant != 'baseline3_no_langevin'

    @property
    def with_velocity(self) -> bool:
        return self.uses_latents and self.variant != 'baseline5_first_order'

    @property
    def decoder_input_dim(self) -> int:
        if not self.uses_latents:
            return self.hidden_dim
        if not self.with_velocity:
            return self.latent_dim + self.hidden_dim
        return 2 * self.latent_dim + self.hidden_dim


@dataclass
class ForwardOutput:
    """
    Result of one forward pass over a stack of trials.

    ``kl_total`` is exactly the sum of the breakdown terms; all KL terms are
    batch means of per-trial sums.
    """
    rates: Tensor
    kl_total: Tensor
    kl_z0: Optional[Tensor]
    kl_v0: Optional[Tensor]
    kl_steps: List[Tensor]
    loss_mask: np.ndarray
    zs: Optional[np.ndarray] = None
    vs: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None

    def kl_breakdown(self) -> Dict[str, Any]:
        return {
            'kl_z0': 0.0 if self.kl_z0 is None else self.kl_z0.item(),
            'kl_v0': 0.0 if self.kl_v0 is None else self.kl_v0.item(),
            'kl_steps': [t.item() for t in self.kl_steps],
        }


def poisson_nll(rates: Tensor, spikes: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Summed Poisson negative log-likelihood r - x ln r + ln x!.

    Args:
        rates: Positive rates
        spikes: Non-negative integer counts, same shape
        mask: Optional 0/1 array restricting the sum

    Raises:
        DataError: On negative counts
        DimensionError: On shape mismatch
    """
    spikes = np.asarray(spikes, dtype=rates.data.dtype)
    if spikes.shape != rates.shape:
        raise DimensionError(f"spikes {spikes.shape} do not match rates {rates.shape}")
    if np.any(spikes < 0):
        raise DataError("spike counts must be non-negative")
    per_entry = rates - Tensor(spikes, dtype=spikes.dtype) * rates.log() + Tensor(gammaln(spikes + 1.0), dtype=spikes.dtype)
    if mask is None:
        return per_entry.sum()
    mask = np.asarray(mask, dtype=rates.data.dtype)
    if mask.shape != rates.shape:
        raise DimensionError(f"mask {mask.shape} does not match rates {rates.shape}")
    return (per_entry * Tensor(mask, dtype=mask.dtype)).sum()


def coordinated_dropout(spikes: np.ndarray, rate: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Zero each entry independently with probability ``rate``.

    Returns:
        (masked_spikes, dropped) where ``dropped`` is a bool array of the zeroed entries

    Raises:
        ConfigurationError: If rate is outside [0, 1)
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"coordinated dropout rate must lie in [0, 1), got {rate}")
    spikes = np.asarray(spikes)
    dropped = rng.random(spikes.shape) < rate
    return np.where(dropped, 0.0, spikes), dropped


def evaluation_loss_mask(stack: TrialStack) -> np.ndarray:
    """Every real bin of every neuron."""
    return np.repeat(stack.bin_mask[:, :, None], stack.targets.shape[2], axis=2).astype(float)


def training_loss_mask(stack: TrialStack, dropped: np.ndarray) -> np.ndarray:
    """
    Entries scored during training.

    Held-in columns count where they were dropped or fall in the forward
    window; held-out columns always count. With nothing dropped every real
    entry counts.
    """
    if not dropped.any():
        return evaluation_loss_mask(stack)
    n_in = stack.n_held_in
    mask = np.zeros(stack.targets.shape, dtype=bool)
    mask[:, :, :n_in] = dropped | stack.forward_mask[:, :, None]
    mask[:, :, n_in:] = True
    mask &= stack.bin_mask[:, :, None]
    return mask.astype(float)


class LangevinFlow(Module):
    """
    The sequential VAE; ``config.variant`` selects the ablation path.

    Args:
        config: Model configuration
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = substream(config.seed, 'init')
        d, hidden = config.latent_dim, config.hidden_dim
        if config.variant == 'baseline2_linear_encoder':
            self.encoder = LinearEncoder(config.n_held_in, hidden, rng)
        else:
            self.encoder = RecurrentEncoder(config.n_held_in, hidden, rng)
        self.initial_head = None
        self.potential = None
        if config.uses_latents:
            self.initial_head = InitialLatentHead(hidden, d, rng, with_velocity=config.with_velocity)
            input_dim = config.n_held_in if config.variant == 'baseline4_input_potential' else None
            self.potential = OscillatorPotential(d, config.groups, config.kernel_size, rng, input_dim=input_dim)
        if config.variant == 'baseline1_linear_decoder':
            self.decoder = LinearDecoder(config.decoder_input_dim, config.n_neurons, rng)
        else:
            self.decoder = TransformerDecoder(config.decoder_input_dim, config.model_dim, config.n_neurons, rng,
                                              heads=config.heads, max_len=config.max_len,
                                              use_positional=config.positional_encoding)
        logger.info(f"Built LangevinFlow variant '{config.variant}' with {self.num_parameters()} parameters")

    @property
    def params(self) -> LangevinParams:
        return self.config.langevin

    def forward(self, stack: TrialStack, train_mode: bool = False, noise: Optional[LatentNoise] = None,
                dropout_rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        """
        Run encoder, latent rollout and decoder on a stack of trials.

        Args:
            stack: Padded trials
            train_mode: Apply coordinated dropout and sample the latents
            noise: Pre-drawn latent noise; None gives the posterior-mean path
                (in train mode noise is drawn from the seed when omitted)
            dropout_rng: Generator for the dropout mask (train mode)

        Returns:
            ForwardOutput with rates for all neurons, columns in ``stack.neuron_order``
        """
        cfg = self.config
        if stack.encoder_input.shape[2] != cfg.n_held_in or stack.targets.shape[2] != cfg.n_neurons:
            raise ContractError(f"stack with {stack.encoder_input.shape[2]} held-in / {stack.targets.shape[2]} "
                                f"neurons does not fit a model built for {cfg.n_held_in} / {cfg.n_neurons}")
        batch, length = stack.batch_size, stack.n_bins
        steps = length - 1
        dtype = self.decoder.readout.weight.data.dtype

        inputs = stack.encoder_input
        loss_mask = evaluation_loss_mask(stack)
        if train_mode and cfg.coordinated_dropout_rate > 0:
            rng = dropout_rng if dropout_rng is not None else substream(cfg.seed, 'dropout')
            inputs, dropped = coordinated_dropout(inputs, cfg.coordinated_dropout_rate, rng)
            dropped &= stack.observed_mask[:, :, None]
            loss_mask = training_loss_mask(stack, dropped)
        if train_mode and noise is None and cfg.uses_latents:
            noise = draw_noise(cfg.seed, stack.trial_ids, steps, cfg.latent_dim, with_velocity=cfg.with_velocity)

        x = Tensor(inputs, dtype=dtype)
        hs = self.encoder.steps(x)
        if not cfg.uses_latents:
            rates = decode(self.decoder, None, None, hs, stack.bin_mask)
            zero = Tensor(np.zeros((), dtype=dtype))
            return ForwardOutput(rates, zero, None, None, [], loss_mask, hidden=_as_array(hs))

        spikes_at = [getitem(x, (slice(None), t)) for t in range(steps)] \
            if cfg.variant == 'baseline4_input_potential' else None
        init = init_latents(self.initial_head, hs[0],
                            None if noise is None else noise.z0,
                            None if noise is None else noise.v0)
        kl_steps: List[Tensor] = []
        if cfg.with_velocity:
            zs, vs = [init.z0], [init.v0]
            if steps > 0:
                result = rollout(LangevinState(init.z0, init.v0), self.params, self.potential, steps,
                                 noise=None if noise is None else noise.steps, inputs=spikes_at)
                zs, vs = result.zs, result.vs
                for i, mu_q in enumerate(result.mu_qs):
                    weights = np.repeat(stack.bin_mask[:, i + 1, None], cfg.latent_dim, axis=1)
                    kl_steps.append(kl_velocity_step(mu_q, self.params, weights) * (1.0 / batch))
            rates = decode(self.decoder, zs, vs, hs, stack.bin_mask)
        else:
            zs = first_order_rollout(init.z0, self.potential, self.params, steps, inputs=spikes_at)
            vs = None
            rates = decode(self.decoder, zs, None, hs, stack.bin_mask)

        kl_total = init.kl_z
        if init.kl_v is not None:
            kl_total = kl_total + init.kl_v
        for term in kl_steps:
            kl_total = kl_total + term
        return ForwardOutput(rates, kl_total, init.kl_z, init.kl_v, kl_steps, loss_mask,
                             zs=_as_array(zs), vs=None if vs is None else _as_array(vs), hidden=_as_array(hs))

    __call__ = forward

    def loss(self, output: ForwardOutput, stack: TrialStack, kl_weight: float) -> Tensor:
        return loss(output, stack, kl_weight)


def _as_array(seq: Sequence[Tensor]) -> np.ndarray:
    return np.stack([t.data for t in seq], axis=1)


def loss(output: ForwardOutput, stack: TrialStack, kl_weight: float) -> Tensor:
    """
    Batch-mean Poisson NLL over the scored entries plus ``kl_weight`` times the KL.

    Raises:
        ContractError: If kl_weight is negative
    """
    if kl_weight < 0:
        raise ContractError(f"KL weight must be non-negative, got {kl_weight}")
    nll = poisson_nll(output.rates, stack.targets, output.loss_mask) * (1.0 / stack.batch_size)
    if kl_weight == 0:
        return nll
    return nll + output.kl_total * kl_weight


def worker_count(default: int = 1) -> int:
    """Thread cap from LANGEVIN_THREADS."""
    value = os.environ.get('LANGEVIN_THREADS')
    if value is None:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigurationError(f"LANGEVIN_THREADS must be an integer, got '{value}'")


def _predict_stack(model: LangevinFlow, trials: Sequence[TrialBatch], samples: int) -> Tuple[np.ndarray, ForwardOutput]:
    cfg = model.config
    stack = stack_trials(trials, cfg.forward_input)
    with no_grad():
        if samples <= 1:
            output = model.forward(stack)
            rates = output.rates.data
        else:
            rates = np.zeros(stack.targets.shape)
            for s in range(samples):
                noise = draw_noise(cfg.seed, stack.trial_ids, stack.n_bins - 1, cfg.latent_dim,
                                   sample=s + 1, with_velocity=cfg.with_velocity)
                output = model.forward(stack, noise=noise)
                rates += output.rates.data
            rates /= samples
    inverse = np.argsort(stack.neuron_order)
    return rates[:, :, inverse], output


def predict_rates(model: LangevinFlow, trials: Sequence[TrialBatch], batch_size: int = 64,
                  samples: Optional[int] = None, threads: Optional[int] = None,
                  return_latents: bool = False) -> Union[List[np.ndarray], Tuple[List[np.ndarray], List[Dict[str, np.ndarray]]]]:
    """
    Evaluation-mode rates for each trial, columns in original neuron order.

    Batches run on a thread pool of ``threads`` workers (LANGEVIN_THREADS by
    default); every batch uses its own tape so results do not depend on the
    worker count.

    Args:
        model: Trained model
        trials: Trials to predict
        batch_size: Trials per forward pass
        samples: Sampled rollouts to average; defaults to config.eval_samples
        threads: Worker count override
        return_latents: Also return per-trial z, v, h trajectories

    Returns:
        List of (bins, neurons) arrays, plus latent dictionaries if requested
    """
    samples = model.config.eval_samples if samples is None else samples
    threads = worker_count() if threads is None else threads
    batches = [trials[i:i + batch_size] for i in range(0, len(trials), batch_size)]
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda b: _predict_stack(model, b, samples), batches))
    else:
        results = [_predict_stack(model, b, samples) for b in batches]

    rates, latents = [], []
    for batch, (batch_rates, output) in zip(batches, results):
        for i, trial in enumerate(batch):
            rates.append(batch_rates[i, :trial.n_bins])
            latents.append({
                'z': None if output.zs is None else output.zs[i, :trial.n_bins],
                'v': None if output.vs is None else output.vs[i, :trial.n_bins],
                'h': output.hidden[i, :trial.n_bins],
            })
    logger.debug(f"Predicted rates for {len(trials)} trials in {len(batches)} batches")
    if return_latents:
        return rates, latents
    return rates


def model_card(model: LangevinFlow) -> Dict[str, Any]:
    """Description of a model for the YAML card written next to checkpoints."""
    cfg = model.config
    variants = load_config(MODEL_SETTINGS, section='variants')
    return {
        'model': 'LangevinFlow',
        'variant': cfg.variant,
        'variant_description': variants.get(cfg.variant, {}).get('description', ''),
        'num_parameters': model.num_parameters(),
        'config': cfg.to_dict(),
        'design': {
            'encoder': 'per-timestep affine' if cfg.variant == 'baseline2_linear_encoder' else 'GRU, zero initial state',
            'latent_dynamics': ('none' if not cfg.uses_latents else
                                'first-order gradient flow' if not cfg.with_velocity else
                                f"underdamped Langevin, {cfg.langevin.integrator} splitting"),
            'potential': 'grouped symmetric Toeplitz quadratic form, spectral-norm normalized (power iteration)',
            'input_potential': cfg.variant == 'baseline4_input_potential',
            'decoder': ('linear per bin' if cfg.variant == 'baseline1_linear_decoder' else
                        'one self-attention layer, residual, no feed-forward, no layer norm'),
            'positional_encoding': 'sinusoidal' if cfg.positional_encoding else 'none',
            'rate_nonlinearity': 'exp with log-rate clamped to [ln 1e-7, ln 1e4]',
            'logvar_clamp': [-10.0, 10.0],
            'loss_mask': 'dropped held-in entries, held-in forward bins, all held-out entries',
            'forward_input': cfg.forward_input,
            'evaluation': 'posterior mean' if cfg.eval_samples == 1 else f"mean of {cfg.eval_samples} sampled rollouts",
        },
        'engineering_defaults': [
            'latent_dim', 'hidden_dim', 'model_dim', 'coordinated_dropout_rate', 'learning_rate',
            'batch_size', 'epochs', 'clip_norm', 'kl_warmup_steps',
        ],
    }
