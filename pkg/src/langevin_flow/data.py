"""
Synthetic Lorenz spiking benchmark, trial containers and the LGVF trial file.

A dataset is built from ``n_conditions`` Lorenz trajectories. Each trajectory
is standardized, projected through a random linear map into log firing rates
and repeated over ``trials_per_condition`` trials whose spikes are independent
Poisson draws. A fixed subset of neurons is held out from the encoder and the
final bins of every trial, training trials included, form the
forward-prediction window.

LGVF layout (little endian):
    b"LGVF", u32 version (1), u32 trial count, then per trial
    u32 bins, u32 neurons, u8 flags (1 rates, 2 latents, 4 condition),
    u32 spikes[bins * neurons], f64 rates[...], f64 latents[bins * 3], i32 condition
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .config import LORENZ_SETTINGS, dump_yaml, load_config
from .errors import ConfigurationError, DataError, FormatError, NumericError
from .seeding import substream

logger = logging.getLogger(__name__)

MAGIC = b'LGVF'
VERSION = 1
FLAG_RATES = 1
FLAG_LATENTS = 2
FLAG_CONDITION = 4
DIVERGENCE_LIMIT = 1e6
MANIFEST_NAME = 'dataset_manifest.yaml'
FORWARD_INPUTS = ('zeros', 'hold')


@dataclass
class LorenzConfig:
    """Generating parameters of the synthetic Lorenz dataset."""
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt_ode: float = 0.01
    burn_in: int = 500
    steps_per_bin: int = 1
    n_bins: int = 50
    n_trials: int = 1300
    trials_per_condition: int = 20
    n_neurons: int = 29
    rate_scale: float = 0.3
    held_out_fraction: float = 0.25
    forward_fraction: float = 0.25
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dt_ode <= 0:
            raise ConfigurationError(f"dt_ode must be positive, got {self.dt_ode}")
        if self.n_neurons < 3:
            raise ConfigurationError(f"n_neurons must be at least 3, got {self.n_neurons}")
        if self.rate_scale <= 0:
            raise ConfigurationError(f"rate_scale must be positive, got {self.rate_scale}")
        if self.n_trials < 2:
            raise ConfigurationError(f"n_trials must be at least 2, got {self.n_trials}")
        if self.n_bins < 1 or self.steps_per_bin < 1 or self.burn_in < 0:
            raise ConfigurationError("n_bins and steps_per_bin must be positive and burn_in non-negative")
        if self.trials_per_condition < 1:
            raise ConfigurationError(f"trials_per_condition must be positive, got {self.trials_per_condition}")
        for name in ('held_out_fraction', 'forward_fraction', 'val_fraction'):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {value}")
        n_val = int(math.floor(self.n_trials * self.val_fraction))
        if n_val < 1 or n_val >= self.n_trials:
            raise ConfigurationError(
                f"val_fraction {self.val_fraction} leaves {n_val} of {self.n_trials} trials for validation")
        if int(math.floor(self.n_neurons * self.held_out_fraction)) >= self.n_neurons:
            raise ConfigurationError("held_out_fraction leaves no held-in neurons")

    @property
    def n_conditions(self) -> int:
        return int(math.ceil(self.n_trials / self.trials_per_condition))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LorenzConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_settings(cls, config_path: Union[str, Path] = LORENZ_SETTINGS,
                      overrides: Optional[Dict[str, Any]] = None) -> 'LorenzConfig':
        data = load_config(config_path, section='lorenz')
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrialBatch:
    """
    One trial of binned spikes with its neuron and time splits.

    Attributes:
        spikes: (bins, neurons) non-negative integer counts
        held_in: Neuron indices visible to the encoder
        held_out: Neuron indices only scored (co-smoothing)
        n_observed: Leading bins visible to the encoder; the rest is the forward window
        true_rates: Optional ground-truth rates, same shape as spikes
        true_latents: Optional (bins, 3) generating states
        condition_id: Optional condition label shared by trials with equal rates
        trial_id: Dataset-wide trial index (keys the per-trial noise streams)
    """
    spikes: np.ndarray
    held_in: np.ndarray
    held_out: np.ndarray
    n_observed: int
    true_rates: Optional[np.ndarray] = None
    true_latents: Optional[np.ndarray] = None
    condition_id: Optional[int] = None
    trial_id: int = 0

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes)
        self.held_in = np.asarray(self.held_in, dtype=np.int64)
        self.held_out = np.asarray(self.held_out, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.spikes.ndim != 2:
            raise DataError(f"spikes must be (bins, neurons), got shape {self.spikes.shape}")
        if np.any(self.spikes < 0):
            raise DataError(f"trial {self.trial_id} has negative spike counts")
        if np.any(self.spikes != np.round(self.spikes)):
            raise DataError(f"trial {self.trial_id} has non-integer spike counts")
        split = np.concatenate([self.held_in, self.held_out])
        if not np.array_equal(np.sort(split), np.arange(self.n_neurons)):
            raise DataError(f"held-in and held-out neurons do not partition {self.n_neurons} neurons")
        if not 0 <= self.n_observed <= self.n_bins:
            raise DataError(f"n_observed {self.n_observed} outside [0, {self.n_bins}]")
        if self.true_rates is not None and np.shape(self.true_rates) != self.spikes.shape:
            raise DataError(f"true_rates shape {np.shape(self.true_rates)} != spikes shape {self.spikes.shape}")
        if self.true_latents is not None and np.shape(self.true_latents)[0] != self.n_bins:
            raise DataError("true_latents must have one row per bin")

    @property
    def n_bins(self) -> int:
        return self.spikes.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.spikes.shape[1]

    @property
    def n_forward(self) -> int:
        return self.n_bins - self.n_observed


@dataclass
class LorenzDataset:
    """Train/validation trials plus the splits and generating config."""
    config: Dict[str, Any]
    train: List[TrialBatch]
    val: List[TrialBatch]
    held_in: np.ndarray
    held_out: np.ndarray
    n_observed: int

    def summary(self) -> Dict[str, float]:
        trials = self.train + self.val
        spikes = np.concatenate([t.spikes for t in trials])
        return {
            'n_train': len(self.train),
            'n_val': len(self.val),
            'n_neurons': int(spikes.shape[1]),
            'n_bins': int(trials[0].n_bins),
            'total_spikes': int(spikes.sum()),
            'mean_rate': float(spikes.mean()),
        }


# ---------------------------------------------------------------------------
# Lorenz generator
# ---------------------------------------------------------------------------

def lorenz_derivative(state: np.ndarray, sigma: float, rho: float, beta: float) -> np.ndarray:
    """Right-hand side of the Lorenz system for states shaped (..., 3)."""
    y1, y2, y3 = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([
        sigma * (y2 - y1),
        y1 * (rho - y3) - y2,
        y1 * y2 - beta * y3,
    ], axis=-1)


def _rk4(state: np.ndarray, cfg: LorenzConfig) -> np.ndarray:
    f = lambda y: lorenz_derivative(y, cfg.sigma, cfg.rho, cfg.beta)
    h = cfg.dt_ode
    k1 = f(state)
    k2 = f(state + 0.5 * h * k1)
    k3 = f(state + 0.5 * h * k2)
    k4 = f(state + h * k3)
    return state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def lorenz_trajectory(cfg: LorenzConfig, initial_state: np.ndarray) -> np.ndarray:
    """
    Integrate the Lorenz system with RK4.

    Args:
        cfg: Generator configuration (parameters, dt_ode, burn_in, steps_per_bin, n_bins)
        initial_state: (3,) or (..., 3) starting states

    Returns:
        Array (n_bins, 3) or (..., n_bins, 3) of recorded states

    Raises:
        NumericError: If the state leaves |y| <= 1e6 or becomes non-finite
    """
    state = np.asarray(initial_state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NumericError("initial Lorenz state is not finite")
    recorded = []
    total = cfg.burn_in + (cfg.n_bins - 1) * cfg.steps_per_bin
    for step in range(total + 1):
        if step >= cfg.burn_in and (step - cfg.burn_in) % cfg.steps_per_bin == 0:
            recorded.append(state)
        if step == total:
            break
        state = _rk4(state, cfg)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > DIVERGENCE_LIMIT:
            raise NumericError("Lorenz trajectory diverged", step=step)
    return np.stack(recorded, axis=-2)


def project_to_rates(states: np.ndarray, n_neurons: int, rate_scale: float,
                     rng: np.random.Generator) -> np.ndarray:
    """
    Map latent states (..., 3) to positive rates (..., n_neurons).

    States are standardized per coordinate over every leading axis, mapped by
    a random N(0, 1/3) matrix, and offset per neuron so that each neuron's mean
    rate over the input equals ``rate_scale``.
    """
    states = np.asarray(states, dtype=np.float64)
    flat = states.reshape(-1, states.shape[-1])
    std = flat.std(axis=0)
    standardized = (flat - flat.mean(axis=0)) / np.where(std > 0, std, 1.0)
    weights = rng.standard_normal((states.shape[-1], n_neurons)) / math.sqrt(states.shape[-1])
    linear = standardized @ weights
    linear -= linear.max(axis=0)
    bias = math.log(rate_scale) - np.log(np.exp(linear).mean(axis=0))
    rates = np.exp(linear + bias)
    return rates.reshape(states.shape[:-1] + (n_neurons,))


def sample_spikes(rates: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Poisson counts for every entry of ``rates``."""
    rates = np.asarray(rates)
    if np.any(rates <= 0):
        raise DataError("Poisson rates must be positive")
    return rng.poisson(rates).astype(np.int64)


def neuron_split(n_neurons: int, held_out_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random held-in / held-out partition with floor(n * fraction) held-out neurons."""
    order = rng.permutation(n_neurons)
    n_out = int(math.floor(n_neurons * held_out_fraction))
    return np.sort(order[n_out:]), np.sort(order[:n_out])


def make_dataset(cfg: LorenzConfig) -> LorenzDataset:
    """
    Generate the full benchmark deterministically from ``cfg``.

    Condition c starts from a random state around the attractor; trial i belongs
    to condition i // trials_per_condition and draws its spikes from its own
    substream, so regeneration with the same seed is bit-identical.
    """
    cfg.validate()
    starts = substream(cfg.seed, 'data', 0).uniform(-15.0, 15.0, size=(cfg.n_conditions, 3))
    starts[:, 2] += 25.0
    states = lorenz_trajectory(cfg, starts)
    rates = project_to_rates(states, cfg.n_neurons, cfg.rate_scale, substream(cfg.seed, 'data', 2))
    held_in, held_out = neuron_split(cfg.n_neurons, cfg.held_out_fraction, substream(cfg.seed, 'data', 3))
    n_observed = cfg.n_bins - int(math.floor(cfg.n_bins * cfg.forward_fraction))

    trials = []
    for trial_id in range(cfg.n_trials):
        condition = trial_id // cfg.trials_per_condition
        spikes = sample_spikes(rates[condition], substream(cfg.seed, 'data', 1, trial_id))
        trials.append(TrialBatch(
            spikes=spikes, held_in=held_in, held_out=held_out, n_observed=n_observed,
            true_rates=rates[condition], true_latents=states[condition],
            condition_id=condition, trial_id=trial_id,
        ))

    order = substream(cfg.seed, 'data', 4).permutation(cfg.n_trials)
    n_val = int(math.floor(cfg.n_trials * cfg.val_fraction))
    val_ids = set(int(i) for i in order[:n_val])
    dataset = LorenzDataset(
        config=cfg.to_dict(),
        train=[t for t in trials if t.trial_id not in val_ids],
        val=[t for t in trials if t.trial_id in val_ids],
        held_in=held_in, held_out=held_out, n_observed=n_observed,
    )
    logger.info(f"Generated Lorenz dataset: {len(dataset.train)} train / {len(dataset.val)} val trials, "
                f"{cfg.n_neurons} neurons ({len(held_out)} held out), {cfg.n_bins} bins")
    return dataset


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class TrialStack:
    """
    Trials padded to a common length, neurons reordered held-in first.

    Attributes:
        targets: (batch, bins, neurons) counts, columns in ``neuron_order``
        encoder_input: (batch, bins, n_held_in) spikes visible to the encoder
        bin_mask: (batch, bins) True on real bins
        forward_mask: (batch, bins) True on real bins of the forward window
        neuron_order: Original neuron index of each target column
        n_held_in: Number of leading held-in columns
        true_rates: Optional (batch, bins, neurons), same column order
    """
    targets: np.ndarray
    encoder_input: np.ndarray
    bin_mask: np.ndarray
    forward_mask: np.ndarray
    neuron_order: np.ndarray
    n_held_in: int
    trial_ids: np.ndarray
    condition_ids: np.ndarray
    true_rates: Optional[np.ndarray] = None
    true_latents: Optional[np.ndarray] = None
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def batch_size(self) -> int:
        return self.targets.shape[0]

    @property
    def n_bins(self) -> int:
        return self.targets.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return self.bin_mask & ~self.forward_mask


def stack_trials(trials: Sequence[TrialBatch], forward_input: str = 'zeros') -> TrialStack:
    """
    Pad and stack trials for batched evaluation.

    Forward bins are hidden from the encoder for every trial, training split
    included; their spikes stay in ``targets`` and are flagged in
    ``forward_mask``.

    Args:
        trials: Trials sharing one neuron split
        forward_input: 'zeros' blanks the encoder input on forward bins,
            'hold' repeats the last observed bin there

    Raises:
        DataError: If the list is empty or the trials disagree on the split
    """
    if not trials:
        raise DataError("cannot stack an empty list of trials")
    if forward_input not in FORWARD_INPUTS:
        raise ConfigurationError(f"Unknown forward_input '{forward_input}'. Available: {list(FORWARD_INPUTS)}")
    first = trials[0]
    for trial in trials[1:]:
        if not (np.array_equal(trial.held_in, first.held_in) and np.array_equal(trial.held_out, first.held_out)):
            raise DataError(f"trial {trial.trial_id} uses a different neuron split")
    order = np.concatenate([first.held_in, first.held_out])
    n_in = len(first.held_in)
    batch, length, n_neurons = len(trials), max(t.n_bins for t in trials), first.n_neurons

    targets = np.zeros((batch, length, n_neurons))
    bin_mask = np.zeros((batch, length), dtype=bool)
    forward_mask = np.zeros((batch, length), dtype=bool)
    has_rates = all(t.true_rates is not None for t in trials)
    has_latents = all(t.true_latents is not None for t in trials)
    true_rates = np.ones((batch, length, n_neurons)) if has_rates else None
    true_latents = np.zeros((batch, length, 3)) if has_latents else None
    for b, trial in enumerate(trials):
        targets[b, :trial.n_bins] = trial.spikes[:, order]
        bin_mask[b, :trial.n_bins] = True
        forward_mask[b, trial.n_observed:trial.n_bins] = True
        if has_rates:
            true_rates[b, :trial.n_bins] = trial.true_rates[:, order]
        if has_latents:
            true_latents[b, :trial.n_bins] = trial.true_latents

    encoder_input = targets[:, :, :n_in].copy()
    for b, trial in enumerate(trials):
        if forward_input == 'hold' and trial.n_observed > 0:
            encoder_input[b, trial.n_observed:trial.n_bins] = encoder_input[b, trial.n_observed - 1]
        else:
            encoder_input[b, trial.n_observed:] = 0.0

    return TrialStack(
        targets=targets, encoder_input=encoder_input, bin_mask=bin_mask, forward_mask=forward_mask,
        neuron_order=order, n_held_in=n_in,
        trial_ids=np.array([t.trial_id for t in trials], dtype=np.int64),
        condition_ids=np.array([-1 if t.condition_id is None else t.condition_id for t in trials], dtype=np.int64),
        true_rates=true_rates, true_latents=true_latents,
        lengths=np.array([t.n_bins for t in trials], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# LGVF files
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buffer):
            raise FormatError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()


def write_trials(path: Union[str, Path], trials: Sequence[TrialBatch]) -> None:
    """Write trials (spikes, optional rates/latents/condition) to an LGVF file."""
    parts = [MAGIC, struct.pack('<II', VERSION, len(trials))]
    for trial in trials:
        flags = 0
        flags |= FLAG_RATES if trial.true_rates is not None else 0
        flags |= FLAG_LATENTS if trial.true_latents is not None else 0
        flags |= FLAG_CONDITION if trial.condition_id is not None else 0
        parts.append(struct.pack('<IIB', trial.n_bins, trial.n_neurons, flags))
        parts.append(np.ascontiguousarray(trial.spikes, dtype='<u4').tobytes())
        if trial.true_rates is not None:
            parts.append(np.ascontiguousarray(trial.true_rates, dtype='<f8').tobytes())
        if trial.true_latents is not None:
            parts.append(np.ascontiguousarray(trial.true_latents, dtype='<f8').tobytes())
        if trial.condition_id is not None:
            parts.append(struct.pack('<i', trial.condition_id))
    Path(path).write_bytes(b''.join(parts))
    logger.info(f"Wrote {len(trials)} trials to {path}")


def read_trials(path: Union[str, Path], held_in: Optional[np.ndarray] = None,
                held_out: Optional[np.ndarray] = None, n_observed: Optional[int] = None,
                trial_ids: Optional[Sequence[int]] = None) -> List[TrialBatch]:
    """
    Read an LGVF file.

    Splits are not part of the file; when omitted every neuron is held in,
    every bin is observed and trial ids are file positions.

    Raises:
        FormatError: On bad magic, unsupported version, truncation or trailing bytes
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, 'magic')
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, count = reader.unpack('<II', 'header')
    if version != VERSION:
        raise FormatError(f"unsupported LGVF version {version}", offset=4)
    if trial_ids is not None and len(trial_ids) != count:
        raise FormatError(f"{len(trial_ids)} trial ids given for {count} trials", offset=8)

    trials = []
    for index in range(count):
        bins, neurons, flags = reader.unpack('<IIB', f'trial {index} header')
        spikes = reader.array('<u4', bins * neurons, f'trial {index} spikes').reshape(bins, neurons)
        rates = latents = condition = None
        if flags & FLAG_RATES:
            rates = reader.array('<f8', bins * neurons, f'trial {index} rates').reshape(bins, neurons)
        if flags & FLAG_LATENTS:
            latents = reader.array('<f8', bins * 3, f'trial {index} latents').reshape(bins, 3)
        if flags & FLAG_CONDITION:
            condition = reader.unpack('<i', f'trial {index} condition')[0]
        trials.append(TrialBatch(
            spikes=spikes.astype(np.int64),
            held_in=np.arange(neurons) if held_in is None else held_in,
            held_out=np.zeros(0, dtype=np.int64) if held_out is None else held_out,
            n_observed=bins if n_observed is None else n_observed,
            true_rates=rates, true_latents=latents, condition_id=condition,
            trial_id=index if trial_ids is None else int(trial_ids[index]),
        ))
    if reader.offset != len(reader.buffer):
        raise FormatError("unexpected trailing bytes", offset=reader.offset)
    return trials


def save_dataset(directory: Union[str, Path], dataset: LorenzDataset) -> Path:
    """
    Write train.lgvf, val.lgvf and the YAML manifest holding config and splits.

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_trials(directory / 'train.lgvf', dataset.train)
    write_trials(directory / 'val.lgvf', dataset.val)
    manifest = {
        'format': 'LGVF',
        'version': VERSION,
        'generator': dataset.config,
        'held_in': [int(i) for i in dataset.held_in],
        'held_out': [int(i) for i in dataset.held_out],
        'n_observed': int(dataset.n_observed),
        'train_file': 'train.lgvf',
        'val_file': 'val.lgvf',
        'train_trial_ids': [int(t.trial_id) for t in dataset.train],
        'val_trial_ids': [int(t.trial_id) for t in dataset.val],
        'summary': dataset.summary(),
    }
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(dump_yaml(manifest))
    logger.info(f"Saved dataset manifest to {manifest_path}")
    return manifest_path


def load_dataset(directory: Union[str, Path]) -> LorenzDataset:
    """
    Load a dataset written by ``save_dataset``.

    Raises:
        FileNotFoundError: If the manifest is missing
        FormatError: If a trial file is malformed
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}\n"
                                f"Generate one with `langevin-flow generate --out {directory}`.")
    with open(manifest_path, 'r') as f:
        manifest = yaml.safe_load(f)
    held_in = np.array(manifest['held_in'], dtype=np.int64)
    held_out = np.array(manifest['held_out'], dtype=np.int64)
    n_observed = int(manifest['n_observed'])
    splits = {}
    for split in ('train', 'val'):
        splits[split] = read_trials(directory / manifest[f'{split}_file'], held_in, held_out, n_observed,
                                    manifest[f'{split}_trial_ids'])
    logger.info(f"Loaded dataset from {directory}: {len(splits['train'])} train / {len(splits['val'])} val trials")
    return LorenzDataset(manifest.get('generator', {}), splits['train'], splits['val'], held_in, held_out, n_observed)
