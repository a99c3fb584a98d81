"""
Training loop: Adam with global-norm clipping, KL warm-up, validation-driven
early stopping, checkpoints and the tab-separated training log.

Every random draw is keyed by counters (epoch, batch, trial id), so a run
resumed from ``checkpoint_last`` at an epoch boundary continues bit for bit.

LGVC checkpoint layout (little endian):
    b"LGVC", u32 version (1), 32-byte SHA-256 of the model config,
    u32 length + YAML config, u32 length + YAML trainer state,
    u32 count + parameter records, u32 count + first-moment records,
    u32 count + second-moment records
where a record is u16 name length, name, u8 ndim, u32 dims..., f64 data.
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .config import MODEL_SETTINGS, config_hash, dump_yaml, load_config
from .data import LorenzDataset, TrialBatch, stack_trials
from .errors import ConfigurationError, DataError, FormatError, NumericError
from .langevin import draw_noise
from .metrics import validation_scores
from .model import LangevinFlow, ModelConfig, model_card
from .seeding import substream
from .tensor import Tensor, recording

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'LGVC'
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ('epoch', 'step', 'train_loss', 'val_nll', 'val_co_bps', 'kl_weight')
LOG_NAME = 'training_log.tsv'
BEST_NAME = 'checkpoint_best.lgvc'
LAST_NAME = 'checkpoint_last.lgvc'
CARD_NAME = 'model_card.yaml'


@dataclass
class TrainConfig:
    """Optimization settings (``train`` section of model_settings.yaml)."""
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 200.0
    kl_weight_max: float = 1.0
    kl_warmup_steps: int = 1000
    patience: int = 10
    checkpoint_interval: int = 1
    max_skipped_steps: int = 10
    max_steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        for name in ('epochs', 'batch_size', 'patience', 'checkpoint_interval', 'max_skipped_steps'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0 or self.clip_norm <= 0 or self.eps <= 0:
            raise ConfigurationError("learning_rate must be non-negative, clip_norm and eps positive")
        if self.kl_weight_max < 0 or self.kl_warmup_steps < 0:
            raise ConfigurationError("kl_weight_max and kl_warmup_steps must be non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be positive, got {self.max_steps}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_settings(cls, settings: Optional[Dict[str, Any]] = None) -> 'TrainConfig':
        settings = settings if settings is not None else load_config(MODEL_SETTINGS)
        return cls.from_dict(settings.get('train', {}))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data


@dataclass
class OptimizerState:
    """Adam moments and counters."""
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 200.0
    max_skipped_steps: int = 10
    step: int = 0
    skipped: int = 0
    total_skipped: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> 'OptimizerState':
        return cls(learning_rate=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps,
                   clip_norm=cfg.clip_norm, max_skipped_steps=cfg.max_skipped_steps)

    def counters(self) -> Dict[str, int]:
        return {'step': self.step, 'skipped': self.skipped, 'total_skipped': self.total_skipped}


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], st: OptimizerState) -> Optional[float]:
    """
    Clip by global norm, then apply one bias-corrected Adam update in place.

    Args:
        params: Named parameters
        grads: Gradients by the same names (None counts as zero)
        st: Optimizer state, updated in place

    Returns:
        Norm of the applied gradient, or None if the step was skipped

    Raises:
        NumericError: After ``max_skipped_steps`` consecutive non-finite gradients
    """
    grads = {name: np.zeros_like(p.data) if grads.get(name) is None else np.asarray(grads[name])
             for name, p in params.items()}
    norm = global_norm(grads)
    if not math.isfinite(norm):
        st.skipped += 1
        st.total_skipped += 1
        logger.warning(f"Skipping optimizer step with non-finite gradient ({st.skipped} in a row)")
        if st.skipped >= st.max_skipped_steps:
            raise NumericError(f"{st.skipped} consecutive non-finite gradients", step=st.step)
        return None
    st.skipped = 0
    factor = st.clip_norm / norm if norm > st.clip_norm else 1.0
    beta1, beta2 = st.betas
    st.step += 1
    correction1 = 1.0 - beta1 ** st.step
    correction2 = 1.0 - beta2 ** st.step
    for name, p in params.items():
        g = grads[name] * factor
        m = st.m.get(name, np.zeros_like(p.data))
        v = st.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        st.m[name], st.v[name] = m, v
        p.data = p.data - st.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + st.eps)
    return norm * factor


def kl_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear KL warm-up: kl_weight_max * min(1, step / kl_warmup_steps)."""
    if step < 0:
        raise ConfigurationError(f"step must be non-negative, got {step}")
    if cfg.kl_warmup_steps == 0:
        return cfg.kl_weight_max
    return cfg.kl_weight_max * min(1.0, step / cfg.kl_warmup_steps)


@dataclass
class TrainerState:
    """Loop counters stored in checkpoints."""
    epoch: int = 0
    global_step: int = 0
    best_co_bps: float = float('-inf')
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stopped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    trainer: Dict[str, Any]
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    config_hash: bytes


@dataclass
class FitResult:
    log: List[Dict[str, float]]
    best_co_bps: float
    best_epoch: int
    stopped_early: bool
    steps: int


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack('<I', len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode('utf-8')
        value = np.asarray(value)
        parts.append(struct.pack('<H', len(encoded)) + encoded + struct.pack('<B', value.ndim))
        parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
        parts.append(np.ascontiguousarray(value, dtype='<f8').tobytes())
    return b''.join(parts)


class _Cursor:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buffer):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def arrays(self, what: str) -> Dict[str, np.ndarray]:
        (count,) = self.unpack('<I', f'{what} count')
        out = {}
        for _ in range(count):
            (length,) = self.unpack('<H', f'{what} name length')
            name = self.take(length, f'{what} name').decode('utf-8')
            (ndim,) = self.unpack('<B', f'{what} ndim')
            shape = self.unpack(f'<{ndim}I', f'{what} shape')
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(self.take(8 * size, f'{what} data'), dtype='<f8')
            out[name] = data.reshape(shape).astype(np.float64)
        return out

    def blob(self, what: str) -> str:
        (length,) = self.unpack('<I', f'{what} length')
        return self.take(length, what).decode('utf-8')


def save_checkpoint(path: Union[str, Path], model: LangevinFlow, opt: OptimizerState,
                    trainer: Optional[TrainerState] = None, train_cfg: Optional[TrainConfig] = None) -> None:
    """Write parameters, Adam moments and loop counters to an LGVC file."""
    model_dict = model.config.to_dict()
    config_text = dump_yaml({'model': model_dict, 'train': train_cfg.to_dict() if train_cfg else None})
    state = dict(trainer.to_dict() if trainer else {})
    state['optimizer'] = opt.counters()
    state_text = dump_yaml(state)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack('<I', CHECKPOINT_VERSION),
        config_hash(model_dict),
        struct.pack('<I', len(config_text.encode('utf-8'))), config_text.encode('utf-8'),
        struct.pack('<I', len(state_text.encode('utf-8'))), state_text.encode('utf-8'),
        _pack_arrays(model.state_dict()),
        _pack_arrays(opt.m),
        _pack_arrays(opt.v),
    ]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_bytes(b''.join(parts))
    tmp.replace(path)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[bytes] = None) -> Checkpoint:
    """
    Read an LGVC file.

    Args:
        path: Checkpoint path
        expected_hash: If given, the stored config hash must equal it

    Raises:
        FormatError: On bad magic, version, truncation, or a config hash mismatch
    """
    cursor = _Cursor(Path(path).read_bytes())
    magic = cursor.take(4, 'magic')
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    (version,) = cursor.unpack('<I', 'version')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    stored_hash = cursor.take(32, 'config hash')
    config = yaml.safe_load(cursor.blob('config')) or {}
    if config_hash(config.get('model') or {}) != stored_hash:
        raise FormatError("embedded config does not match its stored hash", offset=8)
    if expected_hash is not None and expected_hash != stored_hash:
        raise FormatError("checkpoint config hash does not match the model config", offset=8)
    trainer = yaml.safe_load(cursor.blob('trainer state')) or {}
    params = cursor.arrays('parameters')
    m = cursor.arrays('first moments')
    v = cursor.arrays('second moments')
    if cursor.offset != len(cursor.buffer):
        raise FormatError("unexpected trailing bytes", offset=cursor.offset)
    return Checkpoint(config, trainer, params, m, v, stored_hash)


def restore_model(checkpoint: Checkpoint) -> LangevinFlow:
    """Rebuild a model from a checkpoint's embedded config and parameters."""
    model = LangevinFlow(ModelConfig.from_dict(checkpoint.config['model']))
    model.load_state_dict(checkpoint.params)
    return model


def restore_optimizer(checkpoint: Checkpoint, cfg: TrainConfig, model: LangevinFlow) -> OptimizerState:
    opt = OptimizerState.from_config(cfg)
    counters = checkpoint.trainer.get('optimizer', {})
    opt.step = int(counters.get('step', 0))
    opt.skipped = int(counters.get('skipped', 0))
    opt.total_skipped = int(counters.get('total_skipped', 0))
    dtypes = {name: p.data.dtype for name, p in model.named_parameters().items()}
    opt.m = {name: value.astype(dtypes[name]) for name, value in checkpoint.m.items()}
    opt.v = {name: value.astype(dtypes[name]) for name, value in checkpoint.v.items()}
    return opt


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

def _format_row(row: Dict[str, float]) -> str:
    return '\t'.join(str(row[c]) if isinstance(row[c], int) else f"{row[c]:.17g}" for c in LOG_COLUMNS)


def read_training_log(path: Union[str, Path]) -> List[Dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        values = line.split('\t')
        row = {c: float(v) for c, v in zip(LOG_COLUMNS, values)}
        row['epoch'], row['step'] = int(row['epoch']), int(row['step'])
        rows.append(row)
    return rows


def _prepare_log(path: Path, start_epoch: int) -> None:
    """Create the log, or drop rows from epochs at or after ``start_epoch`` when resuming."""
    if start_epoch == 0 or not path.exists():
        path.write_text('\t'.join(LOG_COLUMNS) + '\n')
        return
    kept = [row for row in read_training_log(path) if row['epoch'] < start_epoch]
    path.write_text('\t'.join(LOG_COLUMNS) + '\n' + ''.join(_format_row(r) + '\n' for r in kept))


def _append_log(path: Path, row: Dict[str, float]) -> None:
    with open(path, 'a') as f:
        f.write(_format_row(row) + '\n')


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def train_step(model: LangevinFlow, trials: Sequence[TrialBatch], opt: OptimizerState, kl_weight: float,
               seed: int, epoch: int, batch_index: int, global_step: int) -> float:
    """
    One optimizer step on a batch.

    Raises:
        NumericError: If the loss is not finite
    """
    cfg = model.config
    stack = stack_trials(trials, cfg.forward_input)
    noise = draw_noise(seed, stack.trial_ids, stack.n_bins - 1, cfg.latent_dim, epoch=epoch,
                       with_velocity=cfg.with_velocity) if cfg.uses_latents else None
    dropout_rng = substream(seed, 'dropout', epoch, batch_index)
    model.zero_grad()
    with recording() as tape:
        output = model.forward(stack, train_mode=True, noise=noise, dropout_rng=dropout_rng)
        loss = model.loss(output, stack, kl_weight)
        value = loss.item()
        if not math.isfinite(value):
            logger.error(f"Non-finite loss in epoch {epoch}, batch {batch_index}; "
                         f"trial ids {stack.trial_ids.tolist()}")
            raise NumericError(f"non-finite loss in epoch {epoch} batch {batch_index}", step=global_step)
        tape.backward(loss)
    params = model.named_parameters()
    adam_step(params, {name: p.grad for name, p in params.items()}, opt)
    return value


def fit(model: LangevinFlow, dataset: LorenzDataset, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
        resume_from: Optional[Union[str, Path]] = None) -> FitResult:
    """
    Train ``model`` on ``dataset.train`` with early stopping on validation co-bps.

    Args:
        model: Model to optimize in place
        dataset: Train and validation trials
        cfg: Optimization settings
        out_dir: Directory for checkpoints, the training log and the model card
        resume_from: Checkpoint to continue from (must match the model config)

    Returns:
        FitResult with the logged rows and the best validation co-bps
    """
    if not dataset.train:
        raise DataError("training set is empty")
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    opt = OptimizerState.from_config(cfg)
    state = TrainerState()
    log: List[Dict[str, float]] = []

    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from, expected_hash=config_hash(model.config.to_dict()))
        model.load_state_dict(checkpoint.params)
        opt = restore_optimizer(checkpoint, cfg, model)
        known = {k: v for k, v in checkpoint.trainer.items() if k in TrainerState.__dataclass_fields__}
        state = TrainerState(**known)
        logger.info(f"Resuming from {resume_from} at epoch {state.epoch}, step {state.global_step}")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / CARD_NAME).write_text(dump_yaml({**model_card(model), 'train': cfg.to_dict()}))
        _prepare_log(out / LOG_NAME, state.epoch)
        if state.epoch > 0:
            log = read_training_log(out / LOG_NAME)

    n_train = len(dataset.train)
    while state.epoch < cfg.epochs and not state.stopped:
        epoch = state.epoch
        order = substream(cfg.seed, 'shuffle', epoch).permutation(n_train)
        losses = []
        kl_weight = kl_schedule(state.global_step, cfg)
        for batch_index, start in enumerate(range(0, n_train, cfg.batch_size)):
            if cfg.max_steps is not None and state.global_step >= cfg.max_steps:
                break
            trials = [dataset.train[i] for i in order[start:start + cfg.batch_size]]
            kl_weight = kl_schedule(state.global_step, cfg)
            losses.append(train_step(model, trials, opt, kl_weight, cfg.seed, epoch, batch_index, state.global_step))
            state.global_step += 1

        val_nll, co_bps = validation_scores(model, dataset.val) if dataset.val else (float('nan'), float('nan'))
        row = {
            'epoch': epoch,
            'step': state.global_step,
            'train_loss': float(np.mean(losses)) if losses else float('nan'),
            'val_nll': val_nll,
            'val_co_bps': co_bps,
            'kl_weight': kl_weight,
        }
        log.append(row)
        logger.info(f"Epoch {epoch}: train loss {row['train_loss']:.4f}, val NLL {val_nll:.4f}, "
                    f"val co-bps {co_bps:.4f}, KL weight {kl_weight:.3f}")

        improved = math.isfinite(co_bps) and co_bps > state.best_co_bps
        if improved:
            state.best_co_bps, state.best_epoch, state.epochs_since_improvement = co_bps, epoch, 0
        else:
            state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= cfg.patience:
            state.stopped = True
            logger.info(f"Early stopping after epoch {epoch} (best co-bps {state.best_co_bps:.4f} "
                        f"at epoch {state.best_epoch})")
        if cfg.max_steps is not None and state.global_step >= cfg.max_steps:
            state.stopped = True
        state.epoch = epoch + 1

        if out is not None:
            _append_log(out / LOG_NAME, row)
            if improved:
                save_checkpoint(out / BEST_NAME, model, opt, state, cfg)
            if state.epoch % cfg.checkpoint_interval == 0 or state.stopped or state.epoch >= cfg.epochs:
                save_checkpoint(out / LAST_NAME, model, opt, state, cfg)

    return FitResult(log, state.best_co_bps, state.best_epoch,
                     stopped_early=state.stopped and state.epoch < cfg.epochs, steps=state.global_step)
