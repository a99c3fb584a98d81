"""
Evaluation metrics: bits per spike (co-smoothing and forward prediction),
rate R2, PSTH R2 and ridge-decoding R2, plus the report files.

Bits per spike compare a model's Poisson likelihood against a null model that
predicts each neuron's mean count over the evaluated bins. Undefined metrics
are reported as NaN with a warning instead of raising.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln, xlogy

from .data import TrialBatch
from .errors import DimensionError, FormatError
from .model import LangevinFlow, predict_rates

logger = logging.getLogger(__name__)

NULL_MODEL = 'per-neuron mean count over the evaluated bins'
DEFAULT_RIDGE_ALPHA = 1.0


@dataclass
class EvalReport:
    """Summary metrics of one evaluation; NaN marks an undefined metric."""
    co_bps: float
    fp_bps: float
    rate_r2: float
    psth_r2: float
    decode_r2: float
    val_nll: float
    n_trials: int
    per_neuron: Dict[str, List[float]] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        data = asdict(self)
        data.pop('per_neuron')
        return data


def poisson_nll_array(rates: np.ndarray, spikes: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Summed Poisson NLL on plain arrays (0 ln 0 taken as 0)."""
    rates = np.asarray(rates, dtype=np.float64)
    spikes = np.asarray(spikes, dtype=np.float64)
    per_entry = rates - xlogy(spikes, rates) + gammaln(spikes + 1.0)
    if mask is not None:
        per_entry = np.where(mask, per_entry, 0.0)
    return float(per_entry.sum())


def bits_per_spike(rates: np.ndarray, spikes: np.ndarray, scope: Optional[np.ndarray] = None) -> float:
    """
    Likelihood gain over the mean-rate null model, in bits per spike.

    Args:
        rates: (samples, neurons) predicted rates
        spikes: (samples, neurons) observed counts
        scope: Optional bool mask of the entries to score

    Returns:
        (NLL_null - NLL_model) / (spikes in scope * ln 2), NaN if the scope holds no spikes
    """
    rates = np.asarray(rates, dtype=np.float64)
    spikes = np.asarray(spikes, dtype=np.float64)
    if rates.shape != spikes.shape or rates.ndim != 2:
        raise DimensionError(f"rates {rates.shape} and spikes {spikes.shape} must be equal 2-d arrays")
    scope = np.ones(spikes.shape, dtype=bool) if scope is None else np.asarray(scope, dtype=bool)
    total = float(spikes[scope].sum())
    if total <= 0:
        logger.warning("bits per spike undefined: no spikes in the evaluated scope")
        return float('nan')
    counts = scope.sum(axis=0)
    null_mean = np.where(scope, spikes, 0.0).sum(axis=0) / np.maximum(counts, 1)
    null_rates = np.broadcast_to(null_mean, spikes.shape)
    nll_null = poisson_nll_array(null_rates, spikes, scope)
    nll_model = poisson_nll_array(rates, spikes, scope)
    return (nll_null - nll_model) / (total * math.log(2.0))


def _stack_rows(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)


def _observed_rows(trials: Sequence[TrialBatch]) -> np.ndarray:
    return np.concatenate([np.arange(t.n_bins) < t.n_observed for t in trials])


def co_bps_from_rates(rates: Sequence[np.ndarray], trials: Sequence[TrialBatch]) -> float:
    """Bits per spike on held-out neurons over observed bins."""
    held_out = trials[0].held_out
    if len(held_out) == 0:
        logger.warning("co-smoothing undefined: no held-out neurons")
        return float('nan')
    observed = _observed_rows(trials)
    pred = _stack_rows(rates)[observed][:, held_out]
    spikes = _stack_rows([t.spikes for t in trials])[observed][:, held_out]
    return bits_per_spike(pred, spikes)


def co_bps_per_neuron(rates: Sequence[np.ndarray], trials: Sequence[TrialBatch]) -> List[float]:
    observed = _observed_rows(trials)
    pred = _stack_rows(rates)[observed]
    spikes = _stack_rows([t.spikes for t in trials])[observed]
    return [bits_per_spike(pred[:, [n]], spikes[:, [n]]) for n in trials[0].held_out]


def fp_bps_from_rates(rates: Sequence[np.ndarray], trials: Sequence[TrialBatch]) -> float:
    """Bits per spike on every neuron over the forward-window bins."""
    forward = ~_observed_rows(trials)
    if not forward.any():
        logger.warning("forward prediction undefined: empty forward window")
        return float('nan')
    pred = _stack_rows(rates)[forward]
    spikes = _stack_rows([t.spikes for t in trials])[forward]
    return bits_per_spike(pred, spikes)


def co_smoothing(model: LangevinFlow, trials: Sequence[TrialBatch], threads: Optional[int] = None) -> float:
    """Model co-bps: encoder sees held-in spikes only, scored on held-out neurons."""
    return co_bps_from_rates(predict_rates(model, trials, threads=threads), trials)


def forward_prediction(model: LangevinFlow, trials: Sequence[TrialBatch], threads: Optional[int] = None) -> float:
    """
    Model fp-bps.

    The encoder input is blank (or held) on the forward bins, so the latents
    continue under the Langevin rollout alone there.
    """
    return fp_bps_from_rates(predict_rates(model, trials, threads=threads), trials)


def r2_per_column(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-column R2; NaN for columns whose target is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    if target.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    ss_res = ((target - pred) ** 2).sum(axis=0)
    ss_tot = ((target - target.mean(axis=0)) ** 2).sum(axis=0)
    valid = ss_tot > 0
    out = np.full(target.shape[1], np.nan)
    out[valid] = 1.0 - ss_res[valid] / ss_tot[valid]
    return out


def r2(pred: np.ndarray, target: np.ndarray) -> float:
    """
    Coefficient of determination averaged over columns with varying targets.

    Returns NaN (with a warning) when every target column is constant.
    """
    scores = r2_per_column(pred, target)
    if np.all(np.isnan(scores)):
        logger.warning("R2 undefined: every target column is constant")
        return float('nan')
    return float(np.nanmean(scores))


def psth_r2(rates_by_trial: Sequence[np.ndarray], condition_ids: Sequence[Optional[int]],
            true_rates_by_trial: Sequence[np.ndarray]) -> float:
    """
    R2 between condition-averaged predicted and true rates.

    Conditions with fewer than two trials are excluded; the condition x time
    rows are stacked and R2 is taken per neuron.
    """
    groups: Dict[int, List[int]] = {}
    for index, condition in enumerate(condition_ids):
        if condition is not None and condition >= 0:
            groups.setdefault(int(condition), []).append(index)
    usable = sorted(c for c, members in groups.items() if len(members) >= 2)
    if not usable:
        logger.warning("PSTH R2 undefined: no condition has two or more trials")
        return float('nan')
    pred_rows, true_rows = [], []
    for condition in usable:
        members = groups[condition]
        pred_rows.append(np.mean([rates_by_trial[i] for i in members], axis=0))
        true_rows.append(np.mean([true_rates_by_trial[i] for i in members], axis=0))
    return r2(np.concatenate(pred_rows), np.concatenate(true_rows))


@dataclass
class RidgeModel:
    coef: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        return ((np.asarray(features) - self.mean) / self.scale) @ self.coef + self.intercept


def ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float = DEFAULT_RIDGE_ALPHA,
              standardize: bool = True) -> RidgeModel:
    """
    Closed-form ridge regression with an unpenalized intercept.

    Solves (X^T X + alpha I) w = X^T (y - mean y) on centred (and, by default,
    standardized) features.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    mean = x.mean(axis=0)
    scale = x.std(axis=0) if standardize else np.ones(x.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    xs = (x - mean) / scale
    y_mean = y.mean(axis=0)
    gram = xs.T @ xs + alpha * np.eye(x.shape[1])
    coef = np.linalg.solve(gram, xs.T @ (y - y_mean))
    return RidgeModel(coef, y_mean, mean, scale)


def ridge_decode_r2(rates_by_trial: Sequence[np.ndarray], behavior_by_trial: Sequence[np.ndarray],
                    alpha: float = DEFAULT_RIDGE_ALPHA, train_fraction: float = 0.5) -> float:
    """
    Decode behaviour linearly from rates: fit on the first trials, R2 on the rest.

    Args:
        rates_by_trial: (bins, neurons) predicted rates per trial
        behavior_by_trial: (bins, b) targets per trial (true Lorenz states for synthetic data)
        alpha: Ridge penalty
        train_fraction: Share of trials used for fitting
    """
    n_train = int(math.floor(len(rates_by_trial) * train_fraction))
    if n_train < 1 or n_train >= len(rates_by_trial):
        logger.warning("ridge decoding undefined: need at least one train and one test trial")
        return float('nan')
    model = ridge_fit(_stack_rows(rates_by_trial[:n_train]), _stack_rows(behavior_by_trial[:n_train]), alpha)
    test_x = _stack_rows(rates_by_trial[n_train:])
    test_y = _stack_rows(behavior_by_trial[n_train:])
    return r2(model.predict(test_x), test_y)


def evaluate_rates(rates: Sequence[np.ndarray], trials: Sequence[TrialBatch],
                   ridge_alpha: float = DEFAULT_RIDGE_ALPHA) -> EvalReport:
    """Compute every metric from given per-trial rates (model or oracle)."""
    val_nll = float(np.mean([poisson_nll_array(r, t.spikes) for r, t in zip(rates, trials)]))
    has_truth = all(t.true_rates is not None for t in trials)
    rate_r2 = psth = float('nan')
    per_neuron = {'co_bps': co_bps_per_neuron(rates, trials)}
    if has_truth:
        truth = [t.true_rates for t in trials]
        per_column = r2_per_column(_stack_rows(rates), _stack_rows(truth))
        rate_r2 = r2(_stack_rows(rates), _stack_rows(truth))
        per_neuron['rate_r2'] = [float(v) for v in per_column]
        psth = psth_r2(rates, [t.condition_id for t in trials], truth)
    decode = float('nan')
    if all(t.true_latents is not None for t in trials):
        decode = ridge_decode_r2(rates, [t.true_latents for t in trials], ridge_alpha)
    return EvalReport(
        co_bps=co_bps_from_rates(rates, trials),
        fp_bps=fp_bps_from_rates(rates, trials),
        rate_r2=rate_r2, psth_r2=psth, decode_r2=decode, val_nll=val_nll,
        n_trials=len(trials), per_neuron=per_neuron,
    )


def evaluate(model: LangevinFlow, trials: Sequence[TrialBatch], ridge_alpha: float = DEFAULT_RIDGE_ALPHA,
             threads: Optional[int] = None) -> EvalReport:
    """Full evaluation of a model in eval mode."""
    report = evaluate_rates(predict_rates(model, trials, threads=threads), trials, ridge_alpha)
    logger.info(f"Evaluation on {len(trials)} trials: co-bps {report.co_bps:.4f}, fp-bps {report.fp_bps:.4f}, "
                f"rate R2 {report.rate_r2:.4f}")
    return report


def validation_scores(model: LangevinFlow, trials: Sequence[TrialBatch]) -> Tuple[float, float]:
    """(mean per-trial Poisson NLL, co-bps) used for early stopping."""
    rates = predict_rates(model, trials)
    val_nll = float(np.mean([poisson_nll_array(r, t.spikes) for r, t in zip(rates, trials)]))
    return val_nll, co_bps_from_rates(rates, trials)


def write_report(path: Union[str, Path], report: EvalReport) -> Path:
    """
    Write ``key = value`` lines plus a per-neuron TSV next to them.

    Returns:
        Path of the per-neuron table
    """
    path = Path(path)
    lines = [f"# null model: {NULL_MODEL}"]
    for key, value in report.scalars().items():
        lines.append(f"{key} = {value:.17g}" if isinstance(value, float) else f"{key} = {value}")
    path.write_text('\n'.join(lines) + '\n')

    table = path.with_name(path.stem + '_neurons.tsv')
    columns = sorted(report.per_neuron)
    rows = ['\t'.join(['index'] + columns)]
    width = max((len(v) for v in report.per_neuron.values()), default=0)
    for i in range(width):
        values = [report.per_neuron[c][i] if i < len(report.per_neuron[c]) else float('nan') for c in columns]
        rows.append('\t'.join([str(i)] + [f"{v:.17g}" for v in values]))
    table.write_text('\n'.join(rows) + '\n')
    logger.info(f"Wrote evaluation report to {path}")
    return table


def read_report(path: Union[str, Path]) -> Dict[str, float]:
    """
    Parse a report written by ``write_report``.

    Raises:
        FormatError: On a line that is not ``key = value``
    """
    values: Dict[str, float] = {}
    offset = 0
    for line in Path(path).read_text().splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith('#'):
            key, sep, value = stripped.partition(' = ')
            if not sep:
                raise FormatError(f"malformed report line '{stripped}'", offset=offset)
            values[key] = float(value)
        offset += len(line.encode('utf-8'))
    return values
