"""
Figures for trained models: predicted vs true rates with spike rasters, and
the latent wave raster of each convolution group.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import TrialBatch  # noqa: E402
from .errors import DataError  # noqa: E402

logger = logging.getLogger(__name__)


def plot_rates(rates: Sequence[np.ndarray], trials: Sequence[TrialBatch], path: Union[str, Path],
               neurons: Optional[Sequence[int]] = None, condition: Optional[int] = None,
               figure_size=(10, 6)) -> Path:
    """
    Condition-averaged predicted rates against ground truth, above a spike raster.

    Args:
        rates: Predicted (bins, neurons) rates per trial
        trials: The matching trials
        path: Output image path
        neurons: Neurons to show (default: the first four)
        condition: Condition to average over (default: that of the first trial)
        figure_size: Matplotlib figure size in inches
    """
    condition = trials[0].condition_id if condition is None else condition
    members = [i for i, t in enumerate(trials) if t.condition_id == condition]
    if not members:
        raise DataError(f"no trials with condition {condition}")
    neurons = list(range(min(4, trials[0].n_neurons))) if neurons is None else list(neurons)
    held_out = set(int(n) for n in trials[0].held_out)

    fig, axes = plt.subplots(2, len(neurons), figsize=figure_size, sharex=True, squeeze=False)
    for column, neuron in enumerate(neurons):
        ax = axes[0, column]
        mean_pred = np.mean([rates[i][:, neuron] for i in members], axis=0)
        ax.plot(mean_pred, color='tab:blue', label='predicted')
        if trials[members[0]].true_rates is not None:
            ax.plot(trials[members[0]].true_rates[:, neuron], color='black', linestyle='--', label='true')
        n_observed = trials[members[0]].n_observed
        if n_observed < trials[members[0]].n_bins:
            ax.axvspan(n_observed - 0.5, trials[members[0]].n_bins - 0.5, color='grey', alpha=0.15)
        ax.set_title(f"neuron {neuron}{' (held out)' if neuron in held_out else ''}", fontsize=9)
        if column == 0:
            ax.set_ylabel('rate (spikes/bin)')
            ax.legend(fontsize=7)

        raster = axes[1, column]
        for row, index in enumerate(members):
            bins = np.nonzero(trials[index].spikes[:, neuron])[0]
            raster.plot(bins, np.full(len(bins), row), '|', color='black', markersize=4)
        raster.set_xlabel('bin')
        if column == 0:
            raster.set_ylabel('trial')

    fig.suptitle(f"Condition {condition}: {len(members)} trials")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved rate figure to {path}")
    return path


def plot_latent_waves(zs: np.ndarray, groups: int, path: Union[str, Path], figure_size=(10, 3)) -> Path:
    """
    Heatmap of latent positions (time x within-group index), one panel per group.

    Args:
        zs: (bins, d) latent trajectory of one trial
        groups: Number of convolution groups of the potential
        path: Output image path
    """
    zs = np.asarray(zs)
    if zs.ndim != 2 or zs.shape[1] % groups != 0:
        raise DataError(f"latents of shape {zs.shape} cannot be split into {groups} groups")
    size = zs.shape[1] // groups
    limit = float(np.max(np.abs(zs))) or 1.0
    fig, axes = plt.subplots(1, groups, figsize=figure_size, sharey=True, squeeze=False)
    for g in range(groups):
        ax = axes[0, g]
        image = ax.imshow(zs[:, g * size:(g + 1) * size].T, aspect='auto', origin='lower',
                          cmap='RdBu_r', vmin=-limit, vmax=limit)
        ax.set_title(f"group {g}", fontsize=9)
        ax.set_xlabel('bin')
        if g == 0:
            ax.set_ylabel('latent index')
    fig.colorbar(image, ax=axes.ravel().tolist(), shrink=0.8)
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved latent wave figure to {path}")
    return path
