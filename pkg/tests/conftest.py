"""
Shared fixtures: float64 tensors, finite differences and a toy dataset small
enough for exhaustive gradient checks.
"""

import numpy as np
import pytest

from langevin_flow.data import LorenzConfig, LorenzDataset, TrialBatch
from langevin_flow.langevin import LangevinParams
from langevin_flow.model import ModelConfig
from langevin_flow.tensor import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def float64_tensors():
    previous = get_default_dtype()
    set_default_dtype('float64')
    yield
    set_default_dtype(previous)


def numeric_gradient(f, array, eps=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = f()
        array[index] = original - eps
        minus = f()
        array[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-10:
        return diff
    return diff / scale


def make_trials(n_trials=4, n_bins=4, n_neurons=4, held_out=(3,), n_observed=3, seed=0, with_truth=True,
                trials_per_condition=2):
    """Random Poisson trials sharing one neuron split."""
    rng = np.random.default_rng(seed)
    held_out = np.array(held_out, dtype=np.int64)
    held_in = np.array([n for n in range(n_neurons) if n not in set(held_out)], dtype=np.int64)
    trials = []
    for trial_id in range(n_trials):
        condition = trial_id // trials_per_condition
        rates = np.exp(rng.normal(0.0, 0.5, size=(n_bins, n_neurons)))
        spikes = rng.poisson(rates)
        trials.append(TrialBatch(
            spikes=spikes, held_in=held_in, held_out=held_out, n_observed=n_observed,
            true_rates=rates if with_truth else None,
            true_latents=rng.normal(size=(n_bins, 3)) if with_truth else None,
            condition_id=condition, trial_id=trial_id,
        ))
    return trials


@pytest.fixture
def toy_trials():
    return make_trials()


@pytest.fixture
def toy_config():
    return ModelConfig(n_neurons=4, n_held_in=3, latent_dim=4, hidden_dim=6, model_dim=8, heads=4, groups=2,
                       kernel_size=3, max_len=16, coordinated_dropout_rate=0.25, seed=3,
                       langevin=LangevinParams(gamma=0.7, dt=0.5))


@pytest.fixture
def toy_dataset():
    trials = make_trials(n_trials=8, n_bins=5, n_observed=4, seed=1)
    for trial in trials:
        trial.spikes[0, 3] += 1
    return LorenzDataset(config={}, train=trials[:6], val=trials[6:], held_in=trials[0].held_in,
                         held_out=trials[0].held_out, n_observed=4)


@pytest.fixture
def small_lorenz():
    return LorenzConfig(n_trials=20, trials_per_condition=5, n_bins=12, n_neurons=8, burn_in=50,
                        steps_per_bin=2, val_fraction=0.25, seed=7)
