import math
import struct

import numpy as np
import pytest

from conftest import make_trials
from langevin_flow.data import (MAGIC, MANIFEST_NAME, LorenzConfig, TrialBatch, load_dataset, lorenz_derivative,
                                lorenz_trajectory, make_dataset, neuron_split, project_to_rates, read_trials,
                                sample_spikes, save_dataset, stack_trials, write_trials)
from langevin_flow.errors import ConfigurationError, DataError, FormatError, NumericError


class TestLorenzSystem:

    def setup_method(self):
        self.cfg = LorenzConfig(n_trials=10, n_bins=20, burn_in=10)

    def test_fixed_points(self):
        sigma, rho, beta = 10.0, 28.0, 8.0 / 3.0
        c = math.sqrt(beta * (rho - 1))
        for point in ([0.0, 0.0, 0.0], [c, c, rho - 1], [-c, -c, rho - 1]):
            assert np.allclose(lorenz_derivative(np.array(point), sigma, rho, beta), 0.0, atol=1e-12)

    def test_fixed_point_is_stationary_under_rk4(self):
        c = math.sqrt(8.0 / 3.0 * 27.0)
        trajectory = lorenz_trajectory(self.cfg, np.array([c, c, 27.0]))
        assert trajectory.shape == (20, 3)
        assert np.allclose(trajectory, [c, c, 27.0], atol=1e-9)

    def test_vectorized_over_starts(self):
        starts = np.array([[1.0, 1.0, 20.0], [-5.0, 3.0, 30.0]])
        together = lorenz_trajectory(self.cfg, starts)
        assert together.shape == (2, 20, 3)
        assert np.allclose(together[1], lorenz_trajectory(self.cfg, starts[1]))

    def test_steps_per_bin_subsamples(self):
        fine = LorenzConfig(n_trials=10, n_bins=10, burn_in=0, steps_per_bin=1)
        coarse = LorenzConfig(n_trials=10, n_bins=5, burn_in=0, steps_per_bin=2)
        start = np.array([1.0, 2.0, 20.0])
        assert np.allclose(lorenz_trajectory(coarse, start), lorenz_trajectory(fine, start)[::2])

    def test_divergence_raises(self):
        with pytest.raises(NumericError):
            lorenz_trajectory(self.cfg, np.array([1e5, 1e5, 1e5]))
        with pytest.raises(NumericError):
            lorenz_trajectory(self.cfg, np.array([np.nan, 0.0, 0.0]))


class TestRatesAndSpikes:

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_mean_rate_matches_scale(self):
        states = self.rng.normal(size=(4, 30, 3)) * 10
        rates = project_to_rates(states, 12, 0.3, np.random.default_rng(1))
        assert rates.shape == (4, 30, 12)
        assert np.all(rates > 0)
        assert np.allclose(rates.reshape(-1, 12).mean(axis=0), 0.3)

    def test_spikes_need_positive_rates(self):
        with pytest.raises(DataError):
            sample_spikes(np.array([1.0, 0.0]), self.rng)
        counts = sample_spikes(np.full((100, 3), 2.0), self.rng)
        assert counts.dtype == np.int64
        assert abs(counts.mean() - 2.0) < 0.3

    def test_neuron_split_partitions(self):
        held_in, held_out = neuron_split(29, 0.25, self.rng)
        assert len(held_out) == 7
        assert sorted(np.concatenate([held_in, held_out]).tolist()) == list(range(29))


class TestLorenzConfig:

    def test_packaged_defaults(self):
        cfg = LorenzConfig.from_settings()
        assert cfg.n_trials == 1300
        assert cfg.n_conditions == 65
        assert cfg.n_neurons == 29

    def test_overrides(self):
        cfg = LorenzConfig.from_settings(overrides={'n_trials': 40, 'seed': None})
        assert cfg.n_trials == 40
        assert cfg.seed == 0

    @pytest.mark.parametrize('changes', [{'dt_ode': 0.0}, {'n_neurons': 2}, {'rate_scale': 0.0},
                                         {'held_out_fraction': 1.0}, {'val_fraction': 0.01, 'n_trials': 10}])
    def test_invalid_values(self, changes):
        with pytest.raises(ConfigurationError):
            LorenzConfig(**changes)


class TestMakeDataset:

    def test_sizes_and_splits(self, small_lorenz):
        dataset = make_dataset(small_lorenz)
        assert len(dataset.train) == 15
        assert len(dataset.val) == 5
        assert len(dataset.held_out) == 2
        assert dataset.n_observed == 9
        assert sorted(t.trial_id for t in dataset.train + dataset.val) == list(range(20))

    def test_regeneration_is_identical(self, small_lorenz):
        first, second = make_dataset(small_lorenz), make_dataset(small_lorenz)
        for a, b in zip(first.train + first.val, second.train + second.val):
            assert np.array_equal(a.spikes, b.spikes)
            assert np.array_equal(a.true_rates, b.true_rates)

    def test_seed_changes_data(self, small_lorenz):
        other = LorenzConfig(**{**small_lorenz.to_dict(), 'seed': 8})
        a = make_dataset(small_lorenz).train[0].spikes
        b = make_dataset(other).train[0].spikes
        assert not np.array_equal(a, b)

    def test_conditions_share_rates(self, small_lorenz):
        dataset = make_dataset(small_lorenz)
        trials = sorted(dataset.train + dataset.val, key=lambda t: t.trial_id)
        assert trials[0].condition_id == trials[4].condition_id == 0
        assert trials[5].condition_id == 1
        assert np.array_equal(trials[0].true_rates, trials[4].true_rates)

    def test_summary(self, small_lorenz):
        summary = make_dataset(small_lorenz).summary()
        assert summary['n_train'] == 15
        assert summary['n_neurons'] == 8
        assert summary['n_bins'] == 12


class TestTrialBatch:

    def test_rejects_negative_counts(self):
        with pytest.raises(DataError):
            TrialBatch(spikes=np.array([[1, -1]]), held_in=[0], held_out=[1], n_observed=1)

    def test_rejects_fractional_counts(self):
        with pytest.raises(DataError):
            TrialBatch(spikes=np.array([[1.5, 0.0]]), held_in=[0], held_out=[1], n_observed=1)

    def test_split_must_partition_neurons(self):
        with pytest.raises(DataError):
            TrialBatch(spikes=np.zeros((2, 3)), held_in=[0], held_out=[1], n_observed=1)

    def test_observed_bins_in_range(self):
        with pytest.raises(DataError):
            TrialBatch(spikes=np.zeros((2, 2)), held_in=[0], held_out=[1], n_observed=3)

    def test_forward_window(self):
        trial = TrialBatch(spikes=np.zeros((5, 2)), held_in=[0], held_out=[1], n_observed=3)
        assert trial.n_forward == 2


class TestStacking:

    def setup_method(self):
        self.trials = make_trials(n_trials=2, n_bins=4, held_out=(1,), n_observed=3)
        self.short = make_trials(n_trials=1, n_bins=2, held_out=(1,), n_observed=2, seed=3)[0]

    def test_neuron_order_and_padding(self):
        stack = stack_trials([self.trials[0], self.short])
        assert list(stack.neuron_order) == [0, 2, 3, 1]
        assert stack.targets.shape == (2, 4, 4)
        assert np.array_equal(stack.targets[0], self.trials[0].spikes[:, [0, 2, 3, 1]])
        assert stack.bin_mask[1].tolist() == [True, True, False, False]
        assert stack.forward_mask[0].tolist() == [False, False, False, True]
        assert not stack.forward_mask[1].any()
        assert list(stack.lengths) == [4, 2]

    def test_forward_bins_blank_encoder_input(self):
        stack = stack_trials(self.trials)
        assert np.all(stack.encoder_input[:, 3] == 0)
        assert np.array_equal(stack.encoder_input[0, :3], self.trials[0].spikes[:3][:, [0, 2, 3]])

    def test_training_trials_share_the_forward_window(self, small_lorenz):
        dataset = make_dataset(small_lorenz)
        assert dataset.n_observed == 9
        assert all(trial.n_observed == 9 for trial in dataset.train)
        stack = stack_trials(dataset.train)
        assert np.all(stack.encoder_input[:, 9:] == 0)
        assert stack.forward_mask[:, 9:].all()

    def test_hold_repeats_last_observed_bin(self):
        stack = stack_trials(self.trials, forward_input='hold')
        assert np.array_equal(stack.encoder_input[:, 3], stack.encoder_input[:, 2])

    def test_mismatched_split_rejected(self):
        other = make_trials(n_trials=1, n_bins=4, held_out=(2,))[0]
        with pytest.raises(DataError):
            stack_trials([self.trials[0], other])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            stack_trials([])


class TestTrialFiles:

    def setup_method(self):
        self.trials = make_trials(n_trials=3, n_bins=4)
        self.trials[1].true_latents = None
        self.trials[2].condition_id = None

    def test_round_trip(self, tmp_path):
        path = tmp_path / 'trials.lgvf'
        write_trials(path, self.trials)
        loaded = read_trials(path, self.trials[0].held_in, self.trials[0].held_out, 3, [0, 1, 2])
        for original, restored in zip(self.trials, loaded):
            assert np.array_equal(original.spikes, restored.spikes)
            assert np.array_equal(original.true_rates, restored.true_rates)
            assert original.condition_id == restored.condition_id
        assert loaded[1].true_latents is None
        assert np.array_equal(loaded[0].true_latents, self.trials[0].true_latents)

    def test_defaults_without_split(self, tmp_path):
        path = tmp_path / 'trials.lgvf'
        write_trials(path, self.trials)
        loaded = read_trials(path)
        assert len(loaded[0].held_in) == 4
        assert loaded[0].n_observed == 4
        assert [t.trial_id for t in loaded] == [0, 1, 2]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.lgvf'
        path.write_bytes(b'NOPE' + struct.pack('<II', 1, 0))
        with pytest.raises(FormatError) as info:
            read_trials(path)
        assert info.value.offset == 0

    def test_bad_version(self, tmp_path):
        path = tmp_path / 'bad.lgvf'
        path.write_bytes(MAGIC + struct.pack('<II', 2, 0))
        with pytest.raises(FormatError) as info:
            read_trials(path)
        assert info.value.offset == 4

    def test_truncated(self, tmp_path):
        path = tmp_path / 'trials.lgvf'
        write_trials(path, self.trials)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_trials(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / 'trials.lgvf'
        write_trials(path, self.trials)
        path.write_bytes(path.read_bytes() + b'\x00')
        with pytest.raises(FormatError):
            read_trials(path)


class TestDatasetDirectory:

    def test_save_and_load(self, tmp_path, small_lorenz):
        dataset = make_dataset(small_lorenz)
        manifest = save_dataset(tmp_path / 'lorenz', dataset)
        assert manifest.name == MANIFEST_NAME
        loaded = load_dataset(tmp_path / 'lorenz')
        assert [t.trial_id for t in loaded.val] == [t.trial_id for t in dataset.val]
        assert np.array_equal(loaded.held_out, dataset.held_out)
        assert loaded.n_observed == dataset.n_observed
        assert np.array_equal(loaded.train[3].spikes, dataset.train[3].spikes)
        assert loaded.config['seed'] == small_lorenz.seed

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
