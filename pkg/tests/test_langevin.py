import math

import numpy as np
import pytest

from langevin_flow.errors import ConfigurationError, ContractError, DimensionError, DomainError, NumericError
from langevin_flow.langevin import (LangevinParams, LangevinState, deterministic_step, draw_noise,
                                    first_order_rollout, first_order_step, gaussian_kl, hamiltonian,
                                    kl_velocity_step, ou_step, rollout)
from langevin_flow.potential import OscillatorPotential
from langevin_flow.tensor import Tensor, no_grad, recording


def make_potential(kernel_half, latent_dim, kernel_size=3):
    kernel_half = np.asarray(kernel_half, dtype=float)
    potential = OscillatorPotential(latent_dim, groups=kernel_half.shape[0], kernel_size=kernel_size,
                                    rng=np.random.default_rng(0))
    potential.kernel_half.data = kernel_half.copy()
    return potential


def unit_impulse(latent_dim=2):
    """U(z) = |z|^2 and grad U = 2 z."""
    return make_potential([[0.0, 1.0]], latent_dim)


class TestParams:

    def test_defaults(self):
        params = LangevinParams()
        assert params.gamma == 0.7
        assert math.isclose(params.posterior_variance, 1.4)
        assert math.isclose(params.noise_scale, math.sqrt(1.4))

    @pytest.mark.parametrize('kwargs', [{'gamma': 1.5}, {'gamma': -0.1}, {'dt': 0.0}, {'mass': -1.0},
                                        {'integrator': 'rk4'}])
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            LangevinParams(**kwargs)

    def test_dict_round_trip_ignores_unknown_keys(self):
        params = LangevinParams.from_dict({'gamma': 0.55, 'dt': 0.1, 'comment': 'x'})
        assert params.to_dict()['gamma'] == 0.55
        assert params.dt == 0.1

    def test_state_shapes_must_match(self):
        with pytest.raises(DimensionError):
            LangevinState(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestDeterministicStep:

    def test_euler_step_with_unit_impulse(self):
        state = LangevinState(Tensor(np.array([1.0, 0.0])), Tensor(np.zeros(2)))
        with no_grad():
            nxt = deterministic_step(state, LangevinParams(dt=1.0), unit_impulse())
        assert np.allclose(nxt.z.data, [1.0, 0.0])
        assert np.allclose(nxt.v.data, [-2.0, 0.0])
        assert nxt.t == 1

    def test_mass_scales_the_kick(self):
        state = LangevinState(Tensor(np.array([1.0, 0.0])), Tensor(np.zeros(2)))
        with no_grad():
            nxt = deterministic_step(state, LangevinParams(dt=1.0, mass=4.0), unit_impulse())
        assert np.allclose(nxt.v.data, [-0.5, 0.0])

    def test_first_order_step(self):
        with no_grad():
            z = first_order_step(Tensor(np.array([1.0, 0.0])), unit_impulse())
        assert np.allclose(z.data, [-1.0, 0.0])

    def test_first_order_rollout_length(self):
        with no_grad():
            zs = first_order_rollout(Tensor(np.ones(2)), unit_impulse(), LangevinParams(dt=0.1), 4)
        assert len(zs) == 5
        assert np.allclose(zs[1].data, 0.8)

    def test_non_finite_state_raises(self):
        state = LangevinState(Tensor(np.array([np.nan, 0.0])), Tensor(np.zeros(2)), t=7)
        with pytest.raises(NumericError) as info:
            deterministic_step(state, LangevinParams(), unit_impulse())
        assert info.value.step == 7


class TestOrnsteinUhlenbeck:

    def test_full_damping_leaves_scaled_noise(self):
        eps = np.array([0.3, -1.2])
        v_next, mu_q = ou_step(Tensor(np.array([5.0, 5.0])), LangevinParams(gamma=1.0), eps)
        assert np.allclose(mu_q.data, 0.0)
        assert np.allclose(v_next.data, math.sqrt(2.0) * eps)

    def test_noise_free_returns_mean(self):
        v_next, mu_q = ou_step(Tensor(np.array([2.0])), LangevinParams(gamma=0.25))
        assert np.allclose(v_next.data, 1.5)
        assert v_next is mu_q

    def test_gradient_of_damping(self):
        gamma = 0.7
        v_half = Tensor(np.ones(4), requires_grad=True)
        with recording() as tape:
            v_next, _ = ou_step(v_half, LangevinParams(gamma=gamma), np.random.default_rng(0))
            tape.backward(v_next.sum())
        assert np.allclose(v_half.grad, 1.0 - gamma)

    def test_noise_shape_checked(self):
        with pytest.raises(DimensionError):
            ou_step(Tensor(np.ones(3)), LangevinParams(), np.ones(4))

    @pytest.mark.parametrize('gamma', [0.25, 0.5, 0.75])
    def test_stationary_variance(self, gamma):
        params = LangevinParams(gamma=gamma)
        rng = np.random.default_rng(11)
        v = Tensor(np.zeros((1000, 4)))
        samples = []
        with no_grad():
            for step in range(150):
                v, _ = ou_step(v, params, rng)
                if step >= 50:
                    samples.append(v.data.copy())
        expected = params.posterior_variance / (1.0 - (1.0 - gamma) ** 2)
        assert abs(np.var(np.stack(samples)) / expected - 1.0) < 0.05

    @pytest.mark.slow
    @pytest.mark.parametrize('gamma', [0.25, 0.5, 0.75])
    def test_long_chain_stationary_variance(self, gamma):
        params = LangevinParams(gamma=gamma)
        rng = np.random.default_rng(23)
        v = Tensor(np.zeros(8))
        samples = np.empty((100_000, 8))
        with no_grad():
            for step in range(100_000):
                v, _ = ou_step(v, params, rng)
                samples[step] = v.data
        expected = params.posterior_variance / (1.0 - (1.0 - gamma) ** 2)
        # first 100 iterations are burn-in
        assert abs(np.var(samples[100:]) / expected - 1.0) < 0.05
        if gamma == 0.5:
            assert abs(np.var(samples[100:]) - 4.0 / 3.0) < 0.05 * 4.0 / 3.0


class TestKL:

    def test_standard_normal_has_zero_kl(self):
        assert math.isclose(gaussian_kl(Tensor(np.zeros(3)), 1.0).item(), 0.0, abs_tol=1e-15)

    def test_shifted_mean(self):
        assert math.isclose(gaussian_kl(Tensor(np.array([0.5])), 1.0).item(), 0.125)

    def test_wider_variance(self):
        assert math.isclose(gaussian_kl(Tensor(np.zeros(1)), 2.0).item(), 0.5 * (1.0 - math.log(2.0)), rel_tol=1e-12)
        assert math.isclose(gaussian_kl(Tensor(np.zeros(1)), 2.0).item(), 0.15343, abs_tol=1e-5)

    def test_tensor_variance_matches_scalar(self):
        mu = Tensor(np.array([0.2, -0.4]))
        logvar = Tensor(np.log(np.array([0.5, 0.5])))
        from_tensor = gaussian_kl(mu, logvar.exp(), logvar).item()
        assert math.isclose(from_tensor, gaussian_kl(mu, 0.5).item(), rel_tol=1e-12)

    def test_velocity_step_kl(self):
        params = LangevinParams(gamma=0.5)
        mu_q = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        expected = 0.5 * 1.0 + 0.5 * 4 * (1.0 - 1.0 - math.log(1.0))
        assert math.isclose(kl_velocity_step(mu_q, params).item(), expected)

    def test_weights_exclude_entries(self):
        params = LangevinParams(gamma=0.7)
        mu_q = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        weights = np.array([[1.0, 1.0], [0.0, 0.0]])
        full = kl_velocity_step(Tensor(np.array([[1.0, 2.0]])), params).item()
        assert math.isclose(kl_velocity_step(mu_q, params, weights).item(), full)

    def test_degenerate_transition_rejected(self):
        with pytest.raises(DomainError):
            kl_velocity_step(Tensor(np.zeros(2)), LangevinParams(gamma=0.0))


class TestNoise:

    def test_shapes(self):
        noise = draw_noise(0, [0, 1, 2], 5, 4)
        assert noise.z0.shape == (3, 4)
        assert noise.v0.shape == (3, 4)
        assert noise.steps.shape == (5, 3, 4)
        assert draw_noise(0, [0], 5, 4, with_velocity=False).v0 is None

    def test_draws_do_not_depend_on_batch_composition(self):
        together = draw_noise(9, [3, 5], 4, 2, epoch=2)
        alone = draw_noise(9, [5], 4, 2, epoch=2)
        assert np.array_equal(together.z0[1], alone.z0[0])
        assert np.array_equal(together.steps[:, 1], alone.steps[:, 0])

    def test_epoch_and_sample_change_the_draw(self):
        base = draw_noise(0, [1], 3, 2)
        assert not np.array_equal(base.z0, draw_noise(0, [1], 3, 2, epoch=1).z0)
        assert not np.array_equal(base.z0, draw_noise(0, [1], 3, 2, sample=1).z0)


class TestRollout:

    def setup_method(self):
        self.potential = make_potential([[0.3, 1.0], [-0.2, 0.8]], 8)
        self.rng = np.random.default_rng(2)

    def test_lengths(self):
        init = LangevinState(Tensor(self.rng.normal(size=(2, 8))), Tensor(np.zeros((2, 8))))
        with no_grad():
            result = rollout(init, LangevinParams(dt=0.5), self.potential, 6, noise=self.rng)
        assert len(result.zs) == 7
        assert len(result.vs) == 7
        assert len(result.mu_qs) == 6

    def test_needs_one_step(self):
        init = LangevinState(Tensor(np.zeros(8)), Tensor(np.zeros(8)))
        with pytest.raises(ContractError):
            rollout(init, LangevinParams(), self.potential, 0)

    def test_pre_drawn_noise_is_reproducible(self):
        init = LangevinState(Tensor(self.rng.normal(size=(2, 8))), Tensor(np.zeros((2, 8))))
        noise = draw_noise(0, [0, 1], 4, 8)
        with no_grad():
            first = rollout(init, LangevinParams(dt=0.5), self.potential, 4, noise=noise.steps)
            second = rollout(init, LangevinParams(dt=0.5), self.potential, 4, noise=noise.steps)
        for a, b in zip(first.zs, second.zs):
            assert np.array_equal(a.data, b.data)


def energy_trace(integrator, dt, total_time, latent_dim=2):
    potential = unit_impulse(latent_dim)
    params = LangevinParams(gamma=0.0, dt=dt, integrator=integrator)
    z0 = np.linspace(1.0, -0.5, latent_dim)
    v0 = np.linspace(0.0, 0.7, latent_dim)
    init = LangevinState(Tensor(z0), Tensor(v0))
    steps = int(round(total_time / dt))
    with no_grad():
        result = rollout(init, params, potential, steps)
    energies = np.array([hamiltonian(z.data, v.data, potential, params) for z, v in zip(result.zs, result.vs)])
    return energies


class TestEnergyConservation:

    def test_euler_energy_grows_geometrically(self):
        dt = 0.01
        energies = energy_trace('euler', dt, 1.0)
        assert np.allclose(energies[1:] / energies[:-1], 1.0 + 2.0 * dt ** 2, rtol=1e-10)

    def test_leapfrog_bounded_drift(self):
        energies = energy_trace('leapfrog', 0.01, 10.0)
        drift = np.max(np.abs(energies - energies[0])) / energies[0]
        assert drift < 1e-2

    def test_leapfrog_drift_shrinks_with_step(self):
        coarse = energy_trace('leapfrog', 0.01, 10.0)
        fine = energy_trace('leapfrog', 0.001, 10.0)
        coarse_drift = np.max(np.abs(coarse - coarse[0])) / coarse[0]
        fine_drift = np.max(np.abs(fine - fine[0])) / fine[0]
        assert fine_drift * 10 <= coarse_drift


def step_jacobian(potential, params):
    """Jacobian of the (linear) deterministic step on the stacked state (z, v)."""
    d = potential.latent_dim
    columns = []
    with no_grad():
        for j in range(2 * d):
            basis = np.zeros(2 * d)
            basis[j] = 1.0
            nxt = deterministic_step(LangevinState(Tensor(basis[:d]), Tensor(basis[d:])), params, potential)
            columns.append(np.concatenate([nxt.z.data, nxt.v.data]))
    return np.stack(columns, axis=1)


class TestPhaseSpaceVolume:

    def setup_method(self):
        self.potential = make_potential([[0.3, 1.0], [-0.2, 0.8]], 8)

    def test_euler_volume_error_is_second_order(self):
        errors = []
        for dt in (0.1, 0.05, 0.025):
            det = np.linalg.det(step_jacobian(self.potential, LangevinParams(dt=dt)))
            errors.append(abs(det - 1.0))
        assert all(e > 0 for e in errors)
        for coarse, fine in zip(errors, errors[1:]):
            assert 2.0 <= coarse / fine <= 8.0

    def test_euler_determinant_closed_form(self):
        dt = 0.05
        norms = self.potential.spectral_norm()
        blocks = [2.0 * self.potential.dense_operator(g) / norms[g] for g in range(2)]
        a = np.zeros((8, 8))
        a[:4, :4], a[4:, 4:] = blocks
        expected = np.linalg.det(np.eye(8) + dt ** 2 * a)
        det = np.linalg.det(step_jacobian(self.potential, LangevinParams(dt=dt)))
        assert math.isclose(det, expected, rel_tol=1e-9)

    def test_leapfrog_preserves_volume(self):
        det = np.linalg.det(step_jacobian(self.potential, LangevinParams(dt=0.1, integrator='leapfrog')))
        assert abs(det - 1.0) < 1e-10
