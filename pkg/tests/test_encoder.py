import numpy as np
import pytest
from scipy.special import expit

from conftest import numeric_gradient, relative_error
from langevin_flow.encoder import GruCell, InitialLatentHead, LinearEncoder, RecurrentEncoder, gru_step, init_latents
from langevin_flow.errors import ContractError, DimensionError
from langevin_flow.tensor import Tensor, no_grad, recording


def reference_gru(cell, x, h):
    xh = np.concatenate([x, h], axis=-1)
    r = expit(xh @ cell.reset_gate.weight.data + cell.reset_gate.bias.data)
    u = expit(xh @ cell.update_gate.weight.data + cell.update_gate.bias.data)
    xrh = np.concatenate([x, r * h], axis=-1)
    c = np.tanh(xrh @ cell.candidate.weight.data + cell.candidate.bias.data)
    return (1 - u) * h + u * c


class TestGruCell:

    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.cell = GruCell(3, 5, self.rng)

    def test_matches_reference(self):
        x = self.rng.normal(size=(2, 3))
        h = self.rng.normal(size=(2, 5))
        with no_grad():
            out = gru_step(self.cell, Tensor(x), Tensor(h)).data
        assert np.allclose(out, reference_gru(self.cell, x, h))

    def test_single_step_vector(self):
        x = self.rng.normal(size=3)
        with no_grad():
            out = self.cell(Tensor(x), Tensor(np.zeros(5))).data
        assert out.shape == (5,)
        assert np.allclose(out, reference_gru(self.cell, x[None], np.zeros((1, 5)))[0])

    def test_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            gru_step(self.cell, Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 5))))
        with pytest.raises(DimensionError):
            gru_step(self.cell, Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 5))))

    def test_parameter_gradients(self):
        x = self.rng.normal(size=(2, 3))
        h = self.rng.normal(size=(2, 5))
        weights = self.rng.normal(size=(2, 5))

        def value():
            with no_grad():
                return (gru_step(self.cell, Tensor(x), Tensor(h)) * Tensor(weights)).sum().item()

        self.cell.zero_grad()
        with recording() as tape:
            tape.backward((gru_step(self.cell, Tensor(x), Tensor(h)) * Tensor(weights)).sum())
        for name, p in self.cell.named_parameters().items():
            assert relative_error(p.grad, numeric_gradient(value, p.data)) < 1e-7, name


class TestEncoders:

    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.spikes = self.rng.poisson(1.0, size=(2, 6, 3)).astype(float)

    def test_recurrent_shapes(self):
        encoder = RecurrentEncoder(3, 4, self.rng)
        with no_grad():
            hs = encoder.steps(Tensor(self.spikes))
            sequence = encoder.encode_sequence(Tensor(self.spikes))
        assert len(hs) == 6
        assert hs[0].shape == (2, 4)
        assert sequence.shape == (2, 6, 4)

    def test_recurrent_first_state_starts_from_zero(self):
        encoder = RecurrentEncoder(3, 4, self.rng)
        with no_grad():
            h0 = encoder.steps(Tensor(self.spikes))[0].data
        assert np.allclose(h0, reference_gru(encoder.cell, self.spikes[:, 0], np.zeros((2, 4))))

    def test_recurrent_encoder_is_causal(self):
        encoder = RecurrentEncoder(3, 4, self.rng)
        changed = self.spikes.copy()
        changed[:, 4:] += 3.0
        with no_grad():
            before = encoder.encode_sequence(Tensor(self.spikes)).data
            after = encoder.encode_sequence(Tensor(changed)).data
        assert np.array_equal(before[:, :4], after[:, :4])
        assert not np.allclose(before[:, 4:], after[:, 4:])

    def test_linear_encoder_has_no_memory(self):
        encoder = LinearEncoder(3, 4, self.rng)
        changed = self.spikes.copy()
        changed[:, 2] += 1.0
        with no_grad():
            before = encoder.encode_sequence(Tensor(self.spikes)).data
            after = encoder.encode_sequence(Tensor(changed)).data
            steps = np.stack([h.data for h in encoder.steps(Tensor(self.spikes))], axis=1)
        differs = ~np.all(np.isclose(before, after), axis=(0, 2))
        assert list(np.nonzero(differs)[0]) == [2]
        assert np.allclose(steps, before)

    @pytest.mark.parametrize('encoder_class', [RecurrentEncoder, LinearEncoder])
    def test_empty_sequence_rejected(self, encoder_class):
        encoder = encoder_class(3, 4, self.rng)
        with pytest.raises(ContractError):
            encoder.steps(Tensor(np.zeros((2, 0, 3))))


class TestInitialLatents:

    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.head = InitialLatentHead(5, 3, self.rng)
        self.h0 = Tensor(self.rng.normal(size=(4, 5)))

    def test_mean_without_noise(self):
        with no_grad():
            init = init_latents(self.head, self.h0)
            out = self.head.projection(self.h0).data
        assert np.allclose(init.z0.data, out[:, :3])
        assert np.allclose(init.v0.data, out[:, 6:9])

    def test_reparameterized_sample(self):
        eps_z = self.rng.normal(size=(4, 3))
        eps_v = self.rng.normal(size=(4, 3))
        with no_grad():
            init = self.head(self.h0, eps_z, eps_v)
            out = self.head.projection(self.h0).data
        assert np.allclose(init.z0.data, out[:, :3] + np.exp(0.5 * out[:, 3:6]) * eps_z)
        assert np.allclose(init.v0.data, out[:, 6:9] + np.exp(0.5 * out[:, 9:12]) * eps_v)

    def test_kl_is_batch_mean(self):
        with no_grad():
            init = init_latents(self.head, self.h0)
            out = self.head.projection(self.h0).data
        mu, logvar = out[:, :3], out[:, 3:6]
        expected = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - logvar - 1) / 4
        assert np.isclose(init.kl_z.item(), expected)

    def test_logvar_is_clamped(self):
        self.head.projection.bias.data[3:6] = 50.0
        with no_grad():
            init = init_latents(self.head, self.h0)
        assert np.all(init.logvar_z <= 10.0)

    def test_position_only_head(self):
        head = InitialLatentHead(5, 3, self.rng, with_velocity=False)
        with no_grad():
            init = head(self.h0, self.rng.normal(size=(4, 3)))
        assert head.projection.out_dim == 6
        assert init.v0 is None and init.kl_v is None

    def test_noise_shape_checked(self):
        with pytest.raises(DimensionError):
            init_latents(self.head, self.h0, np.zeros((4, 2)))
