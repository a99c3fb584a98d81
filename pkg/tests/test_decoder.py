import math

import numpy as np
import pytest

from conftest import numeric_gradient, relative_error
from langevin_flow.decoder import (LOG_RATE_BOUNDS, RATE_BOUNDS, LinearDecoder, TransformerDecoder, decode, features,
                                   positional_encoding, rates_from_log)
from langevin_flow.errors import ConfigurationError, ContractError, DimensionError
from langevin_flow.tensor import Tensor, no_grad, recording


class TestPositionalEncoding:

    def test_first_row(self):
        table = positional_encoding(10, 6)
        assert table.shape == (10, 6)
        assert np.allclose(table[0], [0, 1, 0, 1, 0, 1])

    def test_values(self):
        table = positional_encoding(5, 4)
        assert math.isclose(table[3, 0], math.sin(3.0))
        assert math.isclose(table[3, 3], math.cos(3.0 / 100.0))

    def test_odd_width(self):
        assert positional_encoding(4, 5).shape == (4, 5)


class TestRates:

    def test_clamped_to_bounds(self):
        rates = rates_from_log(Tensor(np.array([-100.0, 0.0, 100.0]))).data
        assert math.isclose(rates[0], RATE_BOUNDS[0], rel_tol=1e-12)
        assert rates[1] == 1.0
        assert math.isclose(rates[2], RATE_BOUNDS[1], rel_tol=1e-12)
        assert math.isclose(LOG_RATE_BOUNDS[1], math.log(1e4))


class TestFeatures:

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.zs = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
        self.vs = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
        self.hs = [Tensor(rng.normal(size=(2, 5))) for _ in range(4)]

    def test_concatenation_order(self):
        with no_grad():
            x = features(self.zs, self.vs, self.hs).data
        assert x.shape == (2, 4, 11)
        assert np.array_equal(x[:, 1, :3], self.zs[1].data)
        assert np.array_equal(x[:, 1, 3:6], self.vs[1].data)
        assert np.array_equal(x[:, 1, 6:], self.hs[1].data)

    def test_optional_latents(self):
        with no_grad():
            assert features(None, None, self.hs).shape == (2, 4, 5)
            assert features(self.zs, None, self.hs).shape == (2, 4, 8)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            features(self.zs[:3], self.vs, self.hs)


class TestTransformerDecoder:

    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.decoder = TransformerDecoder(7, 8, 5, self.rng, heads=2, max_len=12)
        self.x = self.rng.normal(size=(2, 6, 7))

    def test_output_shape_and_positivity(self):
        with no_grad():
            rates = self.decoder(Tensor(self.x)).data
        assert rates.shape == (2, 6, 5)
        assert np.all(rates >= RATE_BOUNDS[0]) and np.all(rates <= RATE_BOUNDS[1])

    def test_attention_rows_are_stochastic(self):
        with no_grad():
            self.decoder(Tensor(self.x))
        assert self.decoder.last_attention.shape == (2, 2, 6, 6)
        assert np.allclose(self.decoder.last_attention.sum(axis=-1), 1.0)

    def test_masked_bins_do_not_influence_real_bins(self):
        mask = np.array([[True] * 6, [True] * 4 + [False] * 2])
        changed = self.x.copy()
        changed[1, 4:] = 100.0
        with no_grad():
            before = self.decoder(Tensor(self.x), mask).data
            assert np.allclose(self.decoder.last_attention[1, :, :, 4:], 0.0)
            after = self.decoder(Tensor(changed), mask).data
            truncated = self.decoder(Tensor(self.x[1:, :4])).data
        assert np.allclose(before[1, :4], after[1, :4], rtol=1e-12, atol=1e-14)
        assert np.allclose(before[1, :4], truncated[0])

    def test_early_bins_attend_to_later_bins(self):
        changed = self.x.copy()
        changed[0, 5] += 1.0
        with no_grad():
            before = self.decoder(Tensor(self.x)).data
            assert np.all(self.decoder.last_attention[0, 0][np.triu_indices(6, k=1)] > 0)
            after = self.decoder(Tensor(changed)).data
        assert not np.allclose(before[0, 0], after[0, 0])
        assert np.allclose(before[1], after[1], rtol=1e-12, atol=1e-14)

    def test_without_positions_bins_are_exchangeable(self):
        plain = TransformerDecoder(7, 8, 5, np.random.default_rng(2), heads=2, use_positional=False)
        permuted = self.x[:, ::-1].copy()
        with no_grad():
            out = plain(Tensor(self.x)).data
            out_permuted = plain(Tensor(permuted)).data
        assert np.allclose(out[:, ::-1], out_permuted)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            self.decoder(Tensor(np.ones((2, 6, 4))))
        with pytest.raises(ContractError):
            self.decoder(Tensor(np.ones((1, 13, 7))))
        with pytest.raises(ConfigurationError):
            TransformerDecoder(7, 9, 5, self.rng, heads=2)

    def test_parameter_gradients(self):
        x = self.rng.normal(size=(2, 4, 7)) * 0.5
        mask = np.array([[True] * 4, [True] * 3 + [False]])
        weights = self.rng.uniform(size=(2, 4, 5))

        def value():
            with no_grad():
                return (self.decoder(Tensor(x), mask) * Tensor(weights)).sum().item()

        self.decoder.zero_grad()
        with recording() as tape:
            tape.backward((self.decoder(Tensor(x), mask) * Tensor(weights)).sum())
        for name, p in self.decoder.named_parameters().items():
            assert relative_error(p.grad, numeric_gradient(value, p.data)) < 1e-6, name


class TestLinearDecoder:

    def test_bins_are_independent(self):
        rng = np.random.default_rng(3)
        decoder = LinearDecoder(4, 3, rng)
        x = rng.normal(size=(1, 5, 4))
        changed = x.copy()
        changed[0, 2] += 1.0
        with no_grad():
            before = decoder(Tensor(x)).data
            after = decoder(Tensor(changed)).data
        differs = ~np.all(np.isclose(before, after), axis=(0, 2))
        assert list(np.nonzero(differs)[0]) == [2]

    def test_decode_helper(self):
        rng = np.random.default_rng(4)
        decoder = LinearDecoder(5, 3, rng)
        hs = [Tensor(rng.normal(size=(2, 5))) for _ in range(3)]
        with no_grad():
            rates = decode(decoder, None, None, hs)
        assert rates.shape == (2, 3, 3)
        assert np.allclose(rates.data[:, 1], np.exp(hs[1].data @ decoder.readout.weight.data
                                                    + decoder.readout.bias.data))
