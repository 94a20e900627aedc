"""
Tests for the dual-view encoder.
"""

import pytest
import torch

from battery_forecast.dataset import full_batch
from battery_forecast.encoder import DualViewEncoder, soc_token_count, sinusoidal_encoding


@pytest.fixture
def batch(tiny_samples, tiny_config):
    return full_batch(tiny_samples, tiny_config.S, tiny_config.T_max)


class TestHelpers:
    @pytest.mark.parametrize("L, P, M", [(300, 30, 10), (300, 16, 18), (20, 5, 4), (21, 5, 4)])
    def test_soc_token_count(self, L, P, M):
        assert soc_token_count(L, P) == M

    def test_sinusoidal_first_row(self):
        encoding = sinusoidal_encoding(5, 8)
        assert encoding.shape == (5, 8)
        assert torch.all(encoding[0, 0::2] == 0.0)
        assert torch.all(encoding[0, 1::2] == 1.0)

    def test_sinusoidal_distinct_positions(self):
        encoding = sinusoidal_encoding(12, 8)
        assert not torch.allclose(encoding[3], encoding[4])


class TestDualViewEncoder:
    """Token layout and padded-cycle handling."""

    def test_token_layout(self, tiny_config, batch):
        torch.manual_seed(0)
        encoder = DualViewEncoder(tiny_config).eval()
        tokens = encoder(batch.X, batch.X_f, batch.cycle_mask)
        n = len(batch)
        assert tokens.temporal.shape == (n, tiny_config.S_max, tiny_config.d)
        assert tokens.soc.shape == (n, tiny_config.M, tiny_config.d)
        assert tokens.tokens.shape == (n, tiny_config.n_tokens, tiny_config.d)
        S, S_max = tiny_config.S, tiny_config.S_max
        assert tokens.key_mask[:, :S].all()
        assert not tokens.key_mask[:, S:S_max].any()
        assert tokens.key_mask[:, S_max:].all()

    def test_patchify_zeroes_padded_cycles(self, tiny_config, batch):
        torch.manual_seed(0)
        encoder = DualViewEncoder(tiny_config)
        X = batch.X.clone()
        X[:, tiny_config.S:] = 1.0
        Z_hat = encoder.soc_patchify(X, batch.cycle_mask)
        assert Z_hat.shape == (len(batch), tiny_config.S_max, tiny_config.d, tiny_config.M)
        assert torch.all(Z_hat[:, tiny_config.S:] == 0.0)

    def test_padded_rows_do_not_reach_attendable_tokens(self, tiny_config, batch):
        torch.manual_seed(0)
        encoder = DualViewEncoder(tiny_config).eval()
        X = batch.X.clone()
        X[:, tiny_config.S:] = torch.randn_like(X[:, tiny_config.S:])
        with torch.no_grad():
            clean = encoder(batch.X, batch.X_f, batch.cycle_mask)
            noisy = encoder(X, batch.X_f, batch.cycle_mask)
        S = tiny_config.S
        torch.testing.assert_close(clean.temporal[:, :S], noisy.temporal[:, :S])
        torch.testing.assert_close(clean.soc, noisy.soc)

    def test_without_soc_view(self, tiny_config, batch):
        config = tiny_config.replace(socview=False)
        torch.manual_seed(0)
        encoder = DualViewEncoder(config)
        tokens = encoder(batch.X, batch.X_f, batch.cycle_mask)
        assert tokens.soc is None
        assert tokens.tokens.shape == (len(batch), config.S_max, config.d)
        assert not hasattr(encoder, "soc_conv")

    def test_descriptors_shift_temporal_tokens(self, tiny_config, batch):
        torch.manual_seed(0)
        encoder = DualViewEncoder(tiny_config).eval()
        with torch.no_grad():
            base = encoder(batch.X, batch.X_f, batch.cycle_mask).temporal
            shifted = encoder(batch.X, batch.X_f + 0.1, batch.cycle_mask).temporal
        assert not torch.allclose(base, shifted)
