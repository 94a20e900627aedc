"""
Tests for the assembled forecaster.
"""

import numpy as np
import pytest
import torch

from battery_forecast.dataset import full_batch
from battery_forecast.embedder import ExternalEmbedder, LookupEmbedder, hashed_embedding_table
from battery_forecast.model import build_model, parameter_checksum, predict_samples


@pytest.fixture
def batch(tiny_samples, tiny_config):
    return full_batch(tiny_samples, tiny_config.S, tiny_config.T_max)


class TestForward:
    def test_full_model_outputs(self, tiny_model, tiny_config, batch):
        out = tiny_model.eval().forward_batch(batch)
        n = len(batch)
        assert out.y_hat.shape == (n, tiny_config.T_max)
        assert out.H.shape == (n, tiny_config.s_bar, tiny_config.d)
        assert out.E_hat.shape == (n, tiny_config.s_bar, tiny_config.d)
        assert out.retrieval.indices.shape == (n, 2)
        assert out.beta.shape == (n, tiny_config.d)
        assert torch.isfinite(out.y_hat).all()

    def test_padded_rows_do_not_change_forecast(self, tiny_model, tiny_config, batch):
        tiny_model.eval()
        noisy = batch.X.clone()
        noisy[:, tiny_config.S:] = torch.randn_like(noisy[:, tiny_config.S:])
        with torch.no_grad():
            clean = tiny_model(batch.X, batch.X_f, batch.cycle_mask, batch.conditions).y_hat
            perturbed = tiny_model(noisy, batch.X_f, batch.cycle_mask, batch.conditions).y_hat
        torch.testing.assert_close(clean, perturbed, atol=1e-6, rtol=1e-5)

    def test_condition_changes_forecast(self, tiny_model, batch):
        tiny_model.eval()
        same = [batch.conditions[0]] * len(batch)
        with torch.no_grad():
            own = tiny_model(batch.X, batch.X_f, batch.cycle_mask, batch.conditions).y_hat
            shared = tiny_model(batch.X, batch.X_f, batch.cycle_mask, same).y_hat
        assert not torch.allclose(own, shared)

    def test_no_condition_paths(self, tiny_config, tiny_samples, batch):
        model = build_model(tiny_config.replace(acdecoder=False), [s.condition for s in tiny_samples])
        assert model.embedder is None and model.prior is None
        out = model.forward_batch(batch)
        assert out.E_hat is None

    def test_without_memory(self, tiny_config, tiny_samples, batch):
        model = build_model(tiny_config.replace(mdpm=False), [s.condition for s in tiny_samples])
        out = model.forward_batch(batch)
        assert out.retrieval is None and out.beta is None and out.h_mem is None
        with pytest.raises(ValueError):
            model.decode_prototypes()
        assert model.reinitialize_collapsed_slots() == 0


class TestEmbeddingSources:
    def test_lookup_by_default(self, tiny_model):
        assert isinstance(tiny_model.embedder, LookupEmbedder)

    def test_external_table(self, tiny_config, tiny_samples, batch):
        conditions = [s.condition for s in tiny_samples]
        table = hashed_embedding_table(conditions, tiny_config.d_enc)
        model = build_model(tiny_config.replace(llm_embedder=True), conditions, table)
        assert isinstance(model.embedder, ExternalEmbedder)
        assert model.forward_batch(batch).y_hat.shape == (len(batch), tiny_config.T_max)

    def test_external_file(self, tiny_config, tiny_samples, tmp_path):
        conditions = [s.condition for s in tiny_samples]
        path = hashed_embedding_table(conditions, tiny_config.d_enc).save(tmp_path / "emb.json")
        model = build_model(tiny_config.replace(llm_embedder=True, embedding_file=str(path)), conditions)
        assert isinstance(model.embedder, ExternalEmbedder)

    def test_external_without_table(self, tiny_config):
        with pytest.raises(ValueError):
            build_model(tiny_config.replace(llm_embedder=True))


class TestReproducibility:
    def test_same_seed_same_parameters(self, tiny_config, tiny_samples):
        conditions = [s.condition for s in tiny_samples]
        first = build_model(tiny_config, conditions)
        second = build_model(tiny_config, conditions)
        assert parameter_checksum(first) == parameter_checksum(second)

    def test_checksum_sees_parameter_changes(self, tiny_model):
        before = parameter_checksum(tiny_model)
        with torch.no_grad():
            tiny_model.decoder.queries[0, 0] += 1.0
        assert parameter_checksum(tiny_model) != before

    def test_seed_changes_parameters(self, tiny_config, tiny_samples):
        conditions = [s.condition for s in tiny_samples]
        assert (parameter_checksum(build_model(tiny_config, conditions))
                != parameter_checksum(build_model(tiny_config.replace(seed=1), conditions)))


class TestPredictSamples:
    def test_shape_and_mode(self, tiny_model, tiny_samples, tiny_config):
        tiny_model.train()
        forecasts = predict_samples(tiny_model, tiny_samples, tiny_config.S, tiny_config.T_max, batch_size=3)
        assert forecasts.shape == (len(tiny_samples), tiny_config.T_max)
        assert forecasts.dtype == np.float64
        assert tiny_model.training

    def test_empty(self, tiny_model, tiny_config):
        assert predict_samples(tiny_model, [], tiny_config.S, tiny_config.T_max).shape == (0, tiny_config.T_max)

    def test_prototypes(self, tiny_model, tiny_config):
        prototypes = tiny_model.decode_prototypes([0, 2])
        assert prototypes.shape == (2, tiny_config.T_max)
