"""
Tests for the training objective, fitting loop, checkpoints, gradient checks
and random search.
"""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from battery_forecast.dataset import full_batch
from battery_forecast.exceptions import ConfigError, EmptyBatch, TrainingDiverged
from battery_forecast.model import build_model, parameter_checksum, predict_samples
from battery_forecast.preprocess import ProcessedSample, SmoothingParams, preprocess_record
from battery_forecast.synthgen import SynthSpec, generate_dataset
from battery_forecast.train import (
    EarlyStopping,
    SearchSpace,
    check_forecaster_gradients,
    compute_loss,
    evaluate_split,
    fit,
    gradient_check,
    load_checkpoint,
    masked_mse,
    random_search,
    save_checkpoint,
    total_loss,
)

TINY_SEARCH = SearchSpace(
    batch_size=(4,),
    d=(8,),
    d_ff=(16,),
    d_ffs=(16,),
    L_intra=(1,),
    L_de=(1,),
    s_bar=(2,),
    N_mem=(4,),
    P=(5, 10),
    d_mem=(16,),
)


@pytest.fixture
def batch(tiny_samples, tiny_config):
    return full_batch(tiny_samples, tiny_config.S, tiny_config.T_max)


@pytest.fixture
def splits(tiny_samples):
    return tiny_samples[:6], tiny_samples[6:]


class TestMaskedMse:
    def test_mean_over_observed_cycles(self):
        loss, skipped = masked_mse(torch.tensor([[0.0, 1.0, 2.0]]), torch.ones(1, 3), torch.tensor([[1, 1, 0]]))
        assert loss.item() == pytest.approx(0.5)
        assert skipped == 0

    def test_samples_weighted_equally(self):
        pred = torch.tensor([[0.0, 0.0], [2.0, 0.0]])
        mask = torch.tensor([[1, 1], [1, 0]])
        loss, _ = masked_mse(pred, torch.zeros(2, 2), mask)
        assert loss.item() == pytest.approx((0.0 + 4.0) / 2)

    def test_empty_rows_skipped(self):
        mask = torch.tensor([[1, 0], [0, 0]])
        loss, skipped = masked_mse(torch.zeros(2, 2), torch.ones(2, 2), mask)
        assert skipped == 1
        assert loss.item() == pytest.approx(1.0)

    def test_unmasked_values_ignored(self):
        pred = torch.tensor([1.0, float("inf")])
        loss, _ = masked_mse(pred, torch.ones(2), torch.tensor([1, 0]))
        assert loss.item() == 0.0

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            masked_mse(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3))


class TestTotalLoss:
    def test_three_terms(self, tiny_model, tiny_config, batch):
        losses, _ = compute_loss(tiny_model, batch, tiny_config)
        assert losses.align is not None and losses.recover is not None
        expected = losses.pred + tiny_config.lambda1 * losses.align + tiny_config.lambda2 * losses.recover
        torch.testing.assert_close(losses.total, expected)
        assert set(losses.as_dict()) == {"pred", "align", "recover", "total"}

    def test_prediction_only_without_memory(self, tiny_config, tiny_samples, batch):
        config = tiny_config.replace(mdpm=False)
        model = build_model(config, [s.condition for s in tiny_samples])
        losses, _ = compute_loss(model, batch, config)
        assert losses.align is None and losses.recover is None
        assert torch.equal(losses.total, losses.pred)

    def test_unobserved_cycles_never_move_the_loss(self, tiny_model, tiny_config, batch):
        tiny_model.eval()
        hidden = (batch.mask == 0).to(batch.y_norm.dtype)
        assert hidden.any()
        generator = torch.Generator().manual_seed(0)
        with torch.no_grad():
            output = tiny_model.forward_batch(batch)
            reference = total_loss(tiny_model, output, batch, tiny_config.lambda1, tiny_config.lambda2)
            for _ in range(200):
                y_noise = 10.0 * torch.randn(batch.y_norm.shape, generator=generator) * hidden
                hat_noise = 10.0 * torch.randn(output.y_hat.shape, generator=generator) * hidden
                losses = total_loss(
                    tiny_model,
                    dataclasses.replace(output, y_hat=output.y_hat + hat_noise),
                    dataclasses.replace(batch, y_norm=batch.y_norm + y_noise),
                    tiny_config.lambda1,
                    tiny_config.lambda2,
                )
                for name in ("pred", "align", "recover", "total"):
                    assert torch.equal(getattr(losses, name), getattr(reference, name)), name


class TestEarlyStopping:
    def test_patience_counts_non_improving_epochs(self):
        stopper = EarlyStopping(patience=2)
        assert stopper.step(3.0, 1)
        assert stopper.step(2.0, 2)
        assert not stopper.step(2.0, 3)
        assert not stopper.should_stop
        assert not stopper.step(2.5, 4)
        assert stopper.should_stop
        assert stopper.best_epoch == 2


class TestFit:
    """Optimizer loop."""

    def test_history_and_log(self, tiny_model, tiny_config, splits, tmp_path):
        log_path = tmp_path / "logs" / "train_log.jsonl"
        result = fit(tiny_model, *splits, tiny_config, log_path=log_path)
        lines = log_path.read_text().splitlines()
        assert 1 <= len(result.history) <= tiny_config.max_epochs
        assert len(lines) == len(result.history)
        assert json.loads(lines[0])["epoch"] == 1
        assert math.isfinite(result.best_val_mape)
        assert result.steps > 0

    def test_model_holds_best_weights(self, tiny_model, tiny_config, splits):
        result = fit(tiny_model, *splits, tiny_config)
        val_mape, _ = evaluate_split(tiny_model, splits[1], tiny_config.S, tiny_config.T_max)
        assert val_mape == pytest.approx(result.best_val_mape)

    def test_max_steps(self, tiny_model, tiny_config, splits):
        result = fit(tiny_model, *splits, tiny_config, max_steps=1)
        assert result.steps == 1
        assert len(result.history) == 1

    def test_same_seed_same_weights(self, tiny_config, tiny_samples, splits):
        conditions = [s.condition for s in tiny_samples]
        checksums = []
        for _ in range(2):
            model = build_model(tiny_config, conditions)
            fit(model, *splits, tiny_config)
            checksums.append(parameter_checksum(model))
        assert checksums[0] == checksums[1]

    def test_empty_validation(self, tiny_model, tiny_config, splits):
        with pytest.raises(ValueError):
            fit(tiny_model, splits[0], [], tiny_config)

    def test_non_finite_loss(self, tiny_model, tiny_config, splits):
        with torch.no_grad():
            tiny_model.head.head.bias.fill_(float("nan"))
        with pytest.raises(TrainingDiverged) as info:
            fit(tiny_model, *splits, tiny_config)
        assert info.value.result.steps == 0

    @pytest.mark.slow
    def test_overfits_eight_noiseless_batteries(self, tiny_config):
        """Training loss falls to 5% of its starting value within 1000 steps."""
        spec = SynthSpec(seed=3, n_conditions=4, batteries_per_condition=2, life_range=(120, 180),
                         samples_per_segment=8, noise_sd=0.0)
        config = tiny_config.replace(d=16, d_ff=32, d_ffs=32, d_mem=32, lr=3e-3, batch_size=8,
                                     max_epochs=1000, patience=1000)
        samples = [preprocess_record(r, SmoothingParams(), config) for r, _ in generate_dataset(spec)]
        assert all(isinstance(s, ProcessedSample) for s in samples) and len(samples) == 8
        model = build_model(config, [s.condition for s in samples])
        batch = full_batch(samples, config.S, config.T_max)

        model.eval()
        with torch.no_grad():
            initial, _ = compute_loss(model, batch, config)
        result = fit(model, samples, samples, config, max_steps=1000)
        model.eval()
        with torch.no_grad():
            final, _ = compute_loss(model, batch, config)
        assert result.steps <= 1000
        assert final.pred.item() <= 0.05 * initial.pred.item()
        assert final.total.item() < initial.total.item()


class TestCheckpoints:
    def test_round_trip(self, tiny_model, tiny_config, tiny_samples, tmp_path):
        path = save_checkpoint(tmp_path / "model.pt", tiny_model)
        loaded, payload = load_checkpoint(path)
        assert parameter_checksum(loaded) == parameter_checksum(tiny_model)
        assert loaded.config == tiny_model.config
        np.testing.assert_array_equal(
            predict_samples(loaded, tiny_samples, tiny_config.S, tiny_config.T_max),
            predict_samples(tiny_model, tiny_samples, tiny_config.S, tiny_config.T_max),
        )
        assert payload["history"] == []

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"header": "something-else"}, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestGradientCheck:
    def test_linear_model_passes(self):
        torch.manual_seed(0)
        module = nn.Linear(3, 2).double()
        x = torch.randn(4, 3, dtype=torch.float64)
        report = gradient_check(module, lambda: (module(x) ** 2).sum(), tolerance=1e-6)
        assert report.passed
        assert report.checked_entries == 8
        assert set(report.group_errors) == {"weight", "bias"}

    def test_wrong_gradient_fails(self):
        torch.manual_seed(0)
        module = nn.Linear(3, 1).double()
        x = torch.randn(4, 3, dtype=torch.float64)

        def loss_fn():
            value = (module(x) ** 2).sum()
            # Same value, doubled gradient.
            return value + (value - value.detach())

        report = gradient_check(module, loss_fn, tolerance=1e-3)
        assert not report.passed
        assert report.max_error == pytest.approx(1.0 / 3.0, rel=1e-3)

    def test_selection_changes_are_skipped(self):
        module = nn.Linear(1, 1, bias=False).double()
        with torch.no_grad():
            module.weight.fill_(0.0)
        x = torch.ones(1, 1, dtype=torch.float64)
        report = gradient_check(module, lambda: module(x).abs().sum(), tolerance=1e-6,
                                selection_fn=lambda: bool(module.weight.item() > 0))
        assert report.skipped_entries == 1
        assert report.checked_entries == 0

    @pytest.mark.slow
    def test_forecaster_gradients(self, tiny_model, tiny_config, tiny_samples):
        batch = full_batch(tiny_samples[:2], tiny_config.S, tiny_config.T_max)
        report = check_forecaster_gradients(tiny_model, batch, tiny_config, max_entries=6)
        assert report.passed, report.group_errors


class TestRandomSearch:
    def test_sample_respects_L(self, tiny_config):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert TINY_SEARCH.sample(rng, tiny_config.L)["P"] in (5, 10)
        with pytest.raises(ConfigError):
            SearchSpace(P=(30,)).sample(rng, 20)

    def test_sample_is_seeded(self):
        first = SearchSpace().sample(np.random.default_rng(3), 300)
        second = SearchSpace().sample(np.random.default_rng(3), 300)
        assert first == second

    def test_empty_option_invalid(self):
        assert "d" in {v.field for v in SearchSpace(d=()).validate()}

    def test_budget_must_be_positive(self, tiny_config, splits):
        with pytest.raises(ValueError):
            random_search(TINY_SEARCH, 0, 0, *splits, base_config=tiny_config)

    def test_best_trial_has_lowest_mape(self, tiny_config, splits):
        result = random_search(TINY_SEARCH, 2, 0, *splits, base_config=tiny_config, max_steps=1)
        assert len(result.trials) == 2
        mapes = [t["val_mape"] for t in result.trials]
        assert result.best_index == int(np.argmin(mapes))
        assert result.best_config.P == result.trials[result.best_index]["params"]["P"]
