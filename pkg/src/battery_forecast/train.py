"""
Training objective, optimizer loop with early stopping, checkpoints,
finite-difference gradient checks and random hyperparameter search.
"""

import copy
import dataclasses
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .core import ModelConfig, PathLike, Violation
from .dataset import Batch, ForecastDataset, make_loader, predictable
from .embedder import ExternalEmbeddingTable
from .exceptions import ConfigError, EmptyBatch, TrainingDiverged
from .memory import alignment_loss
from .metrics import compute_metrics
from .model import DegradationForecaster, ForecastOutput, build_model, predict_samples
from .preprocess import ProcessedSample

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "battery-forecast-checkpoint/1"
TRAIN_LOG = "train_log.jsonl"


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """
    Per sample: sum(mask * (target - pred)^2) / O_i, averaged over samples
    with O_i > 0. Returns (loss, number of skipped samples).
    """
    if pred.dim() == 1:
        pred, target, mask = pred.unsqueeze(0), target.unsqueeze(0), mask.unsqueeze(0)
    mask = mask.to(pred.dtype)
    observed = mask.sum(dim=-1)
    valid = observed > 0
    skipped = int((~valid).sum())
    if not valid.any():
        raise EmptyBatch("No sample in the batch has an observed prediction-region cycle")
    squared = torch.where(mask > 0, (target - pred) ** 2, torch.zeros_like(pred))
    per_sample = squared.sum(dim=-1) / observed.clamp(min=1.0)
    return per_sample[valid].mean(), skipped


@dataclass
class LossBreakdown:
    pred: torch.Tensor
    align: Optional[torch.Tensor]
    recover: Optional[torch.Tensor]
    total: torch.Tensor
    skipped_samples: int = 0

    def as_dict(self) -> Dict[str, Optional[float]]:
        def value(t: Optional[torch.Tensor]) -> Optional[float]:
            return None if t is None else float(t.detach())

        return {
            "pred": value(self.pred),
            "align": value(self.align),
            "recover": value(self.recover),
            "total": value(self.total),
        }


def total_loss(model: DegradationForecaster, output: ForecastOutput, batch: Batch,
               lambda1: float, lambda2: float) -> LossBreakdown:
    """L_pred + lambda1 * L_align + lambda2 * L_recover; memory terms only when the memory exists."""
    pred, skipped = masked_mse(output.y_hat, batch.y_norm, batch.mask)
    if model.trajectory is None or output.retrieval is None:
        return LossBreakdown(pred=pred, align=None, recover=None, total=pred, skipped_samples=skipped)
    e_trajectory = model.trajectory.encode_trajectory(batch.y_norm, batch.mask)
    reconstruction = model.trajectory.decode_trajectory(e_trajectory)
    align, _ = alignment_loss(output.retrieval.h_mem, e_trajectory)
    recover, _ = masked_mse(reconstruction, batch.y_norm, batch.mask)
    total = pred + lambda1 * align + lambda2 * recover
    return LossBreakdown(pred=pred, align=align, recover=recover, total=total, skipped_samples=skipped)


def compute_loss(model: DegradationForecaster, batch: Batch,
                 config: ModelConfig) -> Tuple[LossBreakdown, ForecastOutput]:
    output = model.forward_batch(batch)
    return total_loss(model, output, batch, config.lambda1, config.lambda2), output


class EarlyStopping:
    """Stops once `patience` consecutive epochs pass without a strictly lower value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epochs_since_best = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.epochs_since_best = 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best >= self.patience


@dataclass
class FitResult:
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mape: float = math.inf
    steps: int = 0
    stopped_early: bool = False


def evaluate_split(model: DegradationForecaster, samples: Sequence[ProcessedSample],
                   S: int, T_max: int) -> Tuple[float, float]:
    """Mean per-battery (MAPE %, MAE) on the original SOH scale."""
    samples = predictable(samples, S, T_max)
    if not samples:
        return math.nan, math.nan
    forecasts = predict_samples(model, samples, S, T_max)
    scores = [compute_metrics(forecast, sample.view(S, T_max)[1])
              for forecast, sample in zip(forecasts, samples)]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def _append_log(path: Optional[Path], entry: Dict[str, Any]):
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def fit(model: DegradationForecaster, train_samples: Sequence[ProcessedSample],
        val_samples: Sequence[ProcessedSample], config: ModelConfig,
        log_path: Optional[PathLike] = None, max_steps: Optional[int] = None) -> FitResult:
    """
    Adam on the three-term loss, validation MAPE after every epoch, early
    stopping on patience. The model ends up holding the best-validation weights.
    """
    train_samples = predictable(train_samples, config.S, config.T_max)
    val_samples = predictable(val_samples, config.S, config.T_max)
    if not train_samples or not val_samples:
        raise ValueError("fit needs nonempty training and validation splits")

    log_file = Path(log_path) if log_path is not None else None
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    dataset = ForecastDataset(train_samples, config.S, config.T_max)
    loader = make_loader(dataset, config.batch_size, shuffle=True, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    dtype = next(model.parameters()).dtype
    best_state = copy.deepcopy(model.state_dict())
    result = FitResult()

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        sums: Dict[str, float] = defaultdict(float)
        n_batches = 0
        for batch in loader:
            batch = batch.to(dtype)
            optimizer.zero_grad()
            losses, _ = compute_loss(model, batch, config)
            if not torch.isfinite(losses.total):
                model.load_state_dict(best_state)
                raise TrainingDiverged(
                    f"Non-finite loss at epoch {epoch}, step {result.steps + 1}; "
                    f"restored weights from epoch {result.best_epoch}",
                    result,
                )
            losses.total.backward()
            optimizer.step()
            model.reinitialize_collapsed_slots()
            result.steps += 1
            n_batches += 1
            for name, value in losses.as_dict().items():
                if value is not None:
                    sums[name] += value
            if max_steps is not None and result.steps >= max_steps:
                break

        val_mape, val_mae = evaluate_split(model, val_samples, config.S, config.T_max)
        entry: Dict[str, Any] = {"epoch": epoch, "steps": result.steps, "val_mape": val_mape, "val_mae": val_mae}
        entry.update({name: total / max(n_batches, 1) for name, total in sums.items()})
        result.history.append(entry)
        _append_log(log_file, entry)
        logger.info(f"Epoch {epoch}: loss {entry.get('total', math.nan):.6f}, val MAPE {val_mape:.4f}%")

        if stopper.step(val_mape, epoch):
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            result.best_val_mape = val_mape
        if stopper.should_stop:
            result.stopped_early = True
            logger.info(f"Early stopping at epoch {epoch}; best epoch {result.best_epoch}")
            break
        if max_steps is not None and result.steps >= max_steps:
            break

    model.load_state_dict(best_state)
    return result


# Checkpoints

def save_checkpoint(path: PathLike, model: DegradationForecaster,
                    result: Optional[FitResult] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": CHECKPOINT_HEADER,
        "config": model.config.to_dict(),
        "vocabulary": model.vocabulary,
        "state_dict": model.state_dict(),
        "epoch": result.best_epoch if result else None,
        "history": result.history if result else [],
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: PathLike, embedding_table: Optional[ExternalEmbeddingTable] = None
                    ) -> Tuple[DegradationForecaster, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("header") != CHECKPOINT_HEADER:
        raise ConfigError(f"{path} is not a {CHECKPOINT_HEADER} file")
    config = ModelConfig.from_dict(payload["config"])
    if config.llm_embedder and embedding_table is None:
        if not config.embedding_file:
            raise ConfigError("Checkpoint uses external embeddings but no embedding file is configured")
        embedding_table = ExternalEmbeddingTable.load(config.embedding_file, config.d_enc)
    model = DegradationForecaster(config, payload.get("vocabulary") or None, embedding_table)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# Gradient checks

@dataclass
class GradientCheckReport:
    group_errors: Dict[str, float]
    max_error: float
    tolerance: float
    passed: bool
    checked_entries: int
    skipped_entries: int

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor], tolerance: float,
                   step: float = 1e-5, max_entries: int = 64,
                   selection_fn: Optional[Callable[[], Any]] = None, seed: int = 0) -> GradientCheckReport:
    """
    Central finite differences against autograd, per parameter group.

    Groups larger than `max_entries` are checked on a seeded subsample.
    When `selection_fn` is given, entries whose perturbation changes its value
    (a discrete selection such as top-2 retrieval) are skipped. Never raises
    on a failed check; the report says whether it passed.
    """
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    reference = selection_fn() if selection_fn is not None else None
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for name, p in params
    }
    generator = torch.Generator().manual_seed(seed)
    group_errors: Dict[str, float] = {}
    checked = skipped = 0

    with torch.no_grad():
        for name, p in params:
            flat = p.data.view(-1)
            n = flat.numel()
            entries = range(n) if n <= max_entries else torch.randperm(n, generator=generator)[:max_entries].tolist()
            analytic_values, numeric_values = [], []
            for i in entries:
                original = float(flat[i])
                flat[i] = original + step
                plus = float(loss_fn())
                selection_plus = selection_fn() if selection_fn is not None else None
                flat[i] = original - step
                minus = float(loss_fn())
                selection_minus = selection_fn() if selection_fn is not None else None
                flat[i] = original
                if selection_fn is not None and (selection_plus != reference or selection_minus != reference):
                    skipped += 1
                    continue
                numeric_values.append((plus - minus) / (2.0 * step))
                analytic_values.append(float(analytic[name][i]))
                checked += 1
            group_errors[name] = _relative_error(np.array(analytic_values), np.array(numeric_values))

    max_error = max(group_errors.values(), default=0.0)
    passed = max_error < tolerance
    if not passed:
        worst = max(group_errors, key=group_errors.get) if group_errors else None
        logger.warning(f"Gradient check failed: max relative error {max_error:.3e} in {worst}")
    return GradientCheckReport(group_errors, max_error, tolerance, passed, checked, skipped)


def forecaster_objective(model: DegradationForecaster, batch: Batch, config: ModelConfig
                         ) -> Tuple[Callable[[], torch.Tensor], Callable[[], Any]]:
    """Total-loss closure plus the top-2 selection observed on its latest call."""
    state: Dict[str, Any] = {}

    def loss_fn() -> torch.Tensor:
        losses, output = compute_loss(model, batch, config)
        state["selection"] = None if output.retrieval is None else output.retrieval.indices.tolist()
        return losses.total

    def selection_fn() -> Any:
        return state.get("selection")

    return loss_fn, selection_fn


def check_forecaster_gradients(model: DegradationForecaster, batch: Batch, config: ModelConfig,
                               tolerance: float = 1e-3, step: float = 1e-5,
                               max_entries: int = 64) -> GradientCheckReport:
    """Gradient check of the total loss in 64-bit precision with dropout disabled."""
    model.double()
    model.eval()
    loss_fn, selection_fn = forecaster_objective(model, batch.to(torch.float64), config)
    return gradient_check(model, loss_fn, tolerance, step, max_entries, selection_fn)


# Random search

@dataclass(frozen=True)
class SearchSpace:
    lr_range: Tuple[float, float] = (2e-5, 2e-4)
    batch_size: Tuple[int, ...] = (64, 128)
    dropout_range: Tuple[float, float] = (0.05, 0.5)
    d: Tuple[int, ...] = (64, 128, 256)
    d_ff: Tuple[int, ...] = (32, 64, 128)
    d_ffs: Tuple[int, ...] = (32, 64, 128, 256)
    L_intra: Tuple[int, ...] = (2, 4)
    L_de: Tuple[int, ...] = (2, 4, 6, 8)
    s_bar: Tuple[int, ...] = (4, 8, 10, 12, 20, 50)
    N_mem: Tuple[int, ...] = (64, 96)
    P: Tuple[int, ...] = (10, 16, 20, 30)
    d_mem: Tuple[int, ...] = (128, 512)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, tuple(getattr(self, f.name)))

    def validate(self) -> List[Violation]:
        found: List[Violation] = []
        for f in dataclasses.fields(self):
            if not getattr(self, f.name):
                found.append(Violation(f.name, "must be nonempty"))
        for name in ("lr_range", "dropout_range"):
            bounds = getattr(self, name)
            if len(bounds) != 2 or not bounds[0] <= bounds[1]:
                found.append(Violation(name, "must be (low, high) with low <= high"))
        return found

    def sample(self, rng: np.random.Generator, L: int) -> Dict[str, Any]:
        kernels = [p for p in self.P if p <= L]
        if not kernels:
            raise ConfigError(f"No kernel size in {self.P} fits L={L}")

        def pick(options: Sequence[Any]) -> Any:
            return options[int(rng.integers(len(options)))]

        return {
            "lr": float(rng.uniform(*self.lr_range)),
            "batch_size": int(pick(self.batch_size)),
            "dropout": float(rng.uniform(*self.dropout_range)),
            "d": int(pick(self.d)),
            "d_ff": int(pick(self.d_ff)),
            "d_ffs": int(pick(self.d_ffs)),
            "L_intra": int(pick(self.L_intra)),
            "L_de": int(pick(self.L_de)),
            "s_bar": int(pick(self.s_bar)),
            "N_mem": int(pick(self.N_mem)),
            "P": int(pick(kernels)),
            "d_mem": int(pick(self.d_mem)),
        }


@dataclass
class SearchResult:
    best_index: int
    best_config: ModelConfig
    trials: List[Dict[str, Any]]


def random_search(space: SearchSpace, budget: int, seed: int,
                  train_samples: Sequence[ProcessedSample], val_samples: Sequence[ProcessedSample],
                  base_config: ModelConfig = ModelConfig(),
                  embedding_table: Optional[ExternalEmbeddingTable] = None,
                  max_steps: Optional[int] = None) -> SearchResult:
    """Uniform sampling over the space; lowest validation MAPE wins, ties to the earliest trial."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    conditions = [s.condition for s in train_samples]
    trials: List[Dict[str, Any]] = []
    best_index = -1
    best_config = base_config
    best_mape = math.inf
    for index in range(budget):
        params = space.sample(rng, base_config.L)
        config = base_config.replace(**params)
        violations = config.validate()
        if violations:
            raise ConfigError("Sampled configuration is invalid: " + "; ".join(str(v) for v in violations))
        model = build_model(config, conditions, embedding_table)
        result = fit(model, train_samples, val_samples, config, max_steps=max_steps)
        trials.append({"index": index, "params": params, "val_mape": result.best_val_mape})
        logger.info(f"Trial {index}: val MAPE {result.best_val_mape:.4f}%")
        if best_index < 0 or result.best_val_mape < best_mape:
            best_index, best_config, best_mape = index, config, result.best_val_mape
    return SearchResult(best_index=best_index, best_config=best_config, trials=trials)
