"""
Aging-condition-exclusive splits, metric reports, ablation runs, early-cycle
sweeps and case-study exports (attention, prototypes, differential voltage).
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.ndimage import uniform_filter1d

from .core import ModelConfig, PathLike, write_json
from .dataset import full_batch, predictable
from .embedder import ExternalEmbeddingTable, hashed_embedding_table, write_hashed_embedding_file
from .exceptions import ConditionLeakage, ConfigError, InsufficientConditions, InvalidSegment
from .metrics import BatteryScore, compute_metrics, score_persistence
from .model import DegradationForecaster, build_model, parameter_checksum, predict_samples
from .preprocess import ProcessedSample, denormalize_soh
from .train import TRAIN_LOG, fit

try:
    from PIL import Image
    PIL_AVAILABLE = True
except ImportError:
    PIL_AVAILABLE = False

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_MODES = ("random", "leave-one-out")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
LEAVE_ONE_OUT_VAL_FRACTION = 0.25
TOP_SOC_FRACTION = 0.25
DVA_WINDOW = 5
EMBEDDING_FILE = "condition_embeddings.json"
FLAG_NAMES = ("socview", "mdpm", "acdecoder", "acattention", "acquery", "llm_embedder")

ABLATION_VARIANTS: Dict[str, Dict[str, bool]] = {
    "full": {"llm_embedder": True},
    "no_socview": {"socview": False, "llm_embedder": True},
    "no_mdpm": {"mdpm": False, "llm_embedder": True},
    "no_acdecoder": {"acdecoder": False, "llm_embedder": True},
    "no_acattention": {"acattention": False, "llm_embedder": True},
    "no_acquery": {"acquery": False, "llm_embedder": True},
    "no_llm": {"llm_embedder": False},
}


# Splits

@dataclass
class SplitPlan:
    assignment: Dict[str, str]  # condition key -> split name
    seed: int
    ratios: Tuple[float, float, float]
    mode: str = "random"
    batteries: Dict[str, List[str]] = field(default_factory=dict)  # split name -> battery ids

    def conditions(self, split: str) -> List[str]:
        return sorted(k for k, s in self.assignment.items() if s == split)

    def select(self, samples: Sequence[ProcessedSample], split: str) -> List[ProcessedSample]:
        wanted = set(self.batteries.get(split, ()))
        return [s for s in samples if s.battery_id in wanted]

    def check_exclusivity(self, samples: Sequence[ProcessedSample]):
        """Raise ConditionLeakage if a condition key shows up in more than one split."""
        keys = {split: {s.condition.key for s in self.select(samples, split)} for split in SPLITS}
        for split in SPLITS:
            for key in keys[split]:
                if self.assignment.get(key) != split:
                    raise ConditionLeakage(f"Battery condition {key} in {split} is assigned to {self.assignment.get(key)}")
        for i, first in enumerate(SPLITS):
            for second in SPLITS[i + 1:]:
                shared = keys[first] & keys[second]
                if shared:
                    raise ConditionLeakage(f"Conditions shared by {first} and {second}: {sorted(shared)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "assignment": dict(sorted(self.assignment.items())),
            "seed": self.seed,
            "ratios": list(self.ratios),
            "mode": self.mode,
            "batteries": {k: sorted(v) for k, v in sorted(self.batteries.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitPlan":
        return cls(
            assignment=dict(data["assignment"]),
            seed=int(data["seed"]),
            ratios=tuple(data["ratios"]),
            mode=data.get("mode", "random"),
            batteries={k: list(v) for k, v in data.get("batteries", {}).items()},
        )


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _battery_lists(samples: Sequence[ProcessedSample], assignment: Dict[str, str]) -> Dict[str, List[str]]:
    batteries: Dict[str, List[str]] = {split: [] for split in SPLITS}
    for sample in samples:
        batteries[assignment[sample.condition.key]].append(sample.battery_id)
    return {split: sorted(ids) for split, ids in batteries.items()}


def split_by_condition(samples: Sequence[ProcessedSample], ratios: Sequence[float] = DEFAULT_RATIOS,
                       seed: int = 0, mode: str = "random", held_out: Optional[str] = None) -> SplitPlan:
    """
    Shuffle condition keys by seed and assign whole conditions to splits.

    random: sizes are the rounded ratio shares, at least one condition each,
    filled train, val, test in shuffled order. leave-one-out: one condition
    is the test set (`held_out`, or the first shuffled key), and
    ceil(25%) of the remaining go to validation.
    """
    if mode not in SPLIT_MODES:
        raise ConfigError(f"Unknown split mode: {mode}")
    keys = sorted({s.condition.key for s in samples})
    n = len(keys)
    if n < len(SPLITS):
        raise InsufficientConditions(f"Need at least {len(SPLITS)} conditions, found {n}")
    rng = np.random.default_rng(seed)
    shuffled = [keys[i] for i in rng.permutation(n)]

    if mode == "random":
        if len(ratios) != 3 or any(r <= 0 for r in ratios):
            raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
        total = float(sum(ratios))
        n_val = max(1, _round_half_up(n * ratios[1] / total))
        n_test = max(1, _round_half_up(n * ratios[2] / total))
        n_train = n - n_val - n_test
        if n_train < 1:
            raise InsufficientConditions(f"{n} conditions cannot fill a {tuple(ratios)} split")
        order = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        assignment = dict(zip(shuffled, order))
    else:
        if held_out is None:
            held_out = shuffled[0]
        if held_out not in keys:
            raise ConfigError(f"Held-out condition {held_out} is not in the data")
        remaining = [k for k in shuffled if k != held_out]
        n_val = math.ceil(LEAVE_ONE_OUT_VAL_FRACTION * len(remaining))
        assignment = {held_out: "test"}
        assignment.update({k: "val" for k in remaining[:n_val]})
        assignment.update({k: "train" for k in remaining[n_val:]})

    plan = SplitPlan(assignment, seed, tuple(float(r) for r in ratios), mode, _battery_lists(samples, assignment))
    logger.info(
        f"Split {n} conditions ({mode}, seed {seed}): "
        + ", ".join(f"{s} {len(plan.conditions(s))}" for s in SPLITS)
    )
    return plan


def leave_one_out_folds(samples: Sequence[ProcessedSample], seed: int = 0) -> List[SplitPlan]:
    """One leave-one-condition-out plan per condition, in key order."""
    keys = sorted({s.condition.key for s in samples})
    return [split_by_condition(samples, seed=seed, mode="leave-one-out", held_out=k) for k in keys]


def subsample_training(plan: SplitPlan, fraction: float, seed: int = 0) -> SplitPlan:
    """Keep ceil(fraction * n) training batteries; validation and test stay untouched."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train = sorted(plan.batteries.get("train", []))
    keep = math.ceil(fraction * len(train))
    rng = np.random.default_rng(seed)
    chosen = sorted(train[i] for i in rng.choice(len(train), size=keep, replace=False)) if train else []
    batteries = dict(plan.batteries)
    batteries["train"] = chosen
    return dataclasses.replace(plan, batteries=batteries)


# Reports

def config_flags(config: ModelConfig) -> Dict[str, bool]:
    return {name: bool(getattr(config, name)) for name in FLAG_NAMES}


@dataclass
class MetricReport:
    """
    Per-battery scores plus split-level macro means. Summary statistics are
    mean and population standard deviation across splits.
    """

    per_battery: List[BatteryScore]
    split_means: List[Dict[str, float]]
    S: int
    flags: Dict[str, bool]
    baseline: List[BatteryScore] = field(default_factory=list)
    variant: Optional[str] = None
    checksum: Optional[str] = None

    def _stat(self, key: str, fn: Any) -> float:
        values = [m[key] for m in self.split_means]
        return float(fn(values)) if values else math.nan

    @property
    def mape_mean(self) -> float:
        return self._stat("mape", np.mean)

    @property
    def mape_sd(self) -> float:
        return self._stat("mape", np.std)

    @property
    def mae_mean(self) -> float:
        return self._stat("mae", np.mean)

    @property
    def mae_sd(self) -> float:
        return self._stat("mae", np.std)

    @property
    def baseline_mape(self) -> float:
        return float(np.mean([b.mape for b in self.baseline])) if self.baseline else math.nan

    @classmethod
    def combine(cls, reports: Sequence["MetricReport"], variant: Optional[str] = None,
                checksum: Optional[str] = None) -> "MetricReport":
        """Concatenate splits; battery scores are renumbered to their split in the result."""
        if not reports:
            raise ValueError("No reports to combine")
        per_battery: List[BatteryScore] = []
        baseline: List[BatteryScore] = []
        offset = 0
        for report in reports:
            per_battery.extend(dataclasses.replace(s, split=s.split + offset) for s in report.per_battery)
            baseline.extend(dataclasses.replace(s, split=s.split + offset) for s in report.baseline)
            offset += len(report.split_means)
        return cls(
            per_battery=per_battery,
            split_means=[m for r in reports for m in r.split_means],
            S=reports[0].S,
            flags=reports[0].flags,
            baseline=baseline,
            variant=variant if variant is not None else reports[0].variant,
            checksum=checksum if checksum is not None else reports[0].checksum,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "S": self.S,
            "flags": self.flags,
            "checksum": self.checksum,
            "mape_mean": self.mape_mean,
            "mape_sd": self.mape_sd,
            "mae_mean": self.mae_mean,
            "mae_sd": self.mae_sd,
            "baseline_mape": self.baseline_mape,
            "split_means": self.split_means,
            "per_battery": [s.to_dict() for s in self.per_battery],
            "baseline": [s.to_dict() for s in self.baseline],
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([s.to_dict() for s in self.per_battery], columns=["battery_id", "split", "mape", "mae"])
        if self.baseline:
            baseline = pd.DataFrame([s.to_dict() for s in self.baseline])
            baseline = baseline.rename(columns={"mape": "baseline_mape", "mae": "baseline_mae"})
            frame = frame.merge(baseline, on=["battery_id", "split"], how="left")
        return frame


def evaluate_model(model: DegradationForecaster, samples: Sequence[ProcessedSample],
                   S: Optional[int] = None, T_max: Optional[int] = None) -> MetricReport:
    """Score every predictable sample; one split-level macro mean."""
    config = model.config
    S = config.S if S is None else S
    T_max = config.T_max if T_max is None else T_max
    usable = predictable(samples, S, T_max)
    scores: List[BatteryScore] = []
    baseline: List[BatteryScore] = []
    if usable:
        forecasts = predict_samples(model, usable, S, T_max)
        for forecast, sample in zip(forecasts, usable):
            mape, mae = compute_metrics(forecast, sample.view(S, T_max)[1])
            scores.append(BatteryScore(sample.battery_id, mape, mae))
            baseline.append(score_persistence(sample, S, T_max))
    split_means = []
    if scores:
        split_means.append({
            "mape": float(np.mean([s.mape for s in scores])),
            "mae": float(np.mean([s.mae for s in scores])),
        })
    else:
        logger.warning(f"No battery in the evaluation set has cycles to predict after cycle {S}")
    return MetricReport(per_battery=scores, split_means=split_means, S=S,
                        flags=config_flags(config), baseline=baseline)


# Ablation

def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"Unknown ablation variant: {variant}")
    return base.replace(**ABLATION_VARIANTS[variant])


def prepare_embedding_table(config: ModelConfig, samples: Sequence[ProcessedSample],
                            workdir: Optional[PathLike] = None
                            ) -> Tuple[ModelConfig, Optional[ExternalEmbeddingTable]]:
    """
    Resolve the external embedding table for configs that use it. Without an
    embedding file, hashed prompt embeddings are generated for every condition
    in `samples`; with a workdir they are written there and the returned config
    points at the file.
    """
    if not config.llm_embedder:
        return config, None
    if config.embedding_file:
        return config, ExternalEmbeddingTable.load(config.embedding_file, config.d_enc)
    conditions = [s.condition for s in samples]
    if workdir is None:
        return config, hashed_embedding_table(conditions, config.d_enc)
    target = write_hashed_embedding_file(conditions, config.d_enc, Path(workdir) / EMBEDDING_FILE)
    return config.replace(embedding_file=str(target)), ExternalEmbeddingTable.load(target, config.d_enc)


def train_and_evaluate(config: ModelConfig, samples: Sequence[ProcessedSample], plan: SplitPlan,
                       embedding_table: Optional[ExternalEmbeddingTable] = None,
                       max_steps: Optional[int] = None,
                       log_path: Optional[PathLike] = None) -> Tuple[DegradationForecaster, MetricReport]:
    plan.check_exclusivity(samples)
    train = plan.select(samples, "train")
    val = plan.select(samples, "val")
    test = plan.select(samples, "test")
    model = build_model(config, [s.condition for s in train], embedding_table)
    fit(model, train, val, config, log_path=log_path, max_steps=max_steps)
    return model, evaluate_model(model, test)


def run_ablation(variant: str, base_config: ModelConfig, samples: Sequence[ProcessedSample],
                 plans: Sequence[SplitPlan], max_steps: Optional[int] = None,
                 workdir: Optional[PathLike] = None) -> MetricReport:
    """Train and test one ablation variant on every split; reports combine across splits."""
    config = variant_config(base_config, variant)
    root = Path(workdir) if workdir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    config, table = prepare_embedding_table(config, samples, root)
    reports = []
    checksum = None
    for index, plan in enumerate(plans):
        log_path = root / variant / f"split-{index}" / TRAIN_LOG if root is not None else None
        if log_path is not None and log_path.exists():
            log_path.unlink()
        model, report = train_and_evaluate(config, samples, plan, table, max_steps, log_path)
        if checksum is None:
            checksum = parameter_checksum(model)
        reports.append(report)
        logger.info(f"Ablation {variant}, split {index}: MAPE {report.mape_mean:.4f}%")
    return MetricReport.combine(reports, variant=variant, checksum=checksum)


def sweep_early_cycles(model: DegradationForecaster, samples: Sequence[ProcessedSample],
                       S_values: Sequence[int], T_max: Optional[int] = None) -> Dict[int, MetricReport]:
    """One report per number of usable early cycles."""
    reports = {}
    for S in S_values:
        if not 1 <= S <= model.config.S_max:
            raise ValueError(f"S must lie in 1..{model.config.S_max}, got {S}")
        reports[S] = evaluate_model(model, samples, S, T_max)
    return reports


# Interpretability

def compute_dva(voltage: Sequence[float], capacity: Sequence[float], soc: Sequence[float],
                window: int = DVA_WINDOW) -> pd.DataFrame:
    """dV/dQ by central differences, moving-average smoothed, on the given SOC grid."""
    voltage = np.asarray(voltage, dtype=np.float64)
    capacity = np.asarray(capacity, dtype=np.float64)
    soc = np.asarray(soc, dtype=np.float64)
    if not (voltage.shape == capacity.shape == soc.shape) or voltage.ndim != 1:
        raise InvalidSegment("voltage, capacity and soc must be 1-D and equally long")
    if len(capacity) < 2:
        raise InvalidSegment("Segment needs at least two points")
    steps = np.diff(capacity)
    if not (np.all(steps > 0) or np.all(steps < 0)):
        raise InvalidSegment("Capacity is not strictly monotone over the segment")
    dv_dq = uniform_filter1d(np.gradient(voltage, capacity), size=window, mode="nearest")
    return pd.DataFrame({"soc": soc, "dv_dq": dv_dq})


@dataclass
class CaseStudy:
    battery_id: str
    S: int
    temporal_mass: float
    soc_mass: float
    top_soc_tokens: List[Dict[str, Any]]
    prototypes: List[Dict[str, Any]]
    files: Dict[str, str] = field(default_factory=dict)
    metrics: Optional[Dict[str, float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _soc_token_ranges(X_last: np.ndarray, M: int, P: int) -> List[Tuple[float, float, str]]:
    half = X_last.shape[0] // 2
    ranges = []
    for m in range(M):
        start, stop = m * P, (m + 1) * P
        soc = X_last[start:stop, 3]
        segment = "charge" if stop <= half else "discharge" if start >= half else "mixed"
        ranges.append((float(soc.min()), float(soc.max()), segment))
    return ranges


def _attention_image(weights: np.ndarray, path: Path, scale: int = 8) -> Optional[Path]:
    if not PIL_AVAILABLE:
        logger.debug("PIL not available; skipping attention image")
        return None
    peak = float(weights.max()) or 1.0
    pixels = np.clip(weights / peak * 255.0, 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels)
    image = image.resize((pixels.shape[1] * scale, pixels.shape[0] * scale), Image.NEAREST)
    image.save(path)
    return path


@torch.no_grad()
def export_case_study(model: DegradationForecaster, sample: ProcessedSample, out_dir: PathLike,
                      S: Optional[int] = None) -> CaseStudy:
    """
    Write forecast, prototype, attention and DVA tables for one battery,
    plus a case_study.json summary. Attention is the final decoder layer's
    cross-attention averaged over heads and queries.
    """
    config = model.config
    if config.L_de < 1:
        raise ConfigError("Case studies read cross-attention and need L_de >= 1")
    S = min(config.S if S is None else S, sample.inputs.S)
    T_max = config.T_max
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, str] = {}

    model.eval()
    dtype = next(model.parameters()).dtype
    inputs = sample.model_input(S)
    has_target = bool(predictable([sample], S, T_max))
    if has_target:
        batch = full_batch([sample], S, T_max).to(dtype)
        output = model.forward_batch(batch)
    else:
        output = model(
            torch.as_tensor(inputs.X[None], dtype=dtype),
            torch.as_tensor(inputs.X_f[None], dtype=dtype),
            torch.as_tensor(inputs.cycle_mask[None]).bool(),
            [sample.condition],
        )

    cycles = np.arange(1, T_max + 1)
    forecast = denormalize_soh(output.y_hat[0].double().numpy(), sample.tau)
    truth = np.full(T_max, np.nan)
    observed = min(sample.trajectory.n_cycles, T_max)
    truth[:observed] = sample.trajectory.soh[:observed]
    region = np.zeros(T_max, dtype=bool)
    metrics = None
    if has_target:
        target = sample.target(S, T_max)
        region = target.mask.astype(bool)
        mape, mae = compute_metrics(output.y_hat[0].double().numpy(), target)
        metrics = {"mape": mape, "mae": mae}
    frame = pd.DataFrame({"cycle": cycles, "forecast_soh": forecast, "true_soh": truth,
                          "prediction_region": region})
    frame.to_csv(out / "forecast.csv", index=False)
    files["forecast"] = "forecast.csv"

    prototypes: List[Dict[str, Any]] = []
    if output.retrieval is not None:
        indices = output.retrieval.indices[0].tolist()
        alpha = output.retrieval.alpha[0].tolist()
        curves = denormalize_soh(model.decode_prototypes(indices).double().numpy(), sample.tau)
        table = {"cycle": cycles}
        for slot, weight, curve in zip(indices, alpha, curves):
            table[f"slot_{slot}"] = curve
            prototypes.append({"slot": int(slot), "alpha": float(weight)})
        pd.DataFrame(table).to_csv(out / "prototypes.csv", index=False)
        files["prototypes"] = "prototypes.csv"

    cross = output.decoder.cross_attention[0].double().numpy()  # [h, s_bar, n_tokens]
    weights = cross.mean(axis=(0, 1))
    n_temporal = config.S_max
    M = weights.shape[0] - n_temporal
    views = ["temporal"] * n_temporal + ["soc"] * M
    order = np.argsort(-weights, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    cumulative = np.empty_like(weights)
    cumulative[order] = np.cumsum(weights[order])
    soc_ranges = _soc_token_ranges(inputs.X[S - 1], M, config.P) if M else []
    attention = pd.DataFrame({
        "token": np.arange(len(weights)),
        "view": views,
        "weight": weights,
        "rank": rank,
        "cumulative_weight": cumulative,
        "soc_low": [np.nan] * n_temporal + [r[0] for r in soc_ranges],
        "soc_high": [np.nan] * n_temporal + [r[1] for r in soc_ranges],
    })
    attention.to_csv(out / "attention.csv", index=False)
    files["attention"] = "attention.csv"
    if _attention_image(cross.mean(axis=1), out / "attention.png"):
        files["attention_image"] = "attention.png"

    top_soc: List[Dict[str, Any]] = []
    if M:
        soc_weights = weights[n_temporal:]
        k = math.ceil(TOP_SOC_FRACTION * M)
        for m in np.argsort(-soc_weights, kind="stable")[:k]:
            low, high, segment = soc_ranges[m]
            top_soc.append({"token": int(m), "weight": float(soc_weights[m]),
                            "soc_low": low, "soc_high": high, "segment": segment})

    half = config.L // 2
    last = inputs.X[S - 1]
    try:
        compute_dva(last[:half, 0], last[:half, 2], last[:half, 3]).to_csv(out / "dva.csv", index=False)
        files["dva"] = "dva.csv"
    except InvalidSegment as e:
        logger.warning(f"Skipping DVA for {sample.battery_id}: {e}")

    study = CaseStudy(
        battery_id=sample.battery_id,
        S=S,
        temporal_mass=float(weights[:n_temporal].sum()),
        soc_mass=float(weights[n_temporal:].sum()),
        top_soc_tokens=top_soc,
        prototypes=prototypes,
        files=files,
        metrics=metrics,
    )
    write_json(study.to_dict(), out / "case_study.json")
    logger.info(f"Wrote case study for {sample.battery_id} to {out}")
    return study
