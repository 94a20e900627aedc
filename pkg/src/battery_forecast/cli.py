#!/usr/bin/env python3
"""
battery-forecast command line.

Each subcommand runs one pipeline stage, writes its artifacts plus a
manifest.json into --out, and records the run in the results store.
Compute runs in a worker thread; the event loop owns the store connection.
"""

import argparse
import asyncio
import dataclasses
import functools
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from . import __version__
from .core import ModelConfig, load_config, load_record, write_json
from .dataset import load_samples, sample_path, save_sample
from .embedder import write_hashed_embedding_file
from .evaluation import (
    ABLATION_VARIANTS,
    EMBEDDING_FILE,
    SPLIT_MODES,
    MetricReport,
    SplitPlan,
    evaluate_model,
    export_case_study,
    leave_one_out_folds,
    prepare_embedding_table,
    run_ablation,
    split_by_condition,
    subsample_training,
    sweep_early_cycles,
)
from .exceptions import BatteryForecastError, ConditionLeakage, ConfigError
from .model import build_model
from .preprocess import (
    Exclusion,
    ProcessedSample,
    SmoothingParams,
    collect_training_deltas,
    preprocess_record,
    thresholds_from_deltas,
)
from .store import ResultStore
from .synthgen import TRUTH_MANIFEST, load_spec, write_dataset
from .train import TRAIN_LOG, SearchSpace, fit, load_checkpoint, random_search, save_checkpoint

logger = logging.getLogger("battery-forecast")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INTEGRITY = 4

MANIFEST_NAME = "manifest.json"
EXCLUSIONS_NAME = "exclusions.json"
SPLIT_NAME = "split.json"
CHECKPOINT_NAME = "checkpoint.pt"
NON_RECORD_FILES = (TRUTH_MANIFEST, MANIFEST_NAME, EXCLUSIONS_NAME)


def configure_logging(verbose: bool = False):
    # stdout carries command summaries; logs go to stderr
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def git_stamp() -> Optional[str]:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


@dataclass
class RunManifest:
    command: str
    config_hash: Optional[str]
    seed: Optional[int]
    inputs: List[str]
    outputs: List[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__
    git: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: Path) -> Path:
        return write_json(self.to_dict(), out_dir / MANIFEST_NAME)


def record_paths(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"Record directory not found: {directory}")
    return sorted(p for p in directory.glob("*.json") if p.name not in NON_RECORD_FILES)


def _relative(paths: Sequence[Path], root: Path) -> List[str]:
    out = []
    for p in paths:
        try:
            out.append(str(Path(p).relative_to(root)))
        except ValueError:
            out.append(str(p))
    return sorted(out)


# Blocking stage runners (executed off the event loop)

def run_preprocess(records_dir: Path, out_dir: Path, params: SmoothingParams, config: ModelConfig,
                   seed: int, split_mode: str) -> Tuple[List[Path], List[Exclusion]]:
    """
    Preprocess every record file. Unreadable records and per-battery failures
    are logged and listed as exclusions; the run continues.
    """
    records = []
    exclusions: List[Exclusion] = []
    for path in record_paths(records_dir):
        try:
            records.append(load_record(path))
        except (BatteryForecastError, KeyError, TypeError, ValueError) as e:
            logger.error(f"Cannot read record {path.name}: {e}")
            exclusions.append(Exclusion(path.stem, f"unreadable record: {e}"))

    training_deltas = None
    if params.onset_method == "percentile" and params.gamma_plus is None:
        plan = split_by_condition(records, seed=seed, mode=split_mode)
        training_deltas = collect_training_deltas(plan.select(records, "train"), params)
        # Fails the whole run before any battery is touched.
        gamma_plus, gamma_minus = thresholds_from_deltas(training_deltas)
        logger.info(f"Percentile thresholds from {len(training_deltas)} training deltas: "
                    f"gamma_plus={gamma_plus:.5f} gamma_minus={gamma_minus:.5f}")

    written: List[Path] = []
    for record in records:
        try:
            result = preprocess_record(record, params, config, training_deltas)
        except BatteryForecastError as e:
            result = Exclusion(record.battery_id, f"{type(e).__name__}: {e}")
        if isinstance(result, Exclusion):
            logger.warning(f"Excluded {result.battery_id}: {result.reason}")
            exclusions.append(result)
            continue
        written.append(save_sample(result, sample_path(out_dir, result.battery_id)))

    exclusions.sort(key=lambda e: e.battery_id)
    write_json([{"battery_id": e.battery_id, "reason": e.reason} for e in exclusions],
               out_dir / EXCLUSIONS_NAME)
    if not written:
        raise BatteryForecastError(f"All {len(exclusions)} records failed preprocessing")
    logger.info(f"Preprocessed {len(written)} batteries, excluded {len(exclusions)}")
    return written, exclusions


def make_plan(samples: Sequence[ProcessedSample], args: argparse.Namespace) -> SplitPlan:
    if getattr(args, "plan", None):
        plan = SplitPlan.from_dict(json.loads(Path(args.plan).read_text()))
    else:
        plan = split_by_condition(samples, seed=args.seed, mode=args.split)
    if args.fraction < 1.0:
        plan = subsample_training(plan, args.fraction, seed=args.seed)
    return plan


def run_train(samples: List[ProcessedSample], plan: SplitPlan, config: ModelConfig, out_dir: Path,
              max_steps: Optional[int]) -> Tuple[ModelConfig, Dict[str, Any]]:
    plan.check_exclusivity(samples)
    train = plan.select(samples, "train")
    val = plan.select(samples, "val")
    config, table = prepare_embedding_table(config, samples, out_dir)
    model = build_model(config, [s.condition for s in train], table)
    log_path = out_dir / TRAIN_LOG
    if log_path.exists():
        log_path.unlink()
    result = fit(model, train, val, config, log_path=log_path, max_steps=max_steps)
    save_checkpoint(out_dir / CHECKPOINT_NAME, model, result)
    write_json(plan.to_dict(), out_dir / SPLIT_NAME)
    summary = {"best_epoch": result.best_epoch, "best_val_mape": result.best_val_mape,
               "steps": result.steps, "stopped_early": result.stopped_early}
    return config, summary


def _sibling_plan(checkpoint: Path) -> Optional[SplitPlan]:
    path = checkpoint.parent / SPLIT_NAME
    if not path.exists():
        return None
    return SplitPlan.from_dict(json.loads(path.read_text()))


def run_evaluate(checkpoint: Path, samples: List[ProcessedSample], plan: Optional[SplitPlan],
                 s_cycles: Optional[List[int]], out_dir: Path) -> Tuple[ModelConfig, MetricReport]:
    model, _ = load_checkpoint(checkpoint)
    if plan is not None:
        plan.check_exclusivity(samples)
        samples = plan.select(samples, "test")
    report = evaluate_model(model, samples)
    write_json(report.to_dict(), out_dir / "metrics.json")
    report.to_frame().to_csv(out_dir / "metrics.csv", index=False)
    if s_cycles:
        sweep = sweep_early_cycles(model, samples, s_cycles)
        write_json({str(S): r.to_dict() for S, r in sweep.items()}, out_dir / "sweep.json")
        pd.DataFrame([
            {"S": S, "mape_mean": r.mape_mean, "mae_mean": r.mae_mean, "baseline_mape": r.baseline_mape,
             "batteries": len(r.per_battery)}
            for S, r in sweep.items()
        ]).to_csv(out_dir / "sweep.csv", index=False)
    return model.config, report


def run_ablate(samples: List[ProcessedSample], config: ModelConfig, variants: List[str],
               args: argparse.Namespace, out_dir: Path) -> Dict[str, MetricReport]:
    if args.split == "leave-one-out":
        plans = leave_one_out_folds(samples, seed=args.seed)
    else:
        plans = [split_by_condition(samples, seed=args.seed + r) for r in range(args.repeats)]
    if args.fraction < 1.0:
        plans = [subsample_training(p, args.fraction, seed=args.seed) for p in plans]
    reports = {}
    for variant in variants:
        report = run_ablation(variant, config, samples, plans, max_steps=args.max_steps, workdir=out_dir)
        write_json(report.to_dict(), out_dir / variant / "report.json")
        reports[variant] = report
    pd.DataFrame([
        {"variant": v, "mape_mean": r.mape_mean, "mape_sd": r.mape_sd, "mae_mean": r.mae_mean,
         "mae_sd": r.mae_sd, "baseline_mape": r.baseline_mape, "checksum": r.checksum}
        for v, r in reports.items()
    ]).to_csv(out_dir / "ablation.csv", index=False)
    return reports


def run_inspect(checkpoint: Path, samples: List[ProcessedSample], battery_id: str,
                S: Optional[int], out_dir: Path) -> Tuple[ModelConfig, Dict[str, Any]]:
    model, _ = load_checkpoint(checkpoint)
    matches = [s for s in samples if s.battery_id == battery_id]
    if not matches:
        raise FileNotFoundError(f"No processed sample for battery {battery_id}")
    study = export_case_study(model, matches[0], out_dir, S)
    return model.config, study.to_dict()


def run_search(samples: List[ProcessedSample], config: ModelConfig, args: argparse.Namespace,
               out_dir: Path) -> Dict[str, Any]:
    space = load_config(SearchSpace, args.space)
    plan = make_plan(samples, args)
    plan.check_exclusivity(samples)
    config, table = prepare_embedding_table(config, samples, out_dir)
    result = random_search(space, args.budget, args.seed, plan.select(samples, "train"),
                           plan.select(samples, "val"), config, table, max_steps=args.max_steps)
    write_json(result.best_config.to_dict(), out_dir / "best_config.json")
    write_json(result.trials, out_dir / "trials.json")
    return {"best_index": result.best_index, "best_val_mape": result.trials[result.best_index]["val_mape"]}


class ForecastCLI:
    """Dispatches one parsed command; owns the results-store connection."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.store: Optional[ResultStore] = None
        # (report, variant) pairs to store with the manifest once the command finishes
        self._reports: List[Tuple[MetricReport, Optional[str]]] = []

    async def initialize(self):
        if not self.args.no_store:
            self.store = ResultStore(self.args.store)
            await self.store.connect()

    async def shutdown(self):
        if self.store:
            await self.store.close()
            self.store = None

    async def _blocking(self, fn: Callable[..., Any], *args: Any) -> Any:
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, functools.partial(fn, *args))

    async def _record(self, manifest: RunManifest, report: Optional[MetricReport] = None,
                      variant: Optional[str] = None) -> Optional[int]:
        if self.store is None:
            return None
        data = manifest.to_dict()
        if variant is not None:
            data["variant"] = variant
        run_id = await self.store.add_run(data, variant)
        if report is not None:
            await self.store.add_metrics(run_id, report)
        return run_id

    def _out_dir(self) -> Path:
        out = Path(self.args.out)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _model_config(self) -> ModelConfig:
        return load_config(ModelConfig, self.args.config)

    async def handle_command(self) -> Dict[str, Any]:
        command = self.args.command
        logger.debug(f"Handling command: {command}")
        started = time.perf_counter()
        if command == "synth":
            manifest, summary = await self.cmd_synth()
        elif command == "embed":
            manifest, summary = await self.cmd_embed()
        elif command == "preprocess":
            manifest, summary = await self.cmd_preprocess()
        elif command == "train":
            manifest, summary = await self.cmd_train()
        elif command == "evaluate":
            manifest, summary = await self.cmd_evaluate()
        elif command == "ablate":
            manifest, summary = await self.cmd_ablate()
        elif command == "inspect":
            manifest, summary = await self.cmd_inspect()
        elif command == "search":
            manifest, summary = await self.cmd_search()
        elif command == "runs":
            return await self.cmd_runs()
        else:
            raise ConfigError(f"Unknown command: {command}")
        manifest.wall_time_s = round(time.perf_counter() - started, 3)
        manifest.git = git_stamp()
        out = Path(self.args.out)
        manifest.outputs.append(MANIFEST_NAME)
        manifest.outputs.sort()
        manifest.write(out)
        if self._reports:
            for report, variant in self._reports:
                await self._record(manifest, report, variant)
        else:
            await self._record(manifest)
        summary["manifest"] = str(out / MANIFEST_NAME)
        return summary

    async def cmd_synth(self) -> Tuple[RunManifest, Dict[str, Any]]:
        spec = load_spec(self.args.config)
        if self.args.seed is not None:
            spec = dataclasses.replace(spec, seed=self.args.seed)
        out = self._out_dir()
        written = await self._blocking(write_dataset, spec, out)
        manifest = RunManifest("synth", None, spec.seed, [str(self.args.config)] if self.args.config else [],
                               _relative(written, out))
        return manifest, {"batteries": spec.n_batteries, "out": str(out)}

    async def cmd_embed(self) -> Tuple[RunManifest, Dict[str, Any]]:
        config = self._model_config()
        samples = await self._blocking(load_samples, self.args.data)
        out = self._out_dir()
        written = await self._blocking(write_hashed_embedding_file, [s.condition for s in samples],
                                       config.d_enc, out / EMBEDDING_FILE)
        manifest = RunManifest("embed", config.config_hash(), None, [str(self.args.data)], _relative([written], out))
        return manifest, {"embedding_file": str(written)}

    async def cmd_preprocess(self) -> Tuple[RunManifest, Dict[str, Any]]:
        config = self._model_config()
        params = load_config(SmoothingParams, self.args.smoothing)
        out = self._out_dir()
        seed = self.args.seed if self.args.seed is not None else 0
        written, exclusions = await self._blocking(run_preprocess, Path(self.args.records), out, params,
                                                   config, seed, self.args.split)
        manifest = RunManifest("preprocess", config.config_hash(), seed, [str(self.args.records)],
                               _relative(written + [out / EXCLUSIONS_NAME], out))
        return manifest, {"samples": len(written), "excluded": len(exclusions)}

    async def cmd_train(self) -> Tuple[RunManifest, Dict[str, Any]]:
        config = self._model_config()
        self.args.seed = self.args.seed if self.args.seed is not None else config.seed
        samples = await self._blocking(load_samples, self.args.data)
        plan = make_plan(samples, self.args)
        out = self._out_dir()
        config, summary = await self._blocking(run_train, samples, plan, config, out, self.args.max_steps)
        outputs = [CHECKPOINT_NAME, SPLIT_NAME, TRAIN_LOG]
        if config.llm_embedder and Path(config.embedding_file or "").parent == out:
            outputs.append(EMBEDDING_FILE)
        manifest = RunManifest("train", config.config_hash(), self.args.seed, [str(self.args.data)], outputs)
        return manifest, summary

    async def cmd_evaluate(self) -> Tuple[RunManifest, Dict[str, Any]]:
        checkpoint = Path(self.args.checkpoint)
        if not checkpoint.exists():
            raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
        samples = await self._blocking(load_samples, self.args.data)
        if self.args.plan:
            plan = SplitPlan.from_dict(json.loads(Path(self.args.plan).read_text()))
        else:
            plan = _sibling_plan(checkpoint)
        out = self._out_dir()
        config, report = await self._blocking(run_evaluate, checkpoint, samples, plan, self.args.s_cycles, out)
        outputs = ["metrics.csv", "metrics.json"] + (["sweep.csv", "sweep.json"] if self.args.s_cycles else [])
        manifest = RunManifest("evaluate", config.config_hash(), plan.seed if plan else None,
                               [str(checkpoint), str(self.args.data)], outputs)
        self._reports.append((report, None))
        return manifest, {"mape": report.mape_mean, "mae": report.mae_mean, "baseline_mape": report.baseline_mape,
                          "batteries": len(report.per_battery)}

    async def cmd_ablate(self) -> Tuple[RunManifest, Dict[str, Any]]:
        config = self._model_config()
        self.args.seed = self.args.seed if self.args.seed is not None else config.seed
        variants = self.args.variant or list(ABLATION_VARIANTS)
        unknown = [v for v in variants if v not in ABLATION_VARIANTS]
        if unknown:
            raise ConfigError(f"Unknown ablation variant(s): {', '.join(unknown)}")
        samples = await self._blocking(load_samples, self.args.data)
        out = self._out_dir()
        reports = await self._blocking(run_ablate, samples, config, variants, self.args, out)
        outputs = ["ablation.csv"] + [f"{v}/report.json" for v in variants]
        manifest = RunManifest("ablate", config.config_hash(), self.args.seed, [str(self.args.data)], outputs)
        self._reports.extend((report, variant) for variant, report in reports.items())
        return manifest, {v: {"mape": r.mape_mean, "mape_sd": r.mape_sd} for v, r in reports.items()}

    async def cmd_inspect(self) -> Tuple[RunManifest, Dict[str, Any]]:
        checkpoint = Path(self.args.checkpoint)
        if not checkpoint.exists():
            raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
        samples = await self._blocking(load_samples, self.args.data)
        out = self._out_dir()
        S = self.args.s_cycles[0] if self.args.s_cycles else None
        config, study = await self._blocking(run_inspect, checkpoint, samples, self.args.battery, S, out)
        outputs = sorted(study["files"].values()) + ["case_study.json"]
        manifest = RunManifest("inspect", config.config_hash(), None, [str(checkpoint), str(self.args.data)], outputs)
        return manifest, {"temporal_mass": study["temporal_mass"], "soc_mass": study["soc_mass"],
                          "top_soc_tokens": [t["token"] for t in study["top_soc_tokens"]]}

    async def cmd_search(self) -> Tuple[RunManifest, Dict[str, Any]]:
        config = self._model_config()
        self.args.seed = self.args.seed if self.args.seed is not None else config.seed
        samples = await self._blocking(load_samples, self.args.data)
        out = self._out_dir()
        summary = await self._blocking(run_search, samples, config, self.args, out)
        manifest = RunManifest("search", config.config_hash(), self.args.seed, [str(self.args.data)],
                               ["best_config.json", "trials.json"])
        return manifest, summary

    async def cmd_runs(self) -> Dict[str, Any]:
        if self.store is None:
            raise ConfigError("runs needs the results store; drop --no-store")
        table = await self.store.aggregate_all()
        stats = await self.store.get_stats()
        if table:
            print(pd.DataFrame(table).to_string(index=False), file=sys.stderr)
        return {"aggregates": table, "stats": stats}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--store", default=None, help="results database (default ~/.battery-forecast/runs.db)")
    common.add_argument("--no-store", action="store_true", help="do not record the run")
    common.add_argument("--seed", type=int, default=None, help="split or generation seed")

    def with_out(p: argparse.ArgumentParser):
        p.add_argument("--out", required=True, help="output directory")

    def with_config(p: argparse.ArgumentParser, what: str = "ModelConfig JSON"):
        p.add_argument("--config", default=None, help=what)

    def with_split(p: argparse.ArgumentParser):
        p.add_argument("--split", choices=SPLIT_MODES, default="random")
        p.add_argument("--fraction", type=float, default=1.0, help="fraction of training batteries kept")
        p.add_argument("--max-steps", type=int, default=None, help="cap on optimizer steps per training run")

    parser = argparse.ArgumentParser(prog="battery-forecast", description="Battery degradation trajectory forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    with_config(p, "SynthSpec JSON")
    with_out(p)

    p = sub.add_parser("embed", parents=[common], help="write hashed condition embeddings")
    p.add_argument("data", help="processed sample directory")
    with_config(p)
    with_out(p)

    p = sub.add_parser("preprocess", parents=[common], help="clean records into processed samples")
    p.add_argument("records", help="record directory")
    with_config(p)
    p.add_argument("--smoothing", default=None, help="SmoothingParams JSON")
    p.add_argument("--split", choices=SPLIT_MODES, default="random",
                   help="split used to pool percentile thresholds")
    with_out(p)

    p = sub.add_parser("train", parents=[common], help="train a forecaster")
    p.add_argument("data", help="processed sample directory")
    with_config(p)
    with_split(p)
    p.add_argument("--plan", default=None, help="existing split.json to reuse")
    with_out(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("checkpoint")
    p.add_argument("data", help="processed sample directory")
    p.add_argument("--plan", default=None, help="split.json (default: next to the checkpoint)")
    p.add_argument("--s-cycles", type=int, nargs="+", default=None, help="early-cycle sweep values")
    with_out(p)

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    p.add_argument("data", help="processed sample directory")
    with_config(p)
    with_split(p)
    p.add_argument("--variant", action="append", default=None, choices=list(ABLATION_VARIANTS))
    p.add_argument("--repeats", type=int, default=1, help="random splits per variant")
    with_out(p)

    p = sub.add_parser("inspect", parents=[common], help="export a case study for one battery")
    p.add_argument("checkpoint")
    p.add_argument("data", help="processed sample directory")
    p.add_argument("--battery", required=True)
    p.add_argument("--s-cycles", type=int, nargs=1, default=None)
    with_out(p)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("data", help="processed sample directory")
    with_config(p, "base ModelConfig JSON")
    with_split(p)
    p.add_argument("--space", default=None, help="SearchSpace JSON")
    p.add_argument("--budget", type=int, default=10)
    with_out(p)

    sub.add_parser("runs", parents=[common], help="aggregate stored metrics")
    return parser


async def run(args: argparse.Namespace) -> Dict[str, Any]:
    cli = ForecastCLI(args)
    try:
        await cli.initialize()
        return await cli.handle_command()
    finally:
        await cli.shutdown()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    configure_logging(args.verbose)

    try:
        summary = asyncio.run(run(args))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error(f"Missing artifact: {e}")
        return EXIT_MISSING
    except ConditionLeakage as e:
        logger.error(f"Condition exclusivity violated: {e}")
        return EXIT_INTEGRITY
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME

    print(json.dumps(summary, sort_keys=True, default=str), flush=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
