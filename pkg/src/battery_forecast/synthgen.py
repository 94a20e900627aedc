"""
Deterministic synthetic battery generator.

Produces records in the core format with known SOH trajectories so that
preprocessing, training and evaluation run without a real cycling database.
Everything is a pure function of (SynthSpec, indices).
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import expit

from .core import (
    CAP0_RULES,
    AgingCondition,
    BatteryRecord,
    CycleRecord,
    PathLike,
    Violation,
    load_config,
    resolve_cap0,
    save_record,
    write_json,
)

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ("superlinear", "linear", "sublinear")
TRUTH_MANIFEST = "truth.json"

_POSITIVE = ("LFP", "NCM", "NCA", "LCO")
_NEGATIVE = ("graphite", "Si-graphite", "LTO")
_ELECTROLYTE = ("LiPF6 EC/DMC", "LiPF6 EC/EMC", "LiFSI")
_PACKAGE = ("cylindrical", "pouch", "prismatic")
_CAPACITY = (1.1, 2.0, 2.5, 3.0, 4.8)
_MANUFACTURER = ("A123", "LG", "Samsung", "Panasonic", "CALB")
_FORMATION = ("C/10 x2", "C/20 x1", "C/5 x3")
_TEMPERATURE = (15.0, 25.0, 35.0, 45.0)

_REST_BETWEEN_CYCLES = 600.0  # seconds
_RPT_GAP = 72 * 3600.0
_REGENERATION_DECAY = 10.0  # cycles


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; the same settings always yield bit-identical records."""

    seed: int = 0
    n_conditions: int = 16
    batteries_per_condition: int = 4
    shape_families: Tuple[str, ...] = SHAPE_FAMILIES
    life_range: Tuple[int, int] = (200, 600)
    noise_sd: float = 0.001
    capacity_rise: bool = True
    regeneration_events: int = 1
    rpt_events: int = 0
    samples_per_segment: int = 24
    tau: float = 0.8
    cap0_rule: str = "nominal"

    def __post_init__(self):
        object.__setattr__(self, "shape_families", tuple(self.shape_families))
        object.__setattr__(self, "life_range", tuple(int(v) for v in self.life_range))

    @property
    def n_batteries(self) -> int:
        return self.n_conditions * self.batteries_per_condition

    def validate(self) -> List[Violation]:
        found: List[Violation] = []
        low, high = self.life_range
        if not 102 <= low <= high <= 5000:
            found.append(Violation("life_range", "must satisfy 102 <= low <= high <= 5000"))
        if self.noise_sd < 0:
            found.append(Violation("noise_sd", "must be >= 0"))
        if self.n_conditions < 1 or self.batteries_per_condition < 1:
            found.append(Violation("n_conditions", "and batteries_per_condition must be >= 1"))
        if not self.shape_families or any(f not in SHAPE_FAMILIES for f in self.shape_families):
            found.append(Violation("shape_families", f"must be a nonempty subset of {SHAPE_FAMILIES}"))
        if self.regeneration_events < 0 or self.rpt_events < 0:
            found.append(Violation("events", "must be >= 0"))
        if self.samples_per_segment < 2:
            found.append(Violation("samples_per_segment", "must be >= 2"))
        if not 0 < self.tau < 1:
            found.append(Violation("tau", "must lie in (0, 1)"))
        if self.cap0_rule not in CAP0_RULES:
            found.append(Violation("cap0_rule", f"must be one of {CAP0_RULES}"))
        return found

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["shape_families"] = list(self.shape_families)
        data["life_range"] = list(self.life_range)
        return data


@dataclass(frozen=True)
class TrajectoryParams:
    family: str
    life: int
    a: float
    b: float
    p: float


@dataclass
class SynthTruth:
    """Ground truth for one generated battery, used as a test oracle."""

    battery_id: str
    condition_index: int
    params: TrajectoryParams
    soh: np.ndarray
    regeneration_cycles: List[int] = field(default_factory=list)
    rpt_cycles: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "battery_id": self.battery_id,
            "condition_index": self.condition_index,
            "params": dataclasses.asdict(self.params),
            "soh": self.soh.tolist(),
            "regeneration_cycles": self.regeneration_cycles,
            "rpt_cycles": self.rpt_cycles,
        }


def _rng(spec: SynthSpec, *keys: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *keys])


def soh_curve(n: np.ndarray, a: float, b: float, p: float) -> np.ndarray:
    """SOH(n) = 1 - a*n - b*n**p."""
    n = np.asarray(n, dtype=np.float64)
    return 1.0 - a * n - b * n ** p


def shape_family(spec: SynthSpec, index: int) -> str:
    return spec.shape_families[index % len(spec.shape_families)]


def generate_condition(spec: SynthSpec, index: int) -> AgingCondition:
    """Ten-factor condition for index; the charge rate alone keeps indices distinct."""
    if not 0 <= index < spec.n_conditions:
        raise ValueError(f"Condition index {index} out of range 0..{spec.n_conditions - 1}")
    rng = _rng(spec, 0, index)
    charge_rate = 0.5 + 0.05 * index
    discharge_rate = float(rng.choice((0.5, 1.0, 2.0)))
    return AgingCondition(
        positive_electrode=str(rng.choice(_POSITIVE)),
        negative_electrode=str(rng.choice(_NEGATIVE)),
        electrolyte=str(rng.choice(_ELECTROLYTE)),
        package_structure=str(rng.choice(_PACKAGE)),
        nominal_capacity=float(rng.choice(_CAPACITY)),
        manufacturer=str(rng.choice(_MANUFACTURER)),
        formation_protocol=str(rng.choice(_FORMATION)),
        charge_protocol=f"CC {charge_rate:.2f}C to 100% SOC",
        discharge_protocol=f"CC {discharge_rate:.1f}C to 0% SOC",
        operating_temperature=float(rng.choice(_TEMPERATURE)),
    )


def _protocol_rate(protocol: str) -> float:
    # "CC 0.55C to ..." -> 0.55
    return float(protocol.split()[1].rstrip("C"))


def trajectory_params(spec: SynthSpec, condition_index: int, battery_index: int) -> TrajectoryParams:
    """Per-condition life and exponent with per-battery jitter, solved so SOH(life) = tau - 0.02."""
    low, high = spec.life_range
    condition_rng = _rng(spec, 1, condition_index)
    base_life = condition_rng.uniform(low, high)
    family = shape_family(spec, condition_index)
    exponent = condition_rng.uniform(2.0, 3.0)

    battery_rng = _rng(spec, 2, condition_index, battery_index)
    life = int(np.clip(round(base_life * battery_rng.uniform(0.95, 1.05)), low, high))
    fade = 1.0 - spec.tau + 0.02

    if family == "superlinear":
        p = exponent
        a, b = 0.3 * fade / life, 0.7 * fade / life ** p
    elif family == "linear":
        p = 1.0
        a, b = fade / life, 0.0
    else:
        p = 0.5
        a, b = 0.2 * fade / life, 0.8 * fade / life ** p
    return TrajectoryParams(family=family, life=life, a=float(a), b=float(b), p=float(p))


def _ocv(soc: np.ndarray, v0: float, slope: float, step: float, center: float, width: float) -> np.ndarray:
    return v0 + slope * soc + step * expit((soc - center) / width)


def _synthesize_cycle(t0: float, capacity: float, ce: float, resistance: float,
                      charge_current: float, discharge_current: float,
                      ocv: Dict[str, float], samples: int) -> CycleRecord:
    """Constant-current charge, two rest samples, constant-current discharge."""
    charge_ah = capacity / ce
    charge_s = charge_ah / charge_current * 3600.0
    discharge_s = capacity / discharge_current * 3600.0

    charge_t = t0 + np.linspace(0.0, charge_s, samples)
    rest_t = charge_t[-1] + np.array([60.0, 120.0])
    discharge_t = rest_t[-1] + 60.0 + np.linspace(0.0, discharge_s, samples)

    soc_up = np.linspace(0.0, 1.0, samples)
    soc_down = soc_up[::-1]
    charge_v = _ocv(soc_up, **ocv) + charge_current * resistance
    rest_v = np.full(2, _ocv(np.array([1.0]), **ocv)[0])
    discharge_v = _ocv(soc_down, **ocv) - discharge_current * resistance

    timestamps = np.concatenate([charge_t, rest_t, discharge_t])
    voltage = np.concatenate([charge_v, rest_v, discharge_v])
    current = np.concatenate([
        np.full(samples, charge_current),
        np.zeros(2),
        np.full(samples, -discharge_current),
    ])
    delivered = cumulative_trapezoid(np.abs(voltage * current), timestamps, initial=0.0) / 3600.0
    energy = np.diff(delivered, prepend=0.0)
    return CycleRecord(
        timestamps=timestamps,
        voltage=voltage,
        current=current,
        energy=energy,
        charge_span=(0, samples),
        discharge_span=(samples + 2, 2 * samples + 2),
    )


def _embedded_soh(spec: SynthSpec, params: TrajectoryParams, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, List[int], List[int]]:
    n = np.arange(1, params.life + 1, dtype=np.float64)
    soh = soh_curve(n, params.a, params.b, params.p)

    if spec.capacity_rise:
        amplitude = rng.uniform(0.003, 0.008)
        peak = rng.uniform(5.0, 15.0)
        soh = soh + amplitude * (n / peak) * np.exp(1.0 - n / peak)

    regeneration: List[int] = []
    for _ in range(spec.regeneration_events):
        start = int(rng.integers(int(0.2 * params.life), int(0.7 * params.life)))
        amplitude = rng.uniform(0.004, 0.008)
        since = n - start
        soh = soh + np.where(since >= 0, amplitude * np.exp(-np.maximum(since, 0) / _REGENERATION_DECAY), 0.0)
        regeneration.append(start)

    rpt: List[int] = []
    if spec.rpt_events:
        candidates = np.linspace(0.3 * params.life, 0.8 * params.life, spec.rpt_events + 2)[1:-1]
        for position in candidates:
            start = int(position)
            depth = rng.uniform(0.01, 0.02)
            since = n - start
            soh = soh - np.where(since >= 0, depth * np.exp(-np.maximum(since, 0) / 1.0), 0.0)
            rpt.append(start)

    if spec.noise_sd > 0:
        soh = soh + rng.normal(0.0, spec.noise_sd, size=soh.shape)

    below = np.flatnonzero(soh < spec.tau)
    if below.size:
        soh = soh[: min(len(soh), int(below[0]) + 4)]
    return soh, regeneration, [c for c in rpt if c <= len(soh)]


def generate_battery(spec: SynthSpec, condition_index: int, battery_index: int
                     ) -> Tuple[BatteryRecord, SynthTruth]:
    """One synthetic battery whose discharge integrals reproduce the embedded SOH."""
    condition = generate_condition(spec, condition_index)
    params = trajectory_params(spec, condition_index, battery_index)
    rng = _rng(spec, 3, condition_index, battery_index)
    soh, regeneration, rpt_cycles = _embedded_soh(spec, params, rng)

    ocv_rng = _rng(spec, 4, condition_index)
    ocv = {
        "v0": ocv_rng.uniform(3.0, 3.3),
        "slope": ocv_rng.uniform(0.3, 0.6),
        "step": ocv_rng.uniform(0.1, 0.3),
        "center": ocv_rng.uniform(0.3, 0.7),
        "width": ocv_rng.uniform(0.03, 0.08),
    }
    resistance0 = ocv_rng.uniform(0.02, 0.06) / condition.nominal_capacity

    nominal = condition.nominal_capacity
    charge_current = _protocol_rate(condition.charge_protocol) * nominal
    discharge_current = _protocol_rate(condition.discharge_protocol) * nominal
    dod = 1.0

    cycles = []
    rpt_times = []
    t0 = 0.0
    rpt_set = set(rpt_cycles)
    for index, value in enumerate(soh, start=1):
        if index in rpt_set:
            rpt_times.append(t0 + _RPT_GAP / 2)
            t0 += _RPT_GAP
        capacity = value * nominal * dod
        ce = 0.999 - 0.002 * rng.random()
        resistance = resistance0 * (1.0 + 2.0 * max(0.0, 1.0 - value))
        cycle = _synthesize_cycle(t0, capacity, ce, resistance, charge_current,
                                  discharge_current, ocv, spec.samples_per_segment)
        cycles.append(cycle)
        t0 = float(cycle.timestamps[-1]) + _REST_BETWEEN_CYCLES

    battery_id = f"synth-c{condition_index:03d}-b{battery_index:02d}"
    cap0 = resolve_cap0(nominal, float(soh[0]) * nominal * dod, spec.cap0_rule)
    record = BatteryRecord(
        battery_id=battery_id,
        condition=condition,
        dod=dod,
        soc_interval=(0.0, 1.0),
        cycles=tuple(cycles),
        cap0=cap0,
        tau=spec.tau,
        domain="synthetic",
        cap0_rule=spec.cap0_rule,
        rpt_times=tuple(rpt_times),
    )
    truth = SynthTruth(
        battery_id=battery_id,
        condition_index=condition_index,
        params=params,
        soh=soh * nominal / cap0,
        regeneration_cycles=regeneration,
        rpt_cycles=rpt_cycles,
    )
    return record, truth


def generate_dataset(spec: SynthSpec) -> List[Tuple[BatteryRecord, SynthTruth]]:
    return [
        generate_battery(spec, c, b)
        for c in range(spec.n_conditions)
        for b in range(spec.batteries_per_condition)
    ]


def write_dataset(spec: SynthSpec, out_dir: PathLike) -> List[Path]:
    """Write one record file per battery plus the ground-truth manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    truths = []
    for record, truth in generate_dataset(spec):
        written.append(save_record(record, out_dir / f"{record.battery_id}.json"))
        truths.append(truth.to_dict())
    manifest = write_json({"spec": spec.to_dict(), "batteries": truths}, out_dir / TRUTH_MANIFEST)
    logger.info(f"Generated {len(written)} synthetic batteries in {out_dir}")
    return written + [manifest]


def load_spec(path: Optional[PathLike]) -> SynthSpec:
    return load_config(SynthSpec, path)
