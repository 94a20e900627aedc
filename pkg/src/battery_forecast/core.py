"""
Domain types, configuration and serialization shared by all modules.

Cycle indices are 1-based in every public API. Arrays are stored 0-based,
so cycle i lives at offset i - 1; the accessors below hide that.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Listing order of the ten aging factors; prompts and keys follow it.
FACTOR_NAMES: Tuple[str, ...] = (
    "positive_electrode",
    "negative_electrode",
    "electrolyte",
    "package_structure",
    "nominal_capacity",
    "manufacturer",
    "formation_protocol",
    "charge_protocol",
    "discharge_protocol",
    "operating_temperature",
)

CAP0_RULES = ("nominal", "first_cycle")
CALB_DOMAINS = ("calb",)


def write_json(data: Any, path: PathLike) -> Path:
    """Write JSON deterministically (sorted keys, fixed indent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r") as f:
        return json.load(f)


def _frozen_array(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Violation:
    """One broken invariant: the field, the rule, and the cycle if cycle-level."""

    field: str
    rule: str
    cycle: Optional[int] = None

    def __str__(self) -> str:
        return f"{self.field} {self.rule}"


@dataclass(frozen=True)
class AgingCondition:
    """The ten-factor tuple that determines a battery's degradation regime."""

    positive_electrode: str
    negative_electrode: str
    electrolyte: str
    package_structure: str
    nominal_capacity: float
    manufacturer: str
    formation_protocol: str
    charge_protocol: str
    discharge_protocol: str
    operating_temperature: float

    @property
    def key(self) -> str:
        """Stable identifier derived from the full field tuple."""
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def factor(self, name: str) -> Any:
        return getattr(self, name)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AgingCondition":
        unknown = set(data) - set(FACTOR_NAMES)
        if unknown:
            raise ConfigError(f"Unknown aging-condition fields: {sorted(unknown)}")
        values = dict(data)
        values["nominal_capacity"] = float(values["nominal_capacity"])
        values["operating_temperature"] = float(values["operating_temperature"])
        return cls(**values)


@dataclass(frozen=True, eq=False)
class CycleRecord:
    """
    Raw measurements of one cycle.

    Spans are half-open index ranges [start, stop). Current is signed with
    charge positive. `energy`, when present, holds the Wh exchanged since the
    previous sample (0 at the first sample).
    """

    timestamps: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    charge_span: Tuple[int, int]
    discharge_span: Tuple[int, int]
    energy: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("timestamps", "voltage", "current", "energy"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen_array(value))
        object.__setattr__(self, "charge_span", tuple(int(i) for i in self.charge_span))
        object.__setattr__(self, "discharge_span", tuple(int(i) for i in self.discharge_span))

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CycleRecord):
            return NotImplemented
        if self.charge_span != other.charge_span or self.discharge_span != other.discharge_span:
            return False
        if (self.energy is None) != (other.energy is None):
            return False
        pairs = [
            (self.timestamps, other.timestamps),
            (self.voltage, other.voltage),
            (self.current, other.current),
        ]
        if self.energy is not None:
            pairs.append((self.energy, other.energy))
        return all(np.array_equal(a, b) for a, b in pairs)

    __hash__ = None  # type: ignore[assignment]

    @property
    def start_time(self) -> float:
        return float(self.timestamps[0])

    def violations(self, cycle: Optional[int] = None) -> List[Violation]:
        found: List[Violation] = []
        lengths = {len(self.timestamps), len(self.voltage), len(self.current)}
        if self.energy is not None:
            lengths.add(len(self.energy))
        if len(lengths) != 1:
            found.append(Violation("series", "must share one length", cycle))
            return found
        n = len(self.timestamps)
        if n < 2:
            found.append(Violation("series", "must have length >= 2", cycle))
        if np.any(np.diff(self.timestamps) <= 0):
            found.append(Violation("timestamps", "must be strictly increasing", cycle))
        for name, (start, stop) in (("charge_span", self.charge_span),
                                    ("discharge_span", self.discharge_span)):
            if not (0 <= start < stop <= n):
                found.append(Violation(name, "must be a nonempty range inside the series", cycle))
        if self.charge_span[1] > self.discharge_span[0]:
            found.append(Violation("charge_span", "must precede discharge_span", cycle))
        return found

    def to_dict(self) -> Dict[str, Any]:
        return {
            "timestamps": self.timestamps.tolist(),
            "voltage": self.voltage.tolist(),
            "current": self.current.tolist(),
            "energy": None if self.energy is None else self.energy.tolist(),
            "charge_span": list(self.charge_span),
            "discharge_span": list(self.discharge_span),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CycleRecord":
        return cls(
            timestamps=data["timestamps"],
            voltage=data["voltage"],
            current=data["current"],
            energy=data.get("energy"),
            charge_span=tuple(data["charge_span"]),
            discharge_span=tuple(data["discharge_span"]),
        )


def default_tau(domain: str) -> float:
    """EOL threshold: 90% for CALB-style production domains, 80% otherwise."""
    return 0.9 if domain.lower() in CALB_DOMAINS else 0.8


def resolve_cap0(nominal_capacity: float, first_cycle_capacity: float, rule: str = "nominal") -> float:
    if rule == "nominal":
        return float(nominal_capacity)
    if rule == "first_cycle":
        return float(first_cycle_capacity)
    raise ConfigError(f"Unknown cap0 rule: {rule}")


@dataclass(frozen=True, eq=False)
class BatteryRecord:
    """One battery: metadata, aging condition and per-cycle raw series."""

    battery_id: str
    condition: AgingCondition
    dod: float
    soc_interval: Tuple[float, float]
    cycles: Tuple[CycleRecord, ...]
    cap0: float
    tau: float
    domain: str = "generic"
    cap0_rule: str = "nominal"
    rpt_times: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "soc_interval", tuple(float(v) for v in self.soc_interval))
        object.__setattr__(self, "cycles", tuple(self.cycles))
        object.__setattr__(self, "rpt_times", tuple(float(t) for t in self.rpt_times))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BatteryRecord):
            return NotImplemented
        return all(
            getattr(self, f.name) == getattr(other, f.name) for f in dataclasses.fields(self)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    def cycle(self, index: int) -> CycleRecord:
        """Cycle by 1-based index."""
        if not 1 <= index <= len(self.cycles):
            raise IndexError(f"Cycle {index} out of range 1..{len(self.cycles)}")
        return self.cycles[index - 1]

    def cycle_start_times(self) -> np.ndarray:
        return np.array([c.start_time for c in self.cycles], dtype=np.float64)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "battery_id": self.battery_id,
            "condition": self.condition.to_dict(),
            "dod": self.dod,
            "soc_interval": list(self.soc_interval),
            "cycles": [c.to_dict() for c in self.cycles],
            "cap0": self.cap0,
            "tau": self.tau,
            "domain": self.domain,
            "cap0_rule": self.cap0_rule,
            "rpt_times": list(self.rpt_times),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BatteryRecord":
        return cls(
            battery_id=data["battery_id"],
            condition=AgingCondition.from_dict(data["condition"]),
            dod=float(data["dod"]),
            soc_interval=tuple(data["soc_interval"]),
            cycles=tuple(CycleRecord.from_dict(c) for c in data["cycles"]),
            cap0=float(data["cap0"]),
            tau=float(data["tau"]),
            domain=data.get("domain", "generic"),
            cap0_rule=data.get("cap0_rule", "nominal"),
            rpt_times=tuple(data.get("rpt_times", ())),
        )


def validate_record(record: BatteryRecord) -> List[Violation]:
    """Return every broken invariant; empty iff the record is well formed. Never raises."""
    found: List[Violation] = []
    try:
        if not record.cap0 > 0:
            found.append(Violation("cap0", "must be > 0"))
        if not 0 < record.tau < 1:
            found.append(Violation("tau", "must lie in (0, 1)"))
        if not 0 < record.dod <= 1:
            found.append(Violation("dod", "must lie in (0, 1]"))
        start, end = record.soc_interval
        if not 0 <= start < end <= 1:
            found.append(Violation("soc_interval", "must satisfy 0 <= start < end <= 1"))
        if not record.condition.nominal_capacity > 0:
            found.append(Violation("nominal_capacity", "must be > 0"))
        if record.cap0_rule not in CAP0_RULES:
            found.append(Violation("cap0_rule", f"must be one of {CAP0_RULES}"))
        if not record.cycles:
            found.append(Violation("cycles", "must be nonempty"))
        for index, cycle in enumerate(record.cycles, start=1):
            found.extend(cycle.violations(index))
    except Exception as e:
        # Malformed field types still yield a diagnostic rather than an exception.
        found.append(Violation("record", f"is malformed: {e}"))
    return found


@dataclass(frozen=True, eq=False)
class SohTrajectory:
    """
    SOH per cycle (soh[0] is cycle 1).

    `extrapolated_from` is the first cycle whose value came from tail
    extrapolation rather than measurement.
    """

    soh: np.ndarray
    t_eol: Optional[int] = None
    extrapolated_from: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "soh", _frozen_array(self.soh))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SohTrajectory):
            return NotImplemented
        return (
            np.array_equal(self.soh, other.soh)
            and self.t_eol == other.t_eol
            and self.extrapolated_from == other.extrapolated_from
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_cycles(self) -> int:
        return len(self.soh)

    def at(self, cycle: int) -> float:
        return float(self.soh[cycle - 1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "soh": self.soh.tolist(),
            "t_eol": self.t_eol,
            "extrapolated_from": self.extrapolated_from,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SohTrajectory":
        return cls(
            soh=data["soh"],
            t_eol=data.get("t_eol"),
            extrapolated_from=data.get("extrapolated_from"),
        )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, objective and training settings; ablation flags included."""

    d: int = 64
    L: int = 300
    S_max: int = 100
    S: int = 100
    P: int = 30
    h: int = 4
    s_bar: int = 8
    L_de: int = 2
    L_intra: int = 2
    N_mem: int = 64
    d_ff: int = 64
    d_ffs: int = 128
    d_mem: int = 128
    d_enc: int = 64
    lambda1: float = 1.0
    lambda2: float = 1.0
    dropout: float = 0.1
    T_max: int = 5000
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 30
    weight_decay: float = 0.0
    seed: int = 0
    socview: bool = True
    mdpm: bool = True
    acdecoder: bool = True
    acattention: bool = True
    acquery: bool = True
    llm_embedder: bool = False
    embedding_file: Optional[str] = None

    @property
    def M(self) -> int:
        """SOC-token count for patch length and stride P."""
        return (self.L - self.P) // self.P + 1

    @property
    def use_acquery(self) -> bool:
        return self.acdecoder and self.acquery

    @property
    def use_acattention(self) -> bool:
        return self.acdecoder and self.acattention

    @property
    def uses_condition(self) -> bool:
        return self.use_acquery or self.use_acattention

    @property
    def n_tokens(self) -> int:
        return self.S_max + (self.M if self.socview else 0)

    def validate(self) -> List[Violation]:
        found: List[Violation] = []
        checks = [
            (self.d > 0 and self.h > 0 and self.d % self.h == 0, "d", "must be divisible by h"),
            (1 <= self.P <= self.L, "P", "must satisfy 1 <= P <= L"),
            (self.L % 2 == 0, "L", "must be even"),
            (self.M >= 1, "M", "must be >= 1"),
            (self.s_bar >= 1, "s_bar", "must be >= 1"),
            (self.N_mem >= 2, "N_mem", "must be >= 2"),
            (1 <= self.S <= self.S_max, "S", "must satisfy 1 <= S <= S_max"),
            (self.L_de >= 0 and self.L_intra >= 0, "layers", "must be >= 0"),
            (min(self.d_ff, self.d_ffs, self.d_mem, self.d_enc) > 0, "widths", "must be > 0"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda", "must be >= 0"),
            (0 <= self.dropout < 1, "dropout", "must lie in [0, 1)"),
            (self.T_max >= 1, "T_max", "must be >= 1"),
            (self.lr > 0, "lr", "must be > 0"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.max_epochs >= 1 and self.patience >= 1, "epochs", "must be >= 1"),
        ]
        for ok, name, rule in checks:
            if not ok:
                found.append(Violation(name, rule))
        return found

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _dataclass_from_dict(cls, data)


def _dataclass_from_dict(cls: Any, data: Dict[str, Any]) -> Any:
    """Build a config dataclass, rejecting unknown keys and invariant violations."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        obj = cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e
    violations = obj.validate()
    if violations:
        raise ConfigError(f"Invalid {cls.__name__}: " + "; ".join(str(v) for v in violations))
    return obj


def load_config(cls: Any, path: Optional[PathLike]) -> Any:
    """Load a flat JSON config file into `cls`; defaults when path is None."""
    if path is None:
        return cls()
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    logger.debug(f"Loaded {cls.__name__} from {path}")
    return _dataclass_from_dict(cls, data)


def save_record(record: BatteryRecord, path: PathLike) -> Path:
    return write_json(record.to_dict(), path)


def load_record(path: PathLike) -> BatteryRecord:
    return BatteryRecord.from_dict(read_json(path))
