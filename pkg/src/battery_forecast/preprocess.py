"""
Preprocessing: SOH computation, artifact cleaning, EOL, SOC mapping,
SOC-aligned resampling, and construction of model inputs and targets.

All functions are pure; batteries can be processed in parallel.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import PchipInterpolator

from .core import (
    AgingCondition,
    BatteryRecord,
    CycleRecord,
    ModelConfig,
    SohTrajectory,
    Violation,
    validate_record,
)
from .exceptions import (
    BatteryForecastError,
    CannotSmooth,
    CycleProcessingError,
    DegenerateSegment,
    InvalidCycle,
    InvalidRecord,
    InvalidSpan,
    MissingThresholdSource,
    NoEol,
    NonDegradingTail,
    NothingToPredict,
    ResampleFailure,
)

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0
ONSET_METHODS = ("rpt", "time_gap", "percentile")
N_CHANNELS = 4  # voltage, C-rate, capacity, SOC
N_DESCRIPTORS = 2  # coulombic efficiency, energy efficiency


@dataclass(frozen=True)
class SmoothingParams:
    """Thresholds for spike clipping, onset detection, recovery search and filtering."""

    spike_drop_threshold: float = 0.03
    spike_recovery_tolerance: float = 0.01
    filter_margin: float = 0.025
    extrap_window: int = 20
    max_extrapolated_cycles: int = 5000
    onset_method: str = "time_gap"
    gamma_gap: float = 48 * SECONDS_PER_HOUR
    gamma_plus: Optional[float] = None
    gamma_minus: Optional[float] = None
    epsilon: float = 0.005
    W: int = 5
    M_anchor: int = 5

    def validate(self) -> List[Violation]:
        found: List[Violation] = []
        positive = ("spike_drop_threshold", "spike_recovery_tolerance", "filter_margin",
                    "gamma_gap", "epsilon")
        for name in positive:
            if not getattr(self, name) > 0:
                found.append(Violation(name, "must be > 0"))
        if self.onset_method not in ONSET_METHODS:
            found.append(Violation("onset_method", f"must be one of {ONSET_METHODS}"))
        if (self.gamma_plus is not None and self.gamma_minus is not None
                and not self.gamma_minus < self.gamma_plus):
            found.append(Violation("gamma_minus", "must be < gamma_plus"))
        if self.extrap_window < 2:
            found.append(Violation("extrap_window", "must be >= 2"))
        if self.max_extrapolated_cycles < 1:
            found.append(Violation("max_extrapolated_cycles", "must be >= 1"))
        if self.W < 1:
            found.append(Violation("W", "must be >= 1"))
        if self.M_anchor < 2:
            found.append(Violation("M_anchor", "must be >= 2"))
        return found

    def replace(self, **changes: Any) -> "SmoothingParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ModelInput:
    """Fixed-shape encoder input for one battery with S usable cycles."""

    X: np.ndarray
    X_f: np.ndarray
    cycle_mask: np.ndarray
    condition_key: str
    S: int

    def truncate(self, S: int) -> "ModelInput":
        """Same input as if only the first S cycles had been built."""
        if not 1 <= S <= self.S:
            raise ValueError(f"Cannot truncate {self.S} usable cycles to {S}")
        X = self.X.copy()
        X_f = self.X_f.copy()
        mask = self.cycle_mask.copy()
        X[S:] = 0.0
        X_f[S:] = 0.0
        mask[S:] = 0
        return ModelInput(X=X, X_f=X_f, cycle_mask=mask, condition_key=self.condition_key, S=S)


@dataclass(frozen=True, eq=False)
class Target:
    """Normalized SOH trajectory padded to T_max, with the prediction-region mask."""

    y_norm: np.ndarray
    mask: np.ndarray
    tau: float

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class FilterOutcome:
    trajectory: Optional[SohTrajectory]
    excluded: bool = False
    reason: Optional[str] = None


@dataclass(frozen=True)
class Exclusion:
    battery_id: str
    reason: str


# SOH and capacity

def compute_cycle_capacity(cycle: CycleRecord, span: Tuple[int, int]) -> float:
    """Trapezoidal integral of |I(t)| over the span, in Ah."""
    start, stop = span
    if stop - start < 2:
        raise InvalidSpan(f"Span {span} has fewer than 2 samples")
    t = cycle.timestamps[start:stop]
    current = np.abs(cycle.current[start:stop])
    return float(trapezoid(current, t) / SECONDS_PER_HOUR)


def segment_capacity(cycle: CycleRecord, span: Tuple[int, int]) -> np.ndarray:
    """Within-segment ampere-hour counter, starting at 0."""
    start, stop = span
    if stop - start < 2:
        raise InvalidSpan(f"Span {span} has fewer than 2 samples")
    t = cycle.timestamps[start:stop]
    current = np.abs(cycle.current[start:stop])
    return cumulative_trapezoid(current, t, initial=0.0) / SECONDS_PER_HOUR


def compute_soh_series(record: BatteryRecord) -> SohTrajectory:
    """SOH_i = Cap_i / (Cap0 * DoD) for every cycle."""
    if not record.dod > 0:
        raise InvalidRecord(f"DoD must be > 0, got {record.dod}")
    if not record.cap0 > 0:
        raise InvalidRecord(f"cap0 must be > 0, got {record.cap0}")
    capacities = np.empty(record.n_cycles)
    for index, cycle in enumerate(record.cycles, start=1):
        try:
            capacities[index - 1] = compute_cycle_capacity(cycle, cycle.discharge_span)
        except BatteryForecastError as e:
            raise CycleProcessingError(index, e) from e
    return SohTrajectory(soh=capacities / (record.cap0 * record.dod))


def soh_deltas(soh: Sequence[float]) -> np.ndarray:
    """Relative single-cycle changes delta_k for k = 2..n."""
    soh = np.asarray(soh, dtype=np.float64)
    return (soh[1:] - soh[:-1]) / soh[:-1]


def normalize_soh(y: Union[float, np.ndarray], tau: float) -> Union[float, np.ndarray]:
    return (y - tau) / (1.0 - tau)


def denormalize_soh(y_norm: Union[float, np.ndarray], tau: float) -> Union[float, np.ndarray]:
    return y_norm * (1.0 - tau) + tau


# Artifact cleaning

def clip_spikes(soh: Sequence[float], params: SmoothingParams = SmoothingParams()) -> np.ndarray:
    """
    Clip isolated single-cycle drops back to the previous value.

    A drop at cycle k is isolated when cycle k+1 comes back to within
    `spike_recovery_tolerance` of the pre-drop value; sustained drops stay.
    """
    out = np.array(soh, dtype=np.float64)
    n = len(out)
    for k in range(1, n - 1):
        previous = out[k - 1]
        drop = (out[k] - previous) / previous
        if drop < -params.spike_drop_threshold and out[k + 1] >= previous - params.spike_recovery_tolerance:
            logger.debug(f"Clipped isolated SOH drop of {-drop:.2%} at cycle {k + 1}")
            out[k] = previous
    return out


def thresholds_from_deltas(deltas: Sequence[float]) -> Tuple[float, float]:
    """(gamma_plus, gamma_minus): 99th and 1st percentiles of the training-split deltas."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise MissingThresholdSource("No training deltas to derive percentile thresholds from")
    return float(np.percentile(deltas, 99)), float(np.percentile(deltas, 1))


def collect_training_deltas(records: Iterable[BatteryRecord],
                            params: SmoothingParams = SmoothingParams()) -> np.ndarray:
    """Pool spike-clipped delta_k values over training-split batteries."""
    pooled = []
    for record in records:
        soh = clip_spikes(compute_soh_series(record).soh, params)
        pooled.append(soh_deltas(soh))
    return np.concatenate(pooled) if pooled else np.empty(0)


def detect_artifact_onsets(
    soh: Sequence[float],
    cycle_times: Sequence[float],
    params: SmoothingParams = SmoothingParams(),
    training_deltas: Optional[Sequence[float]] = None,
    rpt_times: Sequence[float] = (),
) -> List[int]:
    """Artifact onset cycles (1-based) by the configured method."""
    soh = np.asarray(soh, dtype=np.float64)
    n = len(soh)
    method = params.onset_method

    if method == "rpt":
        times = np.asarray(cycle_times, dtype=np.float64)
        # Last cycle started before each RPT is the last normal cycle.
        onsets = {int(np.searchsorted(times, t, side="right")) for t in rpt_times}
        return sorted(k for k in onsets if 2 <= k <= n)

    if method == "time_gap":
        times = np.asarray(cycle_times, dtype=np.float64)
        gaps = np.diff(times)
        return [int(k) + 2 for k in np.flatnonzero(gaps > params.gamma_gap)]

    if method == "percentile":
        if params.gamma_plus is not None and params.gamma_minus is not None:
            gamma_plus, gamma_minus = params.gamma_plus, params.gamma_minus
        elif training_deltas is not None:
            gamma_plus, gamma_minus = thresholds_from_deltas(training_deltas)
        else:
            raise MissingThresholdSource("Percentile onset detection requires training-split deltas")
        deltas = soh_deltas(soh)
        flagged = np.flatnonzero((deltas > gamma_plus) | (deltas < gamma_minus))
        return [int(k) + 2 for k in flagged]

    raise ValueError(f"Unknown onset method: {method}")


def find_recovery_point(soh: Sequence[float], k_s: int, epsilon: float, W: int) -> int:
    """
    Earliest k_e >= k_s whose next W cycles all sit within epsilon of SOH[k_s - 1].

    Returns len(soh) + 1 when the series never recovers.
    """
    if k_s < 2:
        raise ValueError(f"Onset must be >= 2, got {k_s}")
    soh = np.asarray(soh, dtype=np.float64)
    n = len(soh)
    reference = soh[k_s - 2]
    within = np.abs(soh - reference) <= epsilon
    for k_e in range(k_s, n - W + 2):
        if within[k_e - 1:k_e - 1 + W].all():
            return k_e
    return n + 1


def smooth_region_pchip(soh: Sequence[float], k_s: int, k_e: int, M_anchor: int) -> np.ndarray:
    """Replace cycles k_s..k_e with a PCHIP interpolant through up to M_anchor cycles per side."""
    out = np.array(soh, dtype=np.float64)
    n = len(out)
    k_e = min(k_e, n)
    if k_s <= 1 and k_e >= n:
        raise CannotSmooth("Artifact region covers the entire series")
    anchors = list(range(max(1, k_s - M_anchor), k_s)) + list(range(k_e + 1, min(n, k_e + M_anchor) + 1))
    if len(anchors) < 2:
        raise CannotSmooth(f"Region [{k_s}, {k_e}] leaves {len(anchors)} anchor cycle(s)")
    x = np.asarray(anchors, dtype=np.float64)
    interpolant = PchipInterpolator(x, out[np.asarray(anchors) - 1], extrapolate=True)
    region = np.arange(k_s, k_e + 1)
    out[region - 1] = interpolant(region.astype(np.float64))
    return out


def smooth_artifacts(
    soh: Sequence[float], onsets: Sequence[int], params: SmoothingParams = SmoothingParams()
) -> Tuple[np.ndarray, List[Tuple[int, int]], List[int]]:
    """Apply recovery search and PCHIP smoothing to every onset; returns (soh, regions, unrecovered)."""
    out = np.array(soh, dtype=np.float64)
    n = len(out)
    regions: List[Tuple[int, int]] = []
    unrecovered: List[int] = []
    covered_until = 0
    for k_s in sorted(set(onsets)):
        if k_s <= covered_until or k_s < 2:
            continue
        k_e = find_recovery_point(out, k_s, params.epsilon, params.W)
        if k_e > n:
            logger.warning(f"No recovery point after onset at cycle {k_s}; left unsmoothed")
            unrecovered.append(k_s)
            continue
        try:
            out = smooth_region_pchip(out, k_s, k_e, params.M_anchor)
        except CannotSmooth as e:
            logger.warning(f"Onset at cycle {k_s} not smoothed: {e}")
            unrecovered.append(k_s)
            continue
        regions.append((k_s, k_e))
        covered_until = k_e
    return out, regions, unrecovered


# EOL

def compute_eol(soh: Sequence[float], tau: float) -> int:
    """First cycle (1-based) with SOH strictly below tau."""
    below = np.flatnonzero(np.asarray(soh, dtype=np.float64) < tau)
    if below.size == 0:
        raise NoEol(f"SOH never drops below {tau}")
    return int(below[0]) + 1


def filter_and_extrapolate(soh: Sequence[float], tau: float,
                           params: SmoothingParams = SmoothingParams()) -> FilterOutcome:
    """
    Exclude batteries that never come within the margin of tau, locate EOL,
    or extend the tail linearly until it crosses tau.
    """
    soh = np.asarray(soh, dtype=np.float64)
    lowest = float(soh.min())
    if lowest > tau + params.filter_margin:
        return FilterOutcome(
            trajectory=None,
            excluded=True,
            reason=f"insufficient degradation: min SOH {lowest:.4f} > tau + {params.filter_margin}",
        )
    if lowest < tau:
        return FilterOutcome(trajectory=SohTrajectory(soh=soh, t_eol=compute_eol(soh, tau)))

    n = len(soh)
    window = min(params.extrap_window, n)
    cycles = np.arange(n - window + 1, n + 1, dtype=np.float64)
    slope, intercept = np.polyfit(cycles, soh[-window:], 1)
    if slope >= 0:
        raise NonDegradingTail(f"Tail slope {slope:.3g} does not reach tau={tau}")
    crossing = round((tau - intercept) / slope, 9)
    t_eol = max(int(np.floor(crossing)) + 1, n + 1)
    if t_eol - n > params.max_extrapolated_cycles:
        raise NonDegradingTail(f"Tail reaches tau only after {t_eol - n} extrapolated cycles")
    extra_cycles = np.arange(n + 1, t_eol + 1, dtype=np.float64)
    extra = intercept + slope * extra_cycles
    extra[:-1] = np.maximum(extra[:-1], tau)
    if extra[-1] >= tau:
        extra[-1] = np.nextafter(tau, 0.0)
    logger.debug(f"Extrapolated {len(extra)} cycles from cycle {n + 1}; EOL at {t_eol}")
    return FilterOutcome(
        trajectory=SohTrajectory(soh=np.concatenate([soh, extra]), t_eol=t_eol, extrapolated_from=n + 1)
    )


# SOC and resampling

def compute_soc(capacity: Sequence[float], endpoints: Tuple[float, float],
                soc_interval: Tuple[float, float], direction: str) -> np.ndarray:
    """Linear capacity-to-SOC map over one segment, clamped to [0, 1]."""
    q = np.asarray(capacity, dtype=np.float64)
    q_start, q_end = endpoints
    if q_end == q_start:
        raise DegenerateSegment(f"Segment capacity endpoints coincide at {q_start}")
    soc_start, soc_end = soc_interval
    fraction = (q - q_start) / (q_end - q_start)
    if direction == "charge":
        soc = soc_start + fraction * (soc_end - soc_start)
    elif direction == "discharge":
        soc = soc_end + fraction * (soc_start - soc_end)
    else:
        raise ValueError(f"Unknown direction: {direction}")
    return np.clip(soc, 0.0, 1.0)


def cycle_soc(cycle: CycleRecord, soc_interval: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """SOC series of the charge and discharge segments of one cycle."""
    charge_q = segment_capacity(cycle, cycle.charge_span)
    discharge_q = segment_capacity(cycle, cycle.discharge_span)
    charge_soc = compute_soc(charge_q, (charge_q[0], charge_q[-1]), soc_interval, "charge")
    discharge_soc = compute_soc(discharge_q, (discharge_q[0], discharge_q[-1]), soc_interval, "discharge")
    return charge_soc, discharge_soc


def _resample_segment(channels: List[np.ndarray], soc: np.ndarray, grid: np.ndarray,
                      ascending: bool) -> np.ndarray:
    if not ascending:
        soc = soc[::-1]
        channels = [c[::-1] for c in channels]
    if np.any(np.diff(soc) < 0) or soc[-1] <= soc[0]:
        raise ResampleFailure("SOC is not monotone within the segment")
    columns = [np.interp(grid, soc, channel) for channel in channels]
    columns.append(grid)
    return np.stack(columns, axis=1)


def resample_cycle(cycle: CycleRecord, charge_soc: np.ndarray, discharge_soc: np.ndarray, L: int,
                   soc_interval: Tuple[float, float], nominal_capacity: float) -> np.ndarray:
    """
    Resample one cycle onto a fixed SOC grid: L/2 ascending charge points,
    then L/2 descending discharge points. Columns are (V, C-rate, Ah, SOC).
    Rest samples outside the two spans are dropped.
    """
    if L % 2:
        raise ValueError(f"L must be even, got {L}")
    half = L // 2
    soc_start, soc_end = soc_interval
    parts = []
    for span, soc, ascending in ((cycle.charge_span, charge_soc, True),
                                 (cycle.discharge_span, discharge_soc, False)):
        start, stop = span
        voltage = cycle.voltage[start:stop]
        c_rate = np.abs(cycle.current[start:stop]) / nominal_capacity
        capacity = segment_capacity(cycle, span)
        grid = np.linspace(soc_start, soc_end, half) if ascending else np.linspace(soc_end, soc_start, half)
        parts.append(_resample_segment([voltage, c_rate, capacity], np.asarray(soc), grid, ascending))
    return np.concatenate(parts, axis=0)


def compute_cycle_descriptors(cycle: CycleRecord) -> Tuple[float, float]:
    """(coulombic efficiency, energy efficiency) as discharge-to-charge ratios."""
    charge_ah = compute_cycle_capacity(cycle, cycle.charge_span)
    discharge_ah = compute_cycle_capacity(cycle, cycle.discharge_span)
    if charge_ah <= 0:
        raise InvalidCycle("Zero charge capacity")
    charge_wh = _segment_energy(cycle, cycle.charge_span)
    discharge_wh = _segment_energy(cycle, cycle.discharge_span)
    if charge_wh <= 0:
        raise InvalidCycle("Zero charge energy")
    return discharge_ah / charge_ah, discharge_wh / charge_wh


def _segment_energy(cycle: CycleRecord, span: Tuple[int, int]) -> float:
    start, stop = span
    if cycle.energy is not None:
        # Per-sample Wh; the first sample's entry belongs to the interval before the span.
        return float(np.sum(np.abs(cycle.energy[start + 1:stop])))
    power = np.abs(cycle.voltage[start:stop] * cycle.current[start:stop])
    return float(trapezoid(power, cycle.timestamps[start:stop]) / SECONDS_PER_HOUR)


# Inputs and targets

def build_model_input(record: BatteryRecord, S: int, config: ModelConfig) -> ModelInput:
    """Rows 1..S from the record's first S cycles; rows S+1..S_max all zero."""
    if not 1 <= S <= config.S_max:
        raise ValueError(f"S must lie in 1..{config.S_max}, got {S}")
    if record.n_cycles < S:
        raise ValueError(f"Record {record.battery_id} has {record.n_cycles} cycles, needs {S}")
    X = np.zeros((config.S_max, config.L, N_CHANNELS))
    X_f = np.zeros((config.S_max, N_DESCRIPTORS))
    nominal = record.condition.nominal_capacity
    for index in range(1, S + 1):
        cycle = record.cycle(index)
        try:
            charge_soc, discharge_soc = cycle_soc(cycle, record.soc_interval)
            X[index - 1] = resample_cycle(cycle, charge_soc, discharge_soc, config.L,
                                          record.soc_interval, nominal)
            X_f[index - 1] = compute_cycle_descriptors(cycle)
        except BatteryForecastError as e:
            raise CycleProcessingError(index, e) from e
    cycle_mask = np.zeros(config.S_max, dtype=np.int8)
    cycle_mask[:S] = 1
    return ModelInput(X=X, X_f=X_f, cycle_mask=cycle_mask, condition_key=record.condition.key, S=S)


def build_target(trajectory: SohTrajectory, S: int, tau: float, T_max: int) -> Target:
    """Normalized SOH on the prediction region S < j <= t_eol, zero elsewhere."""
    if trajectory.t_eol is None:
        raise NothingToPredict("Trajectory has no EOL")
    if trajectory.t_eol <= S:
        raise NothingToPredict(f"EOL at cycle {trajectory.t_eol} is within the first {S} cycles")
    end = min(trajectory.t_eol, T_max, trajectory.n_cycles)
    if end <= S:
        raise NothingToPredict(f"Horizon T_max={T_max} leaves nothing after cycle {S}")
    y_norm = np.zeros(T_max)
    mask = np.zeros(T_max, dtype=np.int8)
    y_norm[S:end] = normalize_soh(trajectory.soh[S:end], tau)
    mask[S:end] = 1
    return Target(y_norm=y_norm, mask=mask, tau=tau)


@dataclass(frozen=True, eq=False)
class ProcessedSample:
    """
    One preprocessed battery: input rows for up to S_max early cycles, the
    cleaned (possibly extrapolated) trajectory, and provenance.
    """

    battery_id: str
    condition: AgingCondition
    tau: float
    inputs: ModelInput
    trajectory: SohTrajectory
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def condition_key(self) -> str:
        return self.condition.key

    def model_input(self, S: int) -> ModelInput:
        return self.inputs.truncate(S)

    def target(self, S: int, T_max: int) -> Target:
        return build_target(self.trajectory, S, self.tau, T_max)

    def view(self, S: int, T_max: int) -> Tuple[ModelInput, Target]:
        """Input and target for S usable cycles; S is capped at the stored row count."""
        S = min(S, self.inputs.S)
        return self.model_input(S), self.target(S, T_max)


def preprocess_record(
    record: BatteryRecord,
    params: SmoothingParams = SmoothingParams(),
    config: ModelConfig = ModelConfig(),
    training_deltas: Optional[Sequence[float]] = None,
) -> Union[ProcessedSample, Exclusion]:
    """Full cleaning chain for one battery; failures come back as an Exclusion."""
    violations = validate_record(record)
    if violations:
        return Exclusion(record.battery_id, "invalid record: " + "; ".join(str(v) for v in violations))
    try:
        raw = compute_soh_series(record)
        soh = clip_spikes(raw.soh, params)
        clipped = int(np.count_nonzero(soh != raw.soh))
        onsets = detect_artifact_onsets(soh, record.cycle_start_times(), params,
                                        training_deltas, record.rpt_times)
        soh, regions, unrecovered = smooth_artifacts(soh, onsets, params)
        outcome = filter_and_extrapolate(soh, record.tau, params)
        if outcome.excluded:
            return Exclusion(record.battery_id, outcome.reason or "excluded")
        trajectory = outcome.trajectory
        rows = min(config.S_max, record.n_cycles)
        inputs = build_model_input(record, rows, config)
        sample = ProcessedSample(
            battery_id=record.battery_id,
            condition=record.condition,
            tau=record.tau,
            inputs=inputs,
            trajectory=trajectory,
            provenance={
                "clipped_spikes": clipped,
                "onsets": list(onsets),
                "smoothed_regions": [list(r) for r in regions],
                "unrecovered_onsets": unrecovered,
                "t_eol": trajectory.t_eol,
                "extrapolated_from": trajectory.extrapolated_from,
            },
        )
        sample.target(min(config.S, rows), config.T_max)
    except BatteryForecastError as e:
        return Exclusion(record.battery_id, f"{type(e).__name__}: {e}")
    logger.debug(f"Preprocessed {record.battery_id}: EOL {trajectory.t_eol}, {len(regions)} region(s) smoothed")
    return sample
