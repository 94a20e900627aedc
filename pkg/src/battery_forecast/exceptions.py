"""
Exception hierarchy for the battery forecasting pipeline.
Every error raised on purpose by this package derives from BatteryForecastError.
"""

from typing import Optional


class BatteryForecastError(Exception):
    """Root of all pipeline errors."""


class ConfigError(BatteryForecastError):
    """Configuration file or object is malformed."""


# Records and preprocessing

class InvalidRecord(BatteryForecastError):
    """A battery record violates a structural invariant."""


class InvalidSpan(BatteryForecastError):
    """A charge or discharge span is too short to integrate."""


class InvalidCycle(BatteryForecastError):
    """A cycle cannot produce descriptors."""


class CycleProcessingError(BatteryForecastError):
    """Wraps a per-cycle failure with the 1-based cycle index."""

    def __init__(self, cycle_index: int, cause: Exception):
        super().__init__(f"cycle {cycle_index}: {type(cause).__name__}: {cause}")
        self.cycle_index = cycle_index
        self.cause = cause


class MissingThresholdSource(ConfigError):
    """Percentile onset detection needs training-split deltas or fixed thresholds."""


class CannotSmooth(BatteryForecastError):
    """The artifact region leaves no anchor cycles to interpolate from."""


class NonDegradingTail(BatteryForecastError):
    """Linear extrapolation of the tail does not head towards the EOL threshold."""


class NoEol(BatteryForecastError):
    """The SOH series never drops below the threshold."""


class DegenerateSegment(BatteryForecastError):
    """Segment capacity endpoints coincide, so SOC is undefined."""


class ResampleFailure(BatteryForecastError):
    """SOC is not monotone within a segment."""


class NothingToPredict(BatteryForecastError):
    """End of life falls inside the observed early cycles."""


# Embeddings

class MissingEmbedding(BatteryForecastError):
    """Condition key absent from the external embedding file."""


class DimensionMismatch(BatteryForecastError):
    """Embedding width differs from the configured d_enc."""


# Model

class AllKeysMasked(BatteryForecastError):
    """Attention was asked to attend over a fully masked key set."""


class DegenerateQuery(BatteryForecastError):
    """Memory query has zero norm, so cosine similarity is undefined."""


# Training and evaluation

class EmptyBatch(BatteryForecastError):
    """No sample in the batch has an observed prediction-region cycle."""


class TrainingDiverged(BatteryForecastError):
    """Loss became non-finite; carries the last finite fit result."""

    def __init__(self, message: str, result: Optional[object] = None):
        super().__init__(message)
        self.result = result


class InsufficientConditions(BatteryForecastError):
    """Too few distinct aging conditions for the requested split."""


class ConditionLeakage(BatteryForecastError):
    """A test condition also appears in training or validation."""


class NothingToScore(BatteryForecastError):
    """Target mask is empty."""


class InvalidSegment(BatteryForecastError):
    """Capacity is not monotone over a DVA segment."""
