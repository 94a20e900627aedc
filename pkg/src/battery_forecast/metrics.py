"""
Forecast scoring on the original SOH scale, and the persistence baseline.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import NothingToScore
from .preprocess import ProcessedSample, Target, denormalize_soh, normalize_soh


@dataclass(frozen=True)
class BatteryScore:
    battery_id: str
    mape: float
    mae: float
    split: int = 0

    def to_dict(self):
        return {"battery_id": self.battery_id, "split": self.split, "mape": self.mape, "mae": self.mae}


def compute_metrics(y_hat_norm: np.ndarray, target: Target) -> Tuple[float, float]:
    """(MAPE %, MAE) over mask=1 cycles after denormalizing both series."""
    mask = np.asarray(target.mask).astype(bool)
    if not mask.any():
        raise NothingToScore("Target mask is empty")
    truth = denormalize_soh(np.asarray(target.y_norm, dtype=np.float64)[mask], target.tau)
    forecast = denormalize_soh(np.asarray(y_hat_norm, dtype=np.float64)[mask], target.tau)
    error = np.abs(truth - forecast)
    return float(np.mean(error / np.abs(truth)) * 100.0), float(np.mean(error))


def persistence_forecast(sample: ProcessedSample, S: int, T_max: int) -> np.ndarray:
    """Last observed SOH (cycle S) repeated over the whole horizon, normalized."""
    S = min(S, sample.inputs.S)
    last = sample.trajectory.at(S)
    return np.full(T_max, normalize_soh(last, sample.tau))


def score_persistence(sample: ProcessedSample, S: int, T_max: int) -> BatteryScore:
    _, target = sample.view(S, T_max)
    mape, mae = compute_metrics(persistence_forecast(sample, S, T_max), target)
    return BatteryScore(sample.battery_id, mape, mae)
