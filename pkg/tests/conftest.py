"""
Shared fixtures: a tiny model configuration, a small synthetic dataset and
hand-built cycles with closed-form capacities.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from battery_forecast.core import CycleRecord, ModelConfig
from battery_forecast.model import build_model
from battery_forecast.preprocess import ProcessedSample, SmoothingParams, preprocess_record
from battery_forecast.synthgen import SynthSpec, generate_dataset

TINY_MODEL = {
    "d": 8,
    "L": 20,
    "S_max": 8,
    "S": 4,
    "P": 5,
    "h": 2,
    "s_bar": 2,
    "L_de": 2,
    "L_intra": 1,
    "N_mem": 4,
    "d_ff": 16,
    "d_ffs": 16,
    "d_mem": 16,
    "d_enc": 8,
    "T_max": 200,
    "dropout": 0.0,
    "lr": 1e-3,
    "batch_size": 4,
    "max_epochs": 2,
    "patience": 2,
    "seed": 0,
}

TINY_SPEC = {
    "seed": 7,
    "n_conditions": 4,
    "batteries_per_condition": 2,
    "life_range": [120, 180],
    "samples_per_segment": 8,
    "noise_sd": 0.0005,
}


@pytest.fixture(scope="session")
def tiny_settings():
    """Raw settings as they would appear in config files."""
    return {"model": dict(TINY_MODEL), "spec": dict(TINY_SPEC)}


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope="session")
def tiny_spec() -> SynthSpec:
    return SynthSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def synthetic_pairs(tiny_spec):
    """(record, truth) for every tiny synthetic battery."""
    return generate_dataset(tiny_spec)


@pytest.fixture(scope="session")
def synthetic_records(synthetic_pairs):
    return [record for record, _ in synthetic_pairs]


@pytest.fixture(scope="session")
def tiny_samples(synthetic_records):
    config = ModelConfig(**TINY_MODEL)
    samples = [preprocess_record(r, SmoothingParams(), config) for r in synthetic_records]
    assert all(isinstance(s, ProcessedSample) for s in samples), samples
    return samples


@pytest.fixture
def tiny_model(tiny_config, tiny_samples):
    return build_model(tiny_config, [s.condition for s in tiny_samples])


@pytest.fixture
def cycle_factory():
    """
    Build a cycle with constant-current charge and discharge segments and
    voltage linear in time over each segment.
    """

    def make(current: float = 2.0, duration: float = 1800.0, samples: int = 10,
             charge_v=(3.0, 4.0), discharge_v=(4.0, 3.0), discharge_current=None) -> CycleRecord:
        discharge_current = current if discharge_current is None else discharge_current
        charge_t = np.linspace(0.0, duration, samples)
        discharge_t = duration + 60.0 + np.linspace(0.0, duration * current / discharge_current, samples)
        return CycleRecord(
            timestamps=np.concatenate([charge_t, discharge_t]),
            voltage=np.concatenate([np.linspace(*charge_v, samples), np.linspace(*discharge_v, samples)]),
            current=np.concatenate([np.full(samples, current), np.full(samples, -discharge_current)]),
            charge_span=(0, samples),
            discharge_span=(samples, 2 * samples),
        )

    return make
