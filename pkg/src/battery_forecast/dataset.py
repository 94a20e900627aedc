"""
Processed-sample files and torch data loading.
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .core import AgingCondition, PathLike, SohTrajectory
from .preprocess import ModelInput, ProcessedSample

logger = logging.getLogger(__name__)

SAMPLE_SUFFIX = ".npz"
SAMPLE_FORMAT = "battery-forecast-sample/1"
# Fixed member timestamp so identical samples produce identical bytes.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def sample_path(directory: PathLike, battery_id: str) -> Path:
    return Path(directory) / f"{battery_id}{SAMPLE_SUFFIX}"


def save_sample(sample: ProcessedSample, path: PathLike) -> Path:
    """Write arrays and JSON metadata as an uncompressed, byte-stable .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "format": SAMPLE_FORMAT,
        "battery_id": sample.battery_id,
        "condition": sample.condition.to_dict(),
        "tau": sample.tau,
        "rows": sample.inputs.S,
        "t_eol": sample.trajectory.t_eol,
        "extrapolated_from": sample.trajectory.extrapolated_from,
        "provenance": sample.provenance,
    }
    arrays = {
        "X": sample.inputs.X,
        "X_f": sample.inputs.X_f,
        "cycle_mask": sample.inputs.cycle_mask,
        "soh": np.asarray(sample.trajectory.soh),
        "metadata": np.array(json.dumps(metadata, sort_keys=True)),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE), buffer.getvalue())
    return path


def load_sample(path: PathLike) -> ProcessedSample:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Processed sample not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        metadata = json.loads(str(data["metadata"].item()))
        condition = AgingCondition.from_dict(metadata["condition"])
        inputs = ModelInput(
            X=data["X"],
            X_f=data["X_f"],
            cycle_mask=data["cycle_mask"],
            condition_key=condition.key,
            S=int(metadata["rows"]),
        )
        trajectory = SohTrajectory(
            soh=data["soh"],
            t_eol=metadata["t_eol"],
            extrapolated_from=metadata["extrapolated_from"],
        )
    return ProcessedSample(
        battery_id=metadata["battery_id"],
        condition=condition,
        tau=float(metadata["tau"]),
        inputs=inputs,
        trajectory=trajectory,
        provenance=metadata.get("provenance", {}),
    )


def load_samples(directory: PathLike) -> List[ProcessedSample]:
    """All processed samples in a directory, ordered by battery id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Sample directory not found: {directory}")
    samples = [load_sample(p) for p in sorted(directory.glob(f"*{SAMPLE_SUFFIX}"))]
    logger.info(f"Loaded {len(samples)} processed samples from {directory}")
    return samples


@dataclass
class Batch:
    X: torch.Tensor
    X_f: torch.Tensor
    cycle_mask: torch.Tensor
    y_norm: torch.Tensor
    mask: torch.Tensor
    tau: torch.Tensor
    conditions: List[AgingCondition]
    battery_ids: List[str]

    def __len__(self) -> int:
        return len(self.battery_ids)

    def to(self, dtype: torch.dtype) -> "Batch":
        """Cast the floating-point tensors (used for 64-bit gradient checks)."""
        return Batch(
            X=self.X.to(dtype),
            X_f=self.X_f.to(dtype),
            cycle_mask=self.cycle_mask,
            y_norm=self.y_norm.to(dtype),
            mask=self.mask.to(dtype),
            tau=self.tau.to(dtype),
            conditions=self.conditions,
            battery_ids=self.battery_ids,
        )


class ForecastDataset(Dataset):
    """Samples viewed with S usable early cycles and targets padded to T_max."""

    def __init__(self, samples: Sequence[ProcessedSample], S: int, T_max: int):
        self.samples = list(samples)
        self.S = S
        self.T_max = T_max

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, object]:
        sample = self.samples[index]
        inputs, target = sample.view(self.S, self.T_max)
        return {
            "X": inputs.X,
            "X_f": inputs.X_f,
            "cycle_mask": inputs.cycle_mask,
            "y_norm": target.y_norm,
            "mask": target.mask,
            "tau": target.tau,
            "condition": sample.condition,
            "battery_id": sample.battery_id,
        }


def collate_samples(items: List[Dict[str, object]]) -> Batch:
    dtype = torch.get_default_dtype()

    def stack(name: str) -> torch.Tensor:
        return torch.as_tensor(np.stack([item[name] for item in items]), dtype=dtype)

    return Batch(
        X=stack("X"),
        X_f=stack("X_f"),
        cycle_mask=torch.as_tensor(np.stack([item["cycle_mask"] for item in items])).bool(),
        y_norm=stack("y_norm"),
        mask=stack("mask"),
        tau=torch.tensor([item["tau"] for item in items], dtype=dtype),
        conditions=[item["condition"] for item in items],
        battery_ids=[item["battery_id"] for item in items],
    )


def make_loader(dataset: ForecastDataset, batch_size: int, shuffle: bool = False,
                seed: Optional[int] = None) -> DataLoader:
    """DataLoader with a seeded generator so the data order is fixed per seed."""
    generator = None
    if shuffle:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        collate_fn=collate_samples,
        generator=generator,
    )


def full_batch(samples: Sequence[ProcessedSample], S: int, T_max: int) -> Batch:
    dataset = ForecastDataset(samples, S, T_max)
    return collate_samples([dataset[i] for i in range(len(dataset))])


def predictable(samples: Sequence[ProcessedSample], S: int, T_max: int) -> List[ProcessedSample]:
    """Samples whose prediction region (S, min(t_eol, T_max)] is nonempty."""
    kept = []
    for sample in samples:
        usable = min(S, sample.inputs.S)
        t_eol = sample.trajectory.t_eol
        if t_eol is not None and min(t_eol, T_max, sample.trajectory.n_cycles) > usable:
            kept.append(sample)
        else:
            logger.debug(f"Skipping {sample.battery_id}: nothing to predict after cycle {usable}")
    return kept
