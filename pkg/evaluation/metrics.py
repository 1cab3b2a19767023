from typing import List

import numpy as np

from app.backend.core.schemas import MetricsRecord
from app.backend.services.trainer import TrainResult


def final_error(result: TrainResult) -> float:
    return result.final("test").error_rate


def overfitting_gap(history: List[MetricsRecord], epoch: int = -1) -> float:
    """Test loss minus train loss at ``epoch`` (default: the last one); grows with overfitting."""
    epochs = sorted({r.epoch for r in history})
    if not epochs:
        raise ValueError("empty history")
    target = epochs[epoch]
    by_split = {r.split: r.loss for r in history if r.epoch == target}
    return by_split["test"] - by_split["train"]


def mean_std(values: List[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "runs": len(values)}


def loss_curves(history: List[MetricsRecord]) -> dict:
    """Per-epoch losses split by train/test, as plain lists for JSON/CSV."""
    curves = {"train": [], "test": []}
    for r in sorted(history, key=lambda r: (r.epoch, r.split)):
        curves[r.split].append(r.loss)
    return curves
