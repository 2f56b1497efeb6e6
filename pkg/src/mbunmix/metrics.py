"""Abundance estimation quality metrics."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# incremented whenever rmsaad meets a zero-norm abundance vector
diagnostics: Counter = Counter()


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim == 1:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise ValueError(f"expected (N, c) abundances, got {pred.shape}")
    return pred, gt


def rmse(pred, gt) -> float:
    """Root of the mean squared error over all N*c entries."""
    pred, gt = _pair(pred, gt)
    return math.sqrt(float(np.mean((pred - gt) ** 2)))


def per_endmember_rmse(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.sqrt(np.mean((pred - gt) ** 2, axis=0))


def aad(pred, gt) -> np.ndarray:
    """Per-pixel angle (radians) between predicted and true abundance vectors.

    A zero-norm vector on either side yields pi/2 and is counted in
    ``diagnostics["zero_norm"]``.
    """
    pred, gt = _pair(pred, gt)
    norms = np.linalg.norm(pred, axis=1) * np.linalg.norm(gt, axis=1)
    zero = norms == 0
    cos = np.einsum("ij,ij->i", pred, gt) / np.where(zero, 1.0, norms)
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    if zero.any():
        n = int(zero.sum())
        diagnostics["zero_norm"] += n
        log.debug("rmsaad: %d zero-norm abundance vectors", n)
        angles[zero] = math.pi / 2
    return angles


def rmsaad(pred, gt) -> float:
    """Root mean square of the per-pixel abundance angle distance."""
    angles = aad(pred, gt)
    return math.sqrt(float(np.mean(angles ** 2)))


@dataclass
class EvalReport:
    dataset: str
    variant: str
    fold: int
    fraction: float
    patch: int
    snr_db: float | None
    rmse: float
    rmsaad: float
    per_endmember: list[float] = field(default_factory=list)
    train_seconds: float | None = None
    infer_seconds: float | None = None

    def __post_init__(self):
        if self.rmse < 0 or any(v < 0 for v in self.per_endmember):
            raise ValueError("RMSE values must be non-negative")
        if not 0.0 <= self.rmsaad <= math.pi:
            raise ValueError(f"rmsAAD {self.rmsaad} outside [0, pi]")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, gt, **fields) -> EvalReport:
    return EvalReport(rmse=rmse(pred, gt), rmsaad=rmsaad(pred, gt),
                      per_endmember=[float(v) for v in per_endmember_rmse(pred, gt)], **fields)
