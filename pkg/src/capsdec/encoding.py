"""Per-voxel linear encoding from 16-d capsule features and R^2-based voxel selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .tensor import DimensionError

RIDGE_JITTER = 1e-8


class DegenerateFitError(ValueError):
    pass


class UndefinedVarianceError(ValueError):
    pass


@dataclass
class EncodingModel:
    weights: np.ndarray  # V×(F+1): feature coefficients then intercept, for z-scored activity
    r2: np.ndarray  # V
    selected: np.ndarray  # k voxel indices, best first

    @property
    def k(self) -> int:
        return int(self.selected.size)


def _design(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError(f"features must be N×F, got {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise DegenerateFitError(f"need at least 2 samples, got {n}")
    if np.all(features.std(axis=0) == 0):
        raise DegenerateFitError("every feature is constant; the fit has no unique solution")
    return np.hstack([features, np.ones((n, 1))])


def _solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    gram = x.T @ x
    gram[np.diag_indices_from(gram)] += RIDGE_JITTER
    return np.linalg.solve(gram, x.T @ y)


def fit_voxel(features, activity) -> np.ndarray:
    """Least-squares coefficients (features..., intercept) for one voxel."""
    x = _design(features)
    y = np.asarray(activity, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise DimensionError(f"activity shape {y.shape} does not match {x.shape[0]} samples")
    return _solve(x, y)


def fit_voxels(features, activity) -> np.ndarray:
    """Vectorised :func:`fit_voxel` over the columns of ``activity`` (N×V); returns V×(F+1)."""
    x = _design(features)
    y = np.asarray(activity, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise DimensionError(f"activity shape {y.shape} does not match {x.shape[0]} samples")
    return _solve(x, y).T


def predict(features, weights) -> np.ndarray:
    x = _design(features)
    return x @ np.asarray(weights).T


def r_squared(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or a.ndim != 1:
        raise DimensionError(f"r_squared needs equal-length vectors, got {p.shape} and {a.shape}")
    if a.size < 2:
        raise UndefinedVarianceError("need at least 2 observations")
    ss_tot = np.sum((a - a.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedVarianceError("actual values are constant")
    return float(1.0 - np.sum((a - p) ** 2) / ss_tot)


def _column_r2(pred: np.ndarray, actual: np.ndarray) -> np.ndarray:
    ss_tot = np.sum((actual - actual.mean(axis=0)) ** 2, axis=0)
    ss_res = np.sum((actual - pred) ** 2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    # a constant voxel has no variance to explain
    return np.where(ss_tot > 0, r2, 0.0)


def zscore(activity: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = activity.mean(axis=0)
    std = activity.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return (activity - mean) / safe, mean, safe


def rank_voxels(r2: np.ndarray) -> np.ndarray:
    """Voxel indices by descending R^2; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(r2), kind="stable")


def build_encoding(features, activity, k: int = 100) -> EncodingModel:
    """Fit every voxel on the training samples and keep the ``k`` best by training-fit R^2.

    ``features`` is N×16 (the longest capsule of each stimulus), ``activity``
    is N×V.  Each voxel is z-scored over these samples before fitting.
    """
    activity = np.asarray(activity, dtype=np.float64)
    if activity.ndim != 2:
        raise DimensionError(f"activity must be N×V, got {activity.shape}")
    v = activity.shape[1]
    if not 1 <= k <= v:
        raise ValueError(f"k={k} must lie in 1..{v}")
    z, _, _ = zscore(activity)
    weights = fit_voxels(features, z)
    r2 = _column_r2(predict(features, weights), z)
    selected = rank_voxels(r2)[:k]
    return EncodingModel(weights, r2, selected)


def build_encoding_from_pairs(pairs, k: int = 100) -> EncodingModel:
    """Same as :func:`build_encoding` for a list of ``(capsule16, voxel_vector)`` pairs."""
    feats = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    vox = [np.asarray(p[1], dtype=np.float64) for p in pairs]
    if len({x.shape for x in vox}) != 1:
        raise DimensionError("voxel vectors differ in length")
    return build_encoding(feats, np.stack(vox), k)


def save_encoding(model: EncodingModel, path) -> None:
    header = {"kind": "encoding", "voxels": model.weights.shape[0], "k": model.k}
    checkpoint.save(path, header, {"weights": model.weights, "r2": model.r2,
                                   "selected": model.selected.astype(np.float32)})


def load_encoding(path) -> EncodingModel:
    header, t = checkpoint.load(path)
    if header.get("kind") != "encoding":
        raise checkpoint.CheckpointError(f"{path}: not an encoding checkpoint")
    return EncodingModel(t["weights"].astype(np.float64), t["r2"].astype(np.float64),
                         t["selected"].astype(np.int64))
