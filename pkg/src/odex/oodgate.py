"""Distribution gate: per-stage feature Gaussians, cumulative
Mahalanobis distances, and the expansion-threshold calibration.

A model's history is the ordered list of Gaussians of every stage it
was trained on; distances to a history are summed over its entries so
old training distributions keep contributing to shift detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

EPS_FLOOR = 1e-12
XI_FLOOR = 0.1  # reuse threshold floor on the normalized scale


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    """Mean/covariance of one stage's pooled features plus the cached
    precision of the ridge-regularized covariance."""

    mu: np.ndarray
    sigma: np.ndarray
    precision: np.ndarray
    regularization_eps: float
    n_samples: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


History = Sequence[GaussianStats]


@dataclass(frozen=True)
class ThresholdCalibration:
    """Normalization constants and threshold xi on the normalized
    scale: d maps to (d - d_min) / (2*d_max - d_min)."""

    d_min: float
    d_max: float
    xi: float

    @property
    def denom(self) -> float:
        return max(2.0 * self.d_max - self.d_min, EPS_FLOOR)


def fit_gaussian(features: np.ndarray, eps_scale: float = 1e-6) -> GaussianStats:
    """Population-covariance Gaussian of the feature rows.

    The cached precision inverts sigma + eps*I with
    eps = eps_scale * trace(sigma) / dim, floored at 1e-12.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected (N, C) features, got shape {z.shape}")
    n, c = z.shape
    if n < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = z.mean(axis=0)
    centered = z - mu
    sigma = centered.T @ centered / n
    sigma = (sigma + sigma.T) / 2.0
    eps = max(eps_scale * np.trace(sigma) / c, EPS_FLOOR)
    regularized = sigma + eps * np.eye(c)
    try:
        chol = cho_factor(regularized, lower=True)
        precision = cho_solve(chol, np.eye(c))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            f"covariance not invertible even with ridge eps={eps}") from exc
    precision = (precision + precision.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma, precision=precision,
                         regularization_eps=eps, n_samples=n)


def mahalanobis(stats: GaussianStats, z: np.ndarray) -> float:
    """sqrt((z - mu)^T precision (z - mu)), clipped at 0."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != stats.mu.shape:
        raise ValueError(f"feature dim {z.shape} != gaussian dim {stats.mu.shape}")
    d = z - stats.mu
    val = d @ stats.precision @ d
    return float(np.sqrt(max(val, 0.0)))


def mahalanobis_batch(stats: GaussianStats, z: np.ndarray) -> np.ndarray:
    """Vectorized mahalanobis over feature rows (N, C) -> (N,)."""
    d = np.asarray(z, dtype=np.float64) - stats.mu
    val = np.einsum("ni,ij,nj->n", d, stats.precision, d)
    return np.sqrt(np.maximum(val, 0.0))


def summed_history_distance(history: History, z: np.ndarray) -> float:
    if len(history) == 0:
        raise ValueError("history is empty")
    return float(sum(mahalanobis(stats, z) for stats in history))


def summed_history_distance_batch(history: History, z: np.ndarray) -> np.ndarray:
    if len(history) == 0:
        raise ValueError("history is empty")
    return np.sum([mahalanobis_batch(stats, z) for stats in history], axis=0)


def stage_distance(history: History, stage_features: np.ndarray) -> float:
    """Mean summed history distance over a stage's feature vectors."""
    z = np.asarray(stage_features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("stage_features must be a nonempty (N, C) array")
    return float(summed_history_distance_batch(history, z).mean())


def calibrate_threshold(in_dist_distances) -> ThresholdCalibration:
    """Threshold from the distances of a model's own training data.

    Distances normalize between their minimum and the doubled maximum,
    so every calibration value lands in [0, 0.5]; xi is twice the mean
    normalized value, floored at XI_FLOOR so a degenerate (constant)
    calibration still lets identical data reuse the model.
    """
    d = np.asarray(in_dist_distances, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need at least 2 in-distribution distances")
    if d.min() < 0.0:
        raise ValueError("distances must be nonnegative")
    d_min, d_max = float(d.min()), float(d.max())
    denom = max(2.0 * d_max - d_min, EPS_FLOOR)
    normalized = (d - d_min) / denom
    xi = max(2.0 * float(normalized.mean()), XI_FLOOR)
    return ThresholdCalibration(d_min=d_min, d_max=d_max, xi=xi)


def normalize_distance(cal: ThresholdCalibration, d: float) -> float:
    """Map a raw distance onto the calibrated scale; clamped below at
    0, open above (far out-of-distribution exceeds 1)."""
    return max((d - cal.d_min) / cal.denom, 0.0)
