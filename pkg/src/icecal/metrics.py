"""Verification metrics for ensemble and posterior summaries.

RMSE, the ensemble CRPS estimator, and empirical 95% interval coverage.
All three take plain arrays so they can score filter ensembles, posterior
draws, or point estimates without adapters.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "rmse",
    "crps_ensemble",
    "coverage95",
    "empirical_interval95",
]


def rmse(estimate, truth) -> float:
    """Root-mean-square error between two equal-length vectors."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(
            f"length mismatch: estimate {estimate.shape} vs truth {truth.shape}")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def crps_ensemble(samples, truth, mode: str = "mean-per-node") -> float:
    """Ensemble CRPS against a realised vector.

    ``samples`` has draws on the first axis, nodes on the second; ``truth``
    is one value per node. Per node the estimator is

        mean_i |X_i - y| - 0.5 * mean_{i,j} |X_i - X_j|

    and ``mode`` selects how node scores aggregate: ``mean-per-node``
    (default) or ``sum-per-node``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    n, k = samples.shape
    if n < 2:
        raise ValueError("crps_ensemble needs at least 2 draws per node")
    if truth.shape != (k,):
        raise ValueError(f"truth length {truth.shape} does not match {k} nodes")
    if mode not in ("mean-per-node", "sum-per-node"):
        raise ValueError(f"unknown aggregation mode: {mode!r}")

    term1 = np.mean(np.abs(samples - truth[None, :]), axis=0)
    # pairwise spread via the sorted-sample identity:
    # mean_{i,j}|X_i - X_j| = (2/n^2) * sum_k (2k - n + 1) * X_(k)
    srt = np.sort(samples, axis=0)
    weights = 2.0 * np.arange(n) - n + 1.0
    term2 = (weights @ srt) / (n * n)
    per_node = term1 - term2
    return float(per_node.sum() if mode == "sum-per-node" else per_node.mean())


def coverage95(lower, upper, truth) -> float:
    """Fraction of nodes whose truth lies inside [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if not (lower.shape == upper.shape == truth.shape):
        raise ValueError("lower, upper, truth must share a shape")
    if np.any(lower > upper):
        raise ValueError("interval ordering violated: lower > upper somewhere")
    return float(np.mean((lower <= truth) & (truth <= upper)))


def empirical_interval95(samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-node 2.5% and 97.5% empirical quantiles of an ensemble."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    lo = np.quantile(samples, 0.025, axis=0)
    hi = np.quantile(samples, 0.975, axis=0)
    return lo, hi
