"""Componentwise boosting on one in-memory individual-level dataset.

This is the comparator path: it works directly on rows, keeps the fitted
linear predictor explicitly and recomputes every residual cross-product per
step.  It shares no code with the aggregate-driven engine, so agreement
between the two is a meaningful check rather than a tautology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateColumnError(ValueError):
    """A covariate column is constant and cannot be standardized."""

    def __init__(self, j):
        super().__init__(f"column {j} has zero variance")
        self.column = j


def standardize_pooled(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center y and scale columns of x so each satisfies sum(x_j^2) = n - 1."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    means = x.mean(axis=0)
    centered = x - means
    ssq = (centered ** 2).sum(axis=0)
    if (ssq == 0).any():
        raise DegenerateColumnError(int(np.flatnonzero(ssq == 0)[0]))
    sds = np.sqrt(ssq / (n - 1))
    return centered / sds, y - y.mean()


@dataclass
class PooledRun:
    beta: np.ndarray
    inclusion_order: list[int]
    score_history: list[np.ndarray] = field(default_factory=list)


def pooled_boosting(x: np.ndarray, y: np.ndarray, nu: float = 0.1,
                    max_steps: int = 100, target_model_size: int | None = None,
                    record_scores: bool = False) -> PooledRun:
    """Stagewise boosting with residuals formed from the full data matrix.

    ``x`` must already be standardized (column sums of squares n - 1) and
    ``y`` centered.  Each step fits every univariable candidate model on the
    current residuals, picks the largest squared score, and moves that one
    coefficient by ``nu`` times its least-squares estimate.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    beta = np.zeros(p)
    eta = np.zeros(n)
    order: list[int] = []
    seen: set[int] = set()
    history: list[np.ndarray] = []
    if target_model_size == 0:
        return PooledRun(beta, order, history)
    for _ in range(max_steps):
        residual = y - eta
        scores = x.T @ residual
        if record_scores:
            history.append(scores)
        j = int(np.argmax(scores * scores))  # first max -> lowest index on ties
        gamma = nu * scores[j] / (n - 1)
        beta[j] += gamma
        eta = eta + gamma * x[:, j]
        if j not in seen:
            seen.add(j)
            order.append(j)
        if target_model_size is not None and len(order) >= target_model_size:
            break
    return PooledRun(beta, order, history)
