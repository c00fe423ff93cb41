"""Age-estimation metrics: mean absolute error and cumulative score."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0 or p.size != y.size:
        raise ContractError(f"need equal, non-empty lengths (got {p.size} and {y.size})")
    return p, y


def mae_metric(predictions, labels) -> float:
    """Mean absolute error in years."""
    p, y = _pair(predictions, labels)
    return float(np.mean(np.abs(p - y)))


def cs_metric(predictions, labels, threshold: float = 5.0) -> float:
    """Percentage of samples whose absolute error does not exceed ``threshold`` years."""
    if threshold < 0:
        raise ContractError("CS threshold must be >= 0")
    p, y = _pair(predictions, labels)
    return 100.0 * float(np.count_nonzero(np.abs(p - y) <= threshold)) / p.size
