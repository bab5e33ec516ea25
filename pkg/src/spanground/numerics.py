"""Small stable log-space helpers used by every scoring module."""

from __future__ import annotations

import numpy as np

NEG_INF = float("-inf")


def logsumexp(values: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Stable log(sum(exp(values))); tolerates -inf entries."""
    values = np.asarray(values, dtype=np.float64)
    max_val = np.max(values, axis=axis, keepdims=axis is not None)
    if axis is None:
        if not np.isfinite(max_val):
            # all -inf (empty support) or a +inf/NaN poisoned input
            return float(max_val)
        return float(max_val + np.log(np.sum(np.exp(values - max_val))))
    safe_max = np.where(np.isfinite(max_val), max_val, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - safe_max), axis=axis)) + np.squeeze(safe_max, axis=axis)
    collapsed = np.squeeze(max_val, axis=axis)
    return np.where(collapsed == NEG_INF, NEG_INF, out)


def log_softmax(values: np.ndarray) -> np.ndarray:
    """Normalize a score vector into log-probabilities; -inf marks excluded support."""
    values = np.asarray(values, dtype=np.float64)
    norm = logsumexp(values)
    if norm == NEG_INF:
        raise ValueError("log_softmax over empty support")
    return values - norm


def assert_normalized(log_probs: np.ndarray, tol: float = 1e-9) -> None:
    total = logsumexp(log_probs)
    if abs(total) > tol:
        raise AssertionError(f"distribution not normalized: logsumexp={total!r}")
