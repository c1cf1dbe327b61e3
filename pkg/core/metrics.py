import numpy as np
from scipy import stats

from core.errors import DomainError


def pearson_r(pred, truth) -> float:
    """Product-moment correlation between per-county predictions and truth."""
    x = np.asarray(pred, dtype=float)
    y = np.asarray(truth, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"pearson_r needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise DomainError("pearson_r needs at least 2 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DomainError("pearson_r is undefined for a zero-variance input")
    r = stats.pearsonr(x, y).statistic
    return float(np.clip(r, -1.0, 1.0))
