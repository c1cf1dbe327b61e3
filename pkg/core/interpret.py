"""
Shapley attributions for both models and first-layer filter activations.

Sign convention: negative attribution = associated with lower mortality.
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Callable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.signal import correlate2d

from core.convnet import ConvRegressor
from core.covariate_model import CONST, DesignMatrix, RegressionFit
from core.errors import DomainError, NumericError

logger = logging.getLogger(__name__)

EXACT_MAX_FEATURES = 12
EVAL_CHUNK = 64


@dataclass
class ShapVector:
    base_value: float
    phi: np.ndarray
    names: List[str]
    output: float
    key: str = ""

    @property
    def residual(self) -> float:
        return float(self.base_value + self.phi.sum() - self.output)

    def as_series(self) -> pd.Series:
        return pd.Series(self.phi, index=self.names, name=self.key or None)


@dataclass
class AttributionMap:
    phi: np.ndarray               # S x S
    base_value: float             # model output on the baseline
    output: float                 # model output on the tile
    residual: float               # base + Σφ − output
    mode: str                     # "exact" | "sampling"
    n_evaluations: int
    baseline: str = "per-channel mean pixel"

    @property
    def grid(self) -> int:
        return self.phi.shape[0]


# ==========================================
#   LINEAR SHAP
# ==========================================

def _coefficients(fit) -> pd.Series:
    if isinstance(fit, RegressionFit):
        if fit.standardized:
            raise DomainError("linear SHAP needs an unstandardised fit")
        return fit.params
    return pd.Series(fit, dtype=float)


def linear_shap(fit: Union[RegressionFit, Mapping[str, float]], x: Mapping[str, float],
                background: pd.DataFrame, weights: Optional[Sequence[float]] = None, key: str = "") -> ShapVector:
    """φj = βj·(xj − μj) with μ the (weighted) background mean; base = f(μ)."""
    beta = _coefficients(fit)
    names = [c for c in beta.index if c != CONST]
    intercept = float(beta.get(CONST, 0.0))
    missing = [c for c in names if c not in x]
    if missing:
        raise DomainError(f"point is missing covariates: {', '.join(missing)}")
    missing = [c for c in names if c not in background.columns]
    if missing:
        raise DomainError(f"background is missing covariates: {', '.join(missing)}")

    b = beta[names].to_numpy(dtype=float)
    w = np.ones(len(background)) if weights is None else np.asarray(weights, dtype=float)
    mu = np.average(background[names].to_numpy(dtype=float), axis=0, weights=w)
    xv = np.array([float(x[c]) for c in names])
    phi = b * (xv - mu)
    return ShapVector(base_value=intercept + float(b @ mu), phi=phi, names=names,
                      output=intercept + float(b @ xv), key=key)


def explain_covariates(fit: RegressionFit, design: DesignMatrix, fips: Sequence[str],
                       background_fips: Optional[Sequence[str]] = None) -> List[ShapVector]:
    """One ShapVector per county, background = population-weighted `background_fips` rows."""
    bg = design.subset(background_fips) if background_fips is not None else design
    return [linear_shap(fit, design.X.loc[f], bg.X, bg.weights.to_numpy(), key=f)
            for f in fips if f in design.X.index]


def shap_frame(vectors: Sequence[ShapVector]) -> pd.DataFrame:
    df = pd.DataFrame([v.as_series() for v in vectors])
    df.insert(0, "base_value", [v.base_value for v in vectors])
    df.insert(1, "output", [v.output for v in vectors])
    df.index = [v.key for v in vectors]
    df.index.name = "fips"
    return df


def shap_importance(vectors: Sequence[ShapVector]) -> pd.DataFrame:
    """Mean |φ| per feature, descending, ties by name."""
    if not vectors:
        raise DomainError("shap_importance needs at least one vector")
    names = list(vectors[0].names)
    for v in vectors[1:]:
        if list(v.names) != names:
            raise DomainError("SHAP vectors carry different feature names")
    mags = np.mean(np.abs(np.stack([v.phi for v in vectors])), axis=0)
    df = pd.DataFrame({"feature": names, "importance": mags})
    df["_neg"] = -df["importance"]
    return df.sort_values(["_neg", "feature"], kind="mergesort").drop(columns="_neg").reset_index(drop=True)


# ==========================================
#   KERNEL SHAP OVER SUPERPIXELS
# ==========================================

def superpixel_index(height: int, width: int, grid: int) -> np.ndarray:
    """H x W map of superpixel ids on a regular grid x grid partition."""
    rows = (np.arange(height) * grid) // height
    cols = (np.arange(width) * grid) // width
    return rows[:, None] * grid + cols[None, :]


def shapley_kernel_weight(m: int, size: int) -> float:
    return (m - 1) / (comb(m, size) * size * (m - size))


def _exact_coalitions(m: int):
    masks, weights = [], []
    for size in range(1, m):
        w = shapley_kernel_weight(m, size)
        for members in combinations(range(m), size):
            z = np.zeros(m, dtype=bool)
            z[list(members)] = True
            masks.append(z)
            weights.append(w)
    return np.array(masks), np.array(weights)


def _sampled_coalitions(m: int, n_samples: int, rng: np.random.Generator):
    sizes = np.arange(1, m)
    p = (m - 1) / (sizes * (m - sizes))
    p = p / p.sum()
    half = n_samples // 2
    masks = np.zeros((2 * half, m), dtype=bool)
    for i in range(half):
        size = int(rng.choice(sizes, p=p))
        members = rng.choice(m, size=size, replace=False)
        masks[2 * i, members] = True
        masks[2 * i + 1] = ~masks[2 * i]      # paired complement
    # sizes are drawn from the kernel, so each draw carries unit weight
    return masks, np.ones(len(masks))


def _evaluate(predict_fn: Callable, images: np.ndarray, offset: int) -> np.ndarray:
    out = np.asarray(predict_fn(images), dtype=np.float64).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        cid = offset + int(bad[0])
        raise NumericError(f"model output is non-finite on coalition {cid}", coalition=cid)
    return out


def kernel_shap(predict_fn: Callable[[np.ndarray], np.ndarray], tile: np.ndarray, baseline: np.ndarray,
                grid: int = 8, n_samples: int = 512, seed: int = 0) -> AttributionMap:
    """
    Superpixels outside a coalition are replaced by the baseline. The
    Shapley-kernel weighted linear surrogate is solved with the empty and
    full coalitions as constraints (the last feature is eliminated).
    Enumerates every coalition when grid² ≤ 12, else samples them.
    """
    tile = np.asarray(tile, dtype=np.float32)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float32), tile.shape)
    m = grid * grid
    if m < 2:
        raise DomainError("kernel SHAP needs at least 2 superpixels")
    exact = m <= EXACT_MAX_FEATURES
    if not exact and n_samples < 2 * m + 2:
        raise DomainError(f"n_samples must be ≥ 2·S²+2 = {2 * m + 2}, got {n_samples}")

    seg = superpixel_index(tile.shape[0], tile.shape[1], grid)
    ends = _evaluate(predict_fn, np.stack([baseline, tile]), offset=-2)
    f_base, f_full = float(ends[0]), float(ends[1])
    delta = f_full - f_base

    if exact:
        masks, weights = _exact_coalitions(m)
    else:
        masks, weights = _sampled_coalitions(m, n_samples, np.random.Generator(np.random.Philox(seed)))

    values = np.empty(len(masks))
    for start in range(0, len(masks), EVAL_CHUNK):
        chunk = masks[start:start + EVAL_CHUNK]
        keep = chunk[:, seg]                                   # n x H x W
        images = np.where(keep[..., None], tile[None], baseline[None])
        values[start:start + len(chunk)] = _evaluate(predict_fn, images, offset=start)

    z = masks.astype(np.float64)
    y = values - f_base - z[:, -1] * delta
    X = z[:, :-1] - z[:, -1:]
    sw = np.sqrt(weights)
    head, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    phi = np.append(head, delta - head.sum())

    residual = float(f_base + phi.sum() - f_full)
    mode = "exact" if exact else "sampling"
    logger.debug("kernel SHAP %s mode: %d coalitions, residual %.3g", mode, len(masks), residual)
    return AttributionMap(phi=phi.reshape(grid, grid), base_value=f_base, output=f_full, residual=residual,
                          mode=mode, n_evaluations=len(masks) + 2)


def model_predict_fn(model: ConvRegressor) -> Callable[[np.ndarray], np.ndarray]:
    def predict(images: np.ndarray) -> np.ndarray:
        return model.forward(images, keep_cache=False).rate.astype(np.float64)
    return predict


# ==========================================
#   FILTERS
# ==========================================

def first_layer_filters(model: ConvRegressor) -> np.ndarray:
    """conv1 kernels as (filters, 3, 3, 3 channels)."""
    return model.params["conv1.W"].transpose(0, 2, 3, 1).astype(np.float64)


def correlate_filter(pixels: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation summed over channels. kernel: kh x kw x C."""
    px = np.asarray(pixels, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    if k.ndim == 2:
        k = k[:, :, None]
    if px.shape[2] != k.shape[2]:
        raise DomainError(f"image has {px.shape[2]} channels, kernel has {k.shape[2]}")
    return sum(correlate2d(px[:, :, c], k[:, :, c], mode="valid") for c in range(px.shape[2]))


def filter_activations(model: ConvRegressor, tile: np.ndarray, filter_index: int) -> np.ndarray:
    """Pre-activation response of one first-layer filter, no bias, as a grayscale matrix."""
    filters = first_layer_filters(model)
    if not 0 <= filter_index < len(filters):
        raise DomainError(f"filter index {filter_index} out of range 0..{len(filters) - 1}")
    return correlate_filter(tile, filters[filter_index])
