"""
Spectral clustering of image embeddings, the 2-D Laplacian-eigenmap
layout and per-cluster covariate summaries.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.neighbors import NearestNeighbors

from core.errors import BandwidthError, DomainError
from core.imagery import Provenance
from schemas.cohort import REGION_NAMES, CountyRecord

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_NEIGHBORS = 15
KMEANS_RESTARTS = 10
KMEANS_RETRIES = 3

SUMMARY_FIELDS = ["rate", "income", "any_college", "mean_age", "prop_hispanic", "population"]


@dataclass
class AffinityGraph:
    weights: np.ndarray          # n x n, symmetric, zero diagonal
    sigma: float = 1.0
    neighbors: int = 0

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DomainError(f"affinity matrix must be square, got {w.shape}")
        if np.any(w < 0) or not np.allclose(w, w.T, rtol=0, atol=1e-12):
            raise DomainError("affinity matrix must be symmetric and nonnegative")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass
class ClusterAssignment:
    labels: np.ndarray           # one label per node, 0..k-1
    k: int
    eigenvalues: np.ndarray
    inertia: float = 0.0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def build_affinity(E: np.ndarray, m: int = DEFAULT_NEIGHBORS, sigma: Union[str, float] = "auto") -> AffinityGraph:
    """
    m-nearest-neighbour Gaussian graph, symmetrised with the or-rule:
    w(i,j) = exp(-|ei - ej|^2 / 2σ^2) when j is among i's neighbours or i among j's.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] < 1:
        raise DomainError(f"embedding matrix must be n x d with d ≥ 1, got {E.shape}")
    n = E.shape[0]
    if m < 1 or n < m + 1:
        raise DomainError(f"need n ≥ m+1 points for {m} neighbours, got n={n}")

    dist, ind = NearestNeighbors(n_neighbors=m).fit(E).kneighbors()
    if sigma == "auto":
        nonzero = dist[dist > 0]
        if nonzero.size == 0:
            raise BandwidthError("all neighbour distances are 0; automatic σ is undefined")
        sigma = float(np.median(nonzero))
    sigma = float(sigma)
    if not sigma > 0:
        raise BandwidthError(f"σ must be positive, got {sigma}")

    W = np.zeros((n, n))
    rows = np.repeat(np.arange(n), m)
    W[rows, ind.ravel()] = np.exp(-(dist.ravel() ** 2) / (2.0 * sigma ** 2))
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    return AffinityGraph(weights=W, sigma=sigma, neighbors=m)


def normalized_laplacian(graph: AffinityGraph) -> np.ndarray:
    """L = I - D^-1/2 W D^-1/2"""
    d = graph.degrees
    isolated = np.flatnonzero(d <= 0)
    if isolated.size:
        raise DomainError(f"nodes without affinity to any neighbour: {isolated[:10].tolist()}")
    s = 1.0 / np.sqrt(d)
    return np.eye(graph.n) - s[:, None] * graph.weights * s[None, :]


def laplacian_eigenpairs(graph: AffinityGraph) -> Tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and matching unit eigenvectors (columns)."""
    L = normalized_laplacian(graph)
    vals, vecs = np.linalg.eigh((L + L.T) / 2.0)
    return vals, vecs


def _relabel_by_first_seen(labels: np.ndarray) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=int)


def spectral_cluster(graph: AffinityGraph, k: int = DEFAULT_K, seed: int = 0) -> ClusterAssignment:
    if k < 1 or k > graph.n:
        raise DomainError(f"k={k} clusters requested for {graph.n} nodes")
    vals, vecs = laplacian_eigenpairs(graph)
    U = vecs[:, :k]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.where(norms > 0, norms, 1.0)

    for attempt in range(KMEANS_RETRIES):
        km = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_RESTARTS, random_state=seed + attempt)
        labels = km.fit_predict(U)
        if len(np.unique(labels)) == k:
            return ClusterAssignment(labels=_relabel_by_first_seen(labels), k=k,
                                     eigenvalues=vals[:k].copy(), inertia=float(km.inertia_))
        logger.warning("k-means left an empty cluster (seed %d); retrying", seed + attempt)
    raise DomainError(f"k-means could not fill {k} clusters after {KMEANS_RETRIES} seeds")


def spectral_embed_2d(graph: AffinityGraph) -> np.ndarray:
    """Eigenvectors 2 and 3 of the normalized Laplacian, unit variance per axis."""
    if graph.n < 3:
        raise DomainError(f"2-D spectral embedding needs ≥ 3 nodes, got {graph.n}")
    _, vecs = laplacian_eigenpairs(graph)
    coords = vecs[:, 1:3].copy()
    for j in range(2):
        col = coords[:, j]
        # sign fixed so the largest-magnitude entry is positive
        if col[np.argmax(np.abs(col))] < 0:
            col *= -1.0
        sd = col.std()
        if sd == 0:
            raise DomainError(f"spectral axis {j + 1} is constant")
        coords[:, j] = (col - col.mean()) / sd
    return coords


# ==========================================
#   SUMMARIES
# ==========================================

def assignments_frame(assignment: ClusterAssignment, keys: Sequence[Provenance]) -> pd.DataFrame:
    df = pd.DataFrame(list(keys), columns=["fips", "school", "row", "col"])
    df["cluster"] = assignment.labels
    return df


def coordinates_frame(coords: np.ndarray, keys: Sequence[Provenance], assignment: Optional[ClusterAssignment] = None) -> pd.DataFrame:
    df = pd.DataFrame(list(keys), columns=["fips", "school", "row", "col"])
    df["x"], df["y"] = coords[:, 0], coords[:, 1]
    if assignment is not None:
        df["cluster"] = assignment.labels
    return df


def summarize_clusters(assignment: ClusterAssignment, keys: Sequence[Provenance],
                       records: Sequence[CountyRecord]) -> pd.DataFrame:
    """
    Per-cluster image count, mean crude rate and covariates (each image
    carries its county's values), plus regional composition shares.
    """
    if len(keys) != len(assignment.labels):
        raise DomainError(f"{len(keys)} tile keys for {len(assignment.labels)} cluster labels")
    by_fips: Dict[str, CountyRecord] = {r.fips: r for r in records}
    rows = []
    for key, label in zip(keys, assignment.labels):
        rec = by_fips.get(str(key[0]))
        if rec is None:
            raise DomainError(f"image {tuple(key)} belongs to unknown county {key[0]}")
        rows.append({
            "cluster": int(label), "rate": rec.crude_rate, "income": rec.income,
            "any_college": rec.any_college, "mean_age": rec.mean_age,
            "prop_hispanic": rec.prop_hispanic, "population": rec.population, "region": rec.region,
        })
    images = pd.DataFrame(rows)
    images[SUMMARY_FIELDS] = images[SUMMARY_FIELDS].astype(float)

    grouped = images.groupby("cluster", sort=True)
    summary = grouped[SUMMARY_FIELDS].mean()
    summary.insert(0, "n_images", grouped.size())
    shares = pd.crosstab(images["cluster"], images["region"], normalize="index")
    for code in sorted(REGION_NAMES):
        summary[f"region_{code}"] = shares[code] if code in shares.columns else 0.0
    summary = summary.reindex(range(assignment.k))
    summary["n_images"] = summary["n_images"].fillna(0).astype(int)
    return summary.reset_index()


def cluster_report(summary: pd.DataFrame) -> pd.DataFrame:
    """Summary as published: income and population rounded to thousands, rates to 2 places."""
    out = summary.copy()
    for col in ("income", "population"):
        out[col] = (out[col] / 1000.0).round() * 1000.0
    out["rate"] = out["rate"].round(2)
    out["any_college"] = (100 * out["any_college"]).round(1)
    out["mean_age"] = out["mean_age"].round(1)
    out["prop_hispanic"] = (100 * out["prop_hispanic"]).round(1)
    region_cols = [c for c in out.columns if c.startswith("region_")]
    out[region_cols] = (100 * out[region_cols]).round(1)
    return out.rename(columns={"any_college": "any_college_pct", "prop_hispanic": "hispanic_pct"})
