"""Anchors, Epanechnikov component weights and integer weight scaling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from .mf import LatentFactors

KERNEL_PEAK = 0.75
FALLBACK_WEIGHT = 1e-2


@dataclass
class AnchorSet:
    user_anchors: np.ndarray  # (G, rank)
    item_anchors: np.ndarray

    @property
    def G(self) -> int:
        return self.user_anchors.shape[0]


@dataclass
class WeightVectors:
    """Dense storage of sparse non-negative per-component weights.

    Zeros mean "component switched off"; the pair weight of component k is
    ``user[i, k] * item[j, k]`` and is never materialised.
    """

    user: np.ndarray  # (m, G)
    item: np.ndarray  # (n, G)
    bandwidth: float

    @property
    def G(self) -> int:
        return self.user.shape[1]

    def nnz(self) -> tuple[int, int]:
        return int(np.count_nonzero(self.user)), int(np.count_nonzero(self.item))

    def mean_pair_nnz(self) -> float:
        """Average number of components with a non-zero pair weight."""
        pu = np.count_nonzero(self.user, axis=0) / self.user.shape[0]
        pi = np.count_nonzero(self.item, axis=0) / self.item.shape[0]
        return float(pu @ pi)


@dataclass
class IntegerWeights:
    scale: int
    user: np.ndarray  # (m, G) int64
    item: np.ndarray


def arc_cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular distance undefined for a zero vector")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def pairwise_arc_cosine(points: np.ndarray, centers: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Angular distance from every row of ``points`` to every row of ``centers``."""
    pn = np.linalg.norm(points, axis=1, keepdims=True)
    cn = np.linalg.norm(centers, axis=1, keepdims=True)
    if np.any(pn == 0) or np.any(cn == 0):
        raise ValueError("angular distance undefined for a zero vector")
    cos = (points / pn) @ (centers / cn).T
    d = np.arccos(np.clip(cos, -1.0, 1.0))
    return d / np.pi if normalize else d


def epanechnikov_weight(d, h: float):
    """``0.75 * (1 - d**2)`` inside the bandwidth (``d < h``), zero elsewhere.

    The parabola is clamped at zero, which only matters when ``h > 1``.
    """
    d = np.asarray(d, dtype=np.float64)
    w = np.where(d < h, KERNEL_PEAK * (1.0 - d * d), 0.0)
    w = np.maximum(w, 0.0)
    return float(w) if w.ndim == 0 else w


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    with warnings.catch_warnings():
        # an emptied cluster keeps its previous centroid
        warnings.simplefilter("ignore", UserWarning)
        centers, _ = kmeans2(points, k, iter=100, minit="++", missing="warn", seed=rng)
    return centers


def select_anchors(latents: LatentFactors, G: int, seed: int = 0) -> AnchorSet:
    """k-means centroids of the user rows and, separately, of the item rows."""
    m, n = latents.user_factors.shape[0], latents.item_factors.shape[0]
    if G > min(m, n):
        raise ValueError(f"G={G} exceeds min(m, n)={min(m, n)}")
    rng = np.random.default_rng(seed)
    return AnchorSet(
        _kmeans(latents.user_factors, G, rng),
        _kmeans(latents.item_factors, G, rng),
    )


def _kernel_rows(points, centers, h, normalize):
    d = pairwise_arc_cosine(points, centers, normalize)
    w = epanechnikov_weight(d, h)
    empty = ~w.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        w[rows, d[rows].argmin(axis=1)] = FALLBACK_WEIGHT
    return w


def compute_weight_vectors(latents: LatentFactors, anchors: AnchorSet, h: float,
                           normalize_distance: bool = False) -> WeightVectors:
    if h <= 0:
        raise ValueError("bandwidth h must be > 0")
    return WeightVectors(
        _kernel_rows(latents.user_factors, anchors.user_anchors, h, normalize_distance),
        _kernel_rows(latents.item_factors, anchors.item_anchors, h, normalize_distance),
        float(h),
    )


def unit_weights(m: int, n: int, G: int) -> WeightVectors:
    """All-ones weights: the plain binary-code model when G == 1."""
    return WeightVectors(np.ones((m, G)), np.ones((n, G)), float("inf"))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_integer_weights(w: WeightVectors, e: int) -> IntegerWeights:
    if e < 1:
        raise ValueError("scale e must be >= 1")
    return IntegerWeights(
        int(e),
        round_half_away(e * w.user).astype(np.int64),
        round_half_away(e * w.item).astype(np.int64),
    )
