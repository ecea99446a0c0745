"""Real-valued matrix factorization trained by seeded SGD.

Serves as the accuracy/timing baseline and as the source of latent
vectors for the angular distance used by component weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .data import RatingsMatrix


class MfDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MfConfig:
    rank: int = 16
    lam: float = 0.05
    learning_rate: float = 0.01
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass
class LatentFactors:
    user_factors: np.ndarray
    item_factors: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]


def mf_objective(factors: LatentFactors, matrix: RatingsMatrix, lam: float) -> float:
    """Squared loss over observed pairs plus ``lam`` times squared Frobenius norms."""
    U, V = factors.user_factors, factors.item_factors
    # a diverged run overflows to inf here, which the caller reports
    with np.errstate(over="ignore", invalid="ignore"):
        pred = np.einsum("ij,ij->i", U[matrix.obs_user], V[matrix.obs_item])
        err = matrix.obs_rating - pred
        return float(err @ err + lam * (np.sum(U * U) + np.sum(V * V)))


@numba.njit(cache=True)
def _sgd_epoch(U, V, users, items, ratings, order, lr, lam_u, lam_v):
    rank = U.shape[1]
    for t in order:
        i = users[t]
        j = items[t]
        err = ratings[t]
        for f in range(rank):
            err -= U[i, f] * V[j, f]
        # implicit (proximal) shrinkage keeps large lam stable
        su = 1.0 / (1.0 + lr * lam_u[i])
        sv = 1.0 / (1.0 + lr * lam_v[j])
        for f in range(rank):
            u = U[i, f]
            v = V[j, f]
            U[i, f] = (u + lr * err * v) * su
            V[j, f] = (v + lr * err * u) * sv


def train_mf(matrix: RatingsMatrix, config: MfConfig = MfConfig()) -> LatentFactors:
    if matrix.nnz == 0:
        raise ValueError("matrix has no ratings")
    rng = np.random.default_rng(config.seed)
    U = rng.uniform(-0.01, 0.01, size=(matrix.m, config.rank))
    V = rng.uniform(-0.01, 0.01, size=(matrix.n, config.rank))
    # spread each row's regularizer over its observations so one epoch
    # follows the gradient of the full objective in expectation
    ucount = np.bincount(matrix.obs_user, minlength=matrix.m).astype(np.float64)
    icount = np.bincount(matrix.obs_item, minlength=matrix.n).astype(np.float64)
    lam_u = config.lam / np.maximum(ucount, 1.0)
    lam_v = config.lam / np.maximum(icount, 1.0)

    factors = LatentFactors(U, V)
    for _ in range(config.epochs):
        order = rng.permutation(matrix.nnz)
        _sgd_epoch(U, V, matrix.obs_user, matrix.obs_item, matrix.obs_rating,
                   order, config.learning_rate, lam_u, lam_v)
        loss = mf_objective(factors, matrix, config.lam)
        if not np.isfinite(loss):
            raise MfDivergenceError(
                f"MF loss became non-finite; lower learning_rate (now {config.learning_rate})"
            )
        factors.loss_history.append(loss)
    return factors


def predict_mf(factors: LatentFactors, i: int, j: int) -> float:
    return float(factors.user_factors[i] @ factors.item_factors[j])
