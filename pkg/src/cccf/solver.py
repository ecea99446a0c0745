"""Alternating discrete optimisation of compositional codes.

Per component k the solver cycles through four blocks: user codes and item
codes by bitwise discrete coordinate descent, then the orthogonal auxiliary
matrices X, Y in closed form. Every block can only lower the objective

    sum_obs (R_ij - sum_k w_ij^k <b_i^k, d_j^k>)^2
        - 2 a1 sum_k tr(B^kT X^k) - 2 a2 sum_k tr(D^kT Y^k)

so the outer loop is monotone.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .coding import CccfModel, objective_terms, observed_inner_products, pair_weights
from .data import RatingsMatrix
from .mf import LatentFactors
from .weights import WeightVectors, compute_weight_vectors, select_anchors, unit_weights

log = logging.getLogger(__name__)

LINEAR_TERMS = ("weighted", "printed")
WEIGHTINGS = ("kernel", "unit")


class OrthogonalUpdateError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AuxOrthogonal:
    X: np.ndarray  # (G, m, r)
    Y: np.ndarray  # (G, n, r)


@dataclass(frozen=True)
class TrainConfig:
    G: int = 8
    r: int = 8
    alpha1: float = 1e-2
    alpha2: float = 1e-2
    alpha3: float = 1e-1
    alpha4: float = 1e-1
    h: float = 0.8
    max_outer: int = 10
    max_dcd_sweeps: int = 5
    tol: float = 1e-4
    seed: int = 0
    weighting: str = "kernel"
    linear_term: str = "weighted"
    normalize_distance: bool = False
    init_outer: int = 10
    init_steps: int = 20
    init_scale: float = 0.1

    def __post_init__(self):
        if self.G < 1 or self.r < 1:
            raise ValueError("G and r must be >= 1")
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ValueError("alphas must be >= 0")
        if (self.alpha1 > 0 and self.alpha3 == 0) or (self.alpha2 > 0 and self.alpha4 == 0):
            # the relaxed trace term is unbounded below without a norm penalty
            raise ValueError("alpha3/alpha4 must be > 0 when alpha1/alpha2 > 0")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.linear_term not in LINEAR_TERMS:
            raise ValueError(f"linear_term must be one of {LINEAR_TERMS}")
        if self.max_outer < 1 or self.max_dcd_sweeps < 1:
            raise ValueError("max_outer and max_dcd_sweeps must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


def sgn(x: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1, as int8."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# orthogonal auxiliary update


def update_orthogonal(codes: np.ndarray, seed: int = 0, component: int | None = None) -> np.ndarray:
    """Maximise tr(Z^T X) over X with 1^T X = 0 and X^T X = rows * I.

    Works for +-1 code matrices and for the real relaxed factors alike.
    Directions not fixed by the data are completed with a seeded
    Gram-Schmidt (QR) pass against [P, 1].
    """
    Z = np.asarray(codes, dtype=np.float64)
    m, r = Z.shape
    where = f" (component {component})" if component is not None else ""
    if m <= r:
        raise OrthogonalUpdateError(
            f"cannot place {r} orthogonal zero-mean columns in {m} rows{where}")
    Zc = Z - Z.mean(axis=0)
    evals, evecs = np.linalg.eigh(Zc.T @ Zc)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pos = evals > 1e-9 * max(evals[0], 1.0)
    rp = int(pos.sum())
    Q = evecs[:, :rp]
    Qhat = evecs[:, rp:]
    P = Zc @ Q / np.sqrt(evals[:rp])

    if rp < r:
        rng = np.random.default_rng(seed)
        basis = np.column_stack([P, np.full(m, 1.0 / np.sqrt(m)), rng.standard_normal((m, r - rp))])
        Qb, Rb = np.linalg.qr(basis)
        if np.min(np.abs(np.diag(Rb))) < 1e-10:
            raise OrthogonalUpdateError(f"Gram-Schmidt completion lost rank{where}")
        Phat = Qb[:, rp + 1:] * np.sign(np.diag(Rb)[rp + 1:])
        P = np.column_stack([P, Phat])
    # tidy round-off so the constraints hold to ~1e-12
    Qp, Rp = np.linalg.qr(P)
    P = Qp * np.sign(np.diag(Rp))
    return np.sqrt(m) * P @ np.column_stack([Q, Qhat]).T


# ---------------------------------------------------------------------------
# discrete coordinate descent


@numba.njit(parallel=True, cache=True)
def _dcd_block(rows, indptr, obs_ids, partner, codes, partner_codes, w, s, pred, ratings,
               aux, alpha, max_sweeps, weighted_linear, flips, log_q, log_delta):
    r = codes.shape[1]
    for t in numba.prange(rows.shape[0]):
        row = rows[t]
        lo = indptr[row]
        hi = indptr[row + 1]
        w2 = 0.0
        for p in range(lo, hi):
            o = obs_ids[p]
            w2 += w[o] * w[o]
        nflip = 0
        for _sweep in range(max_sweeps):
            changed = False
            for q in range(r):
                b = np.float64(codes[row, q])
                lin = 0.0
                raw = 0.0
                quad = 0.0
                for p in range(lo, hi):
                    o = obs_ids[p]
                    d = np.float64(partner_codes[partner[o], q])
                    e = ratings[o] - pred[o]
                    lin += w[o] * d * e
                    if not weighted_linear:
                        raw += d * (e + w[o] * s[o])
                        quad += w[o] * w[o] * (s[o] - b * d) * d
                exact = lin + b * w2 + alpha * aux[row, q]
                if weighted_linear:
                    hat = exact
                else:
                    hat = raw - quad + alpha * aux[row, q]
                # O(x, y): keep the current bit when the score is exactly zero
                if hat == 0.0 or (hat > 0.0) == (b > 0.0):
                    continue
                nb = -b
                codes[row, q] = np.int8(nb)
                for p in range(lo, hi):
                    o = obs_ids[p]
                    step = 2.0 * nb * np.float64(partner_codes[partner[o], q])
                    s[o] += step
                    pred[o] += step * w[o]
                if nflip < log_q.shape[1]:
                    log_q[t, nflip] = q
                    log_delta[t, nflip] = 4.0 * b * exact
                nflip += 1
                changed = True
            if not changed:
                break
        flips[t] = nflip


@dataclass
class BlockResult:
    """Flip bookkeeping of one DCD block.

    ``deltas[t]`` lists the objective change of each accepted flip of
    ``rows[t]`` in order; ``bits[t]`` the flipped bit positions.
    """

    rows: np.ndarray
    flips: np.ndarray
    bits: list[np.ndarray]
    deltas: list[np.ndarray]

    @property
    def total_flips(self) -> int:
        return int(self.flips.sum())


class TrainingState:
    """Mutable dense codes plus per-observation caches used during training.

    ``s[k, o]`` caches the component-k inner product of observation o and
    ``pred[o]`` the full prediction; both are updated in O(1) per flip.
    """

    def __init__(self, matrix: RatingsMatrix, weights: WeightVectors, B: np.ndarray, D: np.ndarray,
                 aux: AuxOrthogonal, config: TrainConfig):
        self.matrix = matrix
        self.weights = weights
        self.B = np.ascontiguousarray(B, dtype=np.int8)
        self.D = np.ascontiguousarray(D, dtype=np.int8)
        self.aux = aux
        self.config = config
        self.w = pair_weights(weights, matrix.obs_user, matrix.obs_item)
        self.s = observed_inner_products(self.B, self.D, matrix.obs_user, matrix.obs_item)
        self.user_obs = np.arange(matrix.nnz, dtype=np.int64)
        self.refresh_predictions()

    @property
    def G(self) -> int:
        return self.B.shape[0]

    def refresh_predictions(self) -> None:
        self.pred = np.sum(self.w * self.s, axis=0)

    def residual(self, o: int, k: int) -> float:
        """Rating of observation o minus every component's term except k."""
        return float(self.matrix.obs_rating[o] - self.pred[o] + self.w[k, o] * self.s[k, o])

    def _block(self, k: int, users: bool, rows, max_sweeps) -> BlockResult:
        mat = self.matrix
        if max_sweeps is None:
            max_sweeps = self.config.max_dcd_sweeps
        if users:
            codes, partner_codes = self.B[k], self.D[k]
            indptr, obs_ids, partner = mat.user_indptr, self.user_obs, mat.obs_item
            aux, alpha = self.aux.X[k], self.config.alpha1
        else:
            codes, partner_codes = self.D[k], self.B[k]
            indptr, obs_ids, partner = mat.item_indptr, mat.item_obs, mat.obs_user
            aux, alpha = self.aux.Y[k], self.config.alpha2
        if rows is None:
            rows = np.arange(codes.shape[0], dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        cap = codes.shape[1] * max_sweeps
        flips = np.zeros(len(rows), dtype=np.int64)
        log_q = np.zeros((len(rows), cap), dtype=np.int64)
        log_delta = np.zeros((len(rows), cap))
        s_k = np.ascontiguousarray(self.s[k])
        _dcd_block(rows, indptr, obs_ids, partner, codes, partner_codes,
                   np.ascontiguousarray(self.w[k]), s_k, self.pred, mat.obs_rating,
                   np.ascontiguousarray(aux), float(alpha), int(max_sweeps),
                   self.config.linear_term == "weighted", flips, log_q, log_delta)
        self.s[k] = s_k
        return BlockResult(rows, flips,
                           [log_q[t, :flips[t]] for t in range(len(rows))],
                           [log_delta[t, :flips[t]] for t in range(len(rows))])

    def update_users(self, k: int, rows=None, max_sweeps: int | None = None) -> BlockResult:
        return self._block(k, True, rows, max_sweeps)

    def update_items(self, k: int, rows=None, max_sweeps: int | None = None) -> BlockResult:
        return self._block(k, False, rows, max_sweeps)

    def update_aux(self, k: int, seed: int = 0) -> None:
        self.aux.X[k] = update_orthogonal(self.B[k], seed=seed, component=k)
        self.aux.Y[k] = update_orthogonal(self.D[k], seed=seed + 1, component=k)

    def objective_terms(self) -> tuple[float, float, float]:
        return objective_terms(self.B, self.D, self.weights, self.matrix,
                               self.aux.X, self.aux.Y, self.config.alpha1, self.config.alpha2)

    def objective(self) -> float:
        loss, tx, ty = self.objective_terms()
        return loss - 2.0 * self.config.alpha1 * tx - 2.0 * self.config.alpha2 * ty

    def to_model(self, **kw) -> CccfModel:
        return CccfModel.from_bits(self.B, self.D, self.weights, **kw)


def residual(model: CccfModel, matrix: RatingsMatrix, i: int, j: int, exclude_k: int) -> float:
    """R_ij minus the weighted inner products of every component but ``exclude_k``."""
    row = matrix.user_items(i)
    hit = np.flatnonzero(row == j)
    if len(hit) == 0:
        raise KeyError(f"pair ({i}, {j}) is not observed")
    rating = matrix.obs_rating[matrix.user_indptr[i] + hit[0]]
    B, D = model.user_bits(), model.item_bits()
    total = 0.0
    for k in range(model.G):
        if k == exclude_k:
            continue
        total += model.weights.user[i, k] * model.weights.item[j, k] * float(B[k, i] @ D[k, j].astype(np.int64))
    return float(rating - total)


def dcd_update_user(state: TrainingState, i: int, k: int, max_sweeps: int | None = None):
    """Bitwise descent on user i's component-k code; returns (code, flip count)."""
    res = state.update_users(k, rows=[i], max_sweeps=max_sweeps)
    return state.B[k, i].copy(), int(res.flips[0])


def dcd_update_item(state: TrainingState, j: int, k: int, max_sweeps: int | None = None):
    res = state.update_items(k, rows=[j], max_sweeps=max_sweeps)
    return state.D[k, j].copy(), int(res.flips[0])


# ---------------------------------------------------------------------------
# relaxed initialisation


@dataclass
class RelaxedSolution:
    U: np.ndarray  # (G, m, r)
    V: np.ndarray  # (G, n, r)
    X: np.ndarray
    Y: np.ndarray
    trace: list[float] = field(default_factory=list)


class _Relaxed:
    """Objective and gradient of the real-valued relaxation."""

    def __init__(self, matrix: RatingsMatrix, weights: WeightVectors, config: TrainConfig):
        self.mat = matrix
        self.cfg = config
        self.w = pair_weights(weights, matrix.obs_user, matrix.obs_item)

    def predictions(self, U, V):
        mat = self.mat
        out = np.zeros(mat.nnz)
        for k in range(U.shape[0]):
            out += self.w[k] * np.einsum("ij,ij->i", U[k][mat.obs_user], V[k][mat.obs_item])
        return out

    def value(self, U, V, X, Y, err=None):
        c = self.cfg
        if err is None:
            err = self.mat.obs_rating - self.predictions(U, V)
        return float(err @ err - 2 * c.alpha1 * np.sum(U * X) - 2 * c.alpha2 * np.sum(V * Y)
                     + c.alpha3 * np.sum(U * U) + c.alpha4 * np.sum(V * V))

    def gradient(self, U, V, X, Y):
        mat, c = self.mat, self.cfg
        err = mat.obs_rating - self.predictions(U, V)
        gU = np.empty_like(U)
        gV = np.empty_like(V)
        for k in range(U.shape[0]):
            S = sp.csr_matrix((err * self.w[k], mat.obs_item, mat.user_indptr), shape=(mat.m, mat.n))
            gU[k] = -2 * (S @ V[k]) - 2 * c.alpha1 * X[k] + 2 * c.alpha3 * U[k]
            gV[k] = -2 * (S.T @ U[k]) - 2 * c.alpha2 * Y[k] + 2 * c.alpha4 * V[k]
        return gU, gV, self.value(U, V, X, Y, err)


def relax(matrix: RatingsMatrix, weights: WeightVectors, config: TrainConfig) -> RelaxedSolution:
    """Alternate backtracking gradient steps on (U, V) with closed-form (X, Y)."""
    G, r = config.G, config.r
    rng = np.random.default_rng(config.seed)
    U = rng.standard_normal((G, matrix.m, r)) * config.init_scale
    V = rng.standard_normal((G, matrix.n, r)) * config.init_scale
    X = np.stack([update_orthogonal(U[k], seed=config.seed, component=k) for k in range(G)])
    Y = np.stack([update_orthogonal(V[k], seed=config.seed + 1, component=k) for k in range(G)])
    prob = _Relaxed(matrix, weights, config)

    step = 1e-3
    current = prob.value(U, V, X, Y)
    trace = [current]
    for outer in range(config.init_outer):
        start = current
        for _ in range(config.init_steps):
            gU, gV, current = prob.gradient(U, V, X, Y)
            g2 = float(np.sum(gU * gU) + np.sum(gV * gV))
            if g2 == 0.0:
                break
            step *= 2.0
            while True:
                U1, V1 = U - step * gU, V - step * gV
                value = prob.value(U1, V1, X, Y)
                if np.isfinite(value) and value <= current - 1e-4 * step * g2:
                    break
                step *= 0.5
                if step < 1e-20:
                    U1, V1, value = U, V, current
                    break
            U, V, current = U1, V1, value
            trace.append(current)
        for k in range(G):
            X[k] = update_orthogonal(U[k], seed=config.seed + 2 * outer, component=k)
            Y[k] = update_orthogonal(V[k], seed=config.seed + 2 * outer + 1, component=k)
        current = prob.value(U, V, X, Y)
        trace.append(current)
        if not np.isfinite(current):
            raise TrainingDivergedError("relaxed initialisation diverged")
        if start - current <= config.tol * abs(start):
            break
    return RelaxedSolution(U, V, X, Y, trace)


def init_relaxed(matrix: RatingsMatrix, weights: WeightVectors, config: TrainConfig):
    """Binarised relaxed solution: (model, aux) with codes sgn(U), sgn(V)."""
    sol = relax(matrix, weights, config)
    model = CccfModel.from_bits(sgn(sol.U), sgn(sol.V), weights)
    return model, AuxOrthogonal(sol.X, sol.Y)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class TrainResult:
    model: CccfModel
    aux: AuxOrthogonal
    history: list[dict]
    state: TrainingState = field(repr=False)


HISTORY_COLUMNS = ("iteration", "objective", "loss", "user_flips", "item_flips", "seconds")


def build_weights(matrix: RatingsMatrix, latents: LatentFactors | None, config: TrainConfig):
    if config.weighting == "unit":
        return unit_weights(matrix.m, matrix.n, config.G), None
    if latents is None:
        raise ValueError("kernel weighting needs latent factors")
    anchors = select_anchors(latents, config.G, seed=config.seed)
    return compute_weight_vectors(latents, anchors, config.h, config.normalize_distance), anchors


def fit(matrix: RatingsMatrix, latents: LatentFactors | None, config: TrainConfig,
        user_order: np.ndarray | None = None) -> TrainResult:
    weights, anchors = build_weights(matrix, latents, config)
    t0 = time.perf_counter()
    init_model, aux = init_relaxed(matrix, weights, config)
    state = TrainingState(matrix, weights, init_model.user_bits(), init_model.item_bits(), aux, config)
    loss, tx, ty = state.objective_terms()
    prev = loss - 2 * config.alpha1 * tx - 2 * config.alpha2 * ty
    history = [dict(iteration=0, objective=prev, loss=loss, user_flips=0, item_flips=0,
                    seconds=time.perf_counter() - t0)]
    log.info("init objective %.6g", prev)

    for it in range(1, config.max_outer + 1):
        t0 = time.perf_counter()
        uf = itf = 0
        for k in range(config.G):
            state.refresh_predictions()
            uf += state.update_users(k, rows=user_order).total_flips
            itf += state.update_items(k).total_flips
            state.update_aux(k, seed=config.seed + 1000 * it + 2 * k)
        state.refresh_predictions()
        loss, tx, ty = state.objective_terms()
        obj = loss - 2 * config.alpha1 * tx - 2 * config.alpha2 * ty
        history.append(dict(iteration=it, objective=obj, loss=loss, user_flips=uf, item_flips=itf,
                            seconds=time.perf_counter() - t0))
        log.info("iter %d objective %.6g flips %d/%d", it, obj, uf, itf)
        decrease = (prev - obj) / max(abs(prev), 1e-300)
        prev = obj
        if decrease < config.tol:
            break

    seen = (matrix.user_indptr.copy(), matrix.obs_item.copy())
    model = state.to_model(anchors=anchors, config=config.as_dict(), user_ids=list(matrix.user_ids),
                           item_ids=list(matrix.item_ids), seen=seen, latents=latents)
    return TrainResult(model, state.aux, history, state)


def train(matrix: RatingsMatrix, latents: LatentFactors | None, config: TrainConfig) -> CccfModel:
    return fit(matrix, latents, config).model


def write_history(history: list[dict], fh) -> None:
    fh.write(",".join(HISTORY_COLUMNS) + "\n")
    for row in history:
        fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                          for c in HISTORY_COLUMNS) + "\n")
