"""Bit-packed +-1 codes, Hamming inner products and the compositional predictor.

A code bit b in {-1, +1} is stored as the bit (b + 1) / 2, least significant
bit first, 64 bits per little-endian word. Bits past ``r`` in the last word
are always zero, so XOR + popcount over whole words never sees garbage.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import RatingsMatrix
from .weights import AnchorSet, WeightVectors

WORD_BITS = 64


def n_words(r: int) -> int:
    return (r + WORD_BITS - 1) // WORD_BITS


def pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, r) array of +-1 into (rows, ceil(r/64)) uint64 words."""
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] < 1:
        raise ValueError("expected a (rows, r) array with r >= 1")
    rows, r = bits.shape
    W = n_words(r)
    padded = np.zeros((rows, W * WORD_BITS), dtype=np.uint8)
    padded[:, :r] = bits > 0
    as_bytes = np.packbits(padded.reshape(rows, W * 8, 8), axis=2, bitorder="little")
    return np.ascontiguousarray(as_bytes.reshape(rows, W * 8)).view("<u8").astype(np.uint64)


def unpack_rows(words: np.ndarray, r: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype=np.uint64)
    rows = words.shape[0]
    as_bytes = words.astype("<u8").view(np.uint8).reshape(rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :r]
    return (bits.astype(np.int8) * 2 - 1)


def pack_row(bits) -> np.ndarray:
    return pack_rows(np.asarray(bits)[None, :])[0]


def unpack_row(words, r: int) -> np.ndarray:
    return unpack_rows(np.asarray(words, dtype=np.uint64)[None, :], r)[0]


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint64))


def binary_inner_product(a: np.ndarray, b: np.ndarray, r: int) -> int:
    """+-1 dot product of two packed rows: 2 * agreements - r."""
    disagree = int(popcount(np.bitwise_xor(a, b)).sum())
    return r - 2 * disagree


@dataclass
class PackedCodes:
    r: int
    words: np.ndarray  # (rows, n_words(r)) uint64

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "PackedCodes":
        bits = np.asarray(bits)
        return cls(bits.shape[1], pack_rows(bits))

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    def to_bits(self) -> np.ndarray:
        return unpack_rows(self.words, self.r)

    def row(self, i: int) -> np.ndarray:
        return self.words[i]


@dataclass
class CccfModel:
    """G components of packed user/item codes plus sparse component weights."""

    user_codes: list[PackedCodes]
    item_codes: list[PackedCodes]
    weights: WeightVectors
    anchors: AnchorSet | None = None
    config: dict[str, Any] = field(default_factory=dict)
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None
    # training items per user, as CSR (indptr, indices); excluded at retrieval
    seen: tuple[np.ndarray, np.ndarray] | None = None
    latents: Any = None

    def __post_init__(self):
        if len(self.user_codes) != len(self.item_codes) or len(self.user_codes) != self.weights.G:
            raise ValueError("component count differs between codes and weights")
        if self.user_codes and (self.user_codes[0].rows != self.weights.user.shape[0]
                                or self.item_codes[0].rows != self.weights.item.shape[0]):
            raise ValueError("weight rows do not match code rows")

    @property
    def G(self) -> int:
        return len(self.user_codes)

    @property
    def r(self) -> int:
        return self.user_codes[0].r

    @property
    def m(self) -> int:
        return self.user_codes[0].rows

    @property
    def n(self) -> int:
        return self.item_codes[0].rows

    def user_bits(self) -> np.ndarray:
        """(G, m, r) int8 array of +-1."""
        return np.stack([c.to_bits() for c in self.user_codes])

    def item_bits(self) -> np.ndarray:
        return np.stack([c.to_bits() for c in self.item_codes])

    @classmethod
    def from_bits(cls, B: np.ndarray, D: np.ndarray, weights: WeightVectors, **kw) -> "CccfModel":
        return cls([PackedCodes.from_bits(b) for b in B], [PackedCodes.from_bits(d) for d in D], weights, **kw)


def predict(model: CccfModel, i: int, j: int) -> float:
    eta, xi = model.weights.user[i], model.weights.item[j]
    # walk the sparser of the two weight rows
    lead, other = (eta, xi) if np.count_nonzero(eta) <= np.count_nonzero(xi) else (xi, eta)
    total = 0.0
    for k in np.flatnonzero(lead):
        if other[k] == 0.0:
            continue
        ip = binary_inner_product(model.user_codes[k].row(i), model.item_codes[k].row(j), model.r)
        total += eta[k] * xi[k] * ip
    return float(total)


def observed_inner_products(B: np.ndarray, D: np.ndarray, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """(G, nobs) float array of per-component inner products for listed pairs."""
    G = B.shape[0]
    out = np.empty((G, len(users)))
    for k in range(G):
        out[k] = np.einsum("ij,ij->i", B[k][users].astype(np.float64), D[k][items].astype(np.float64))
    return out


def pair_weights(weights: WeightVectors, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """(G, nobs) products eta_i^k * xi_j^k for listed pairs."""
    return (weights.user[users] * weights.item[items]).T.copy()


def objective_terms(B, D, weights: WeightVectors, matrix: RatingsMatrix, X, Y, alpha1, alpha2):
    """Return (squared loss, user trace sum, item trace sum) on dense +-1 codes."""
    s = observed_inner_products(B, D, matrix.obs_user, matrix.obs_item)
    w = pair_weights(weights, matrix.obs_user, matrix.obs_item)
    err = matrix.obs_rating - np.sum(w * s, axis=0)
    loss = float(err @ err)
    tr_x = sum(float(np.sum(B[k] * X[k])) for k in range(B.shape[0])) if X is not None else 0.0
    tr_y = sum(float(np.sum(D[k] * Y[k])) for k in range(D.shape[0])) if Y is not None else 0.0
    return loss, tr_x, tr_y


def objective(model: CccfModel, matrix: RatingsMatrix, aux=None, alpha1: float = 0.0, alpha2: float = 0.0) -> float:
    """Squared reconstruction loss minus the weighted trace terms.

    ``aux`` carries the orthogonal matrices X, Y (see ``solver.AuxOrthogonal``);
    with ``aux=None`` only the squared loss is returned.
    """
    X = aux.X if aux is not None else None
    Y = aux.Y if aux is not None else None
    loss, tr_x, tr_y = objective_terms(model.user_bits(), model.item_bits(), model.weights,
                                       matrix, X, Y, alpha1, alpha2)
    return loss - 2.0 * alpha1 * tr_x - 2.0 * alpha2 * tr_y
