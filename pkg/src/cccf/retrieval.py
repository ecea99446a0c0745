"""Top-k recommendation by linear scan over bit-packed compositional codes.

Items are grouped by the set of components in which their weight is
non-zero. Inside a group every item touches the same components, so each
component contributes through one contiguous, branch-free loop, and a query
costs about ``n * nnz(w)`` popcounts plus one pass of top-k selection.
Scores live in group order; ``perm`` maps a scan position back to its item.

Codes with ``r <= 64`` are stored in the narrowest unsigned integer that
holds ``r`` bits, which lets the compiler pack more codes per vector lane.

The fast path replaces float weights by ``round(e * weight)`` and
accumulates exact integer scores. ``|score| <= G * r * max(eta_hat) *
max(xi_hat)``. The accumulator is int32 when that bound fits, int64
otherwise; for r, G <= 64 and e <= 1e4 the bound is below 4.2e11, and
``build_index`` rejects any layout that could exceed int64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic
from threadpoolctl import threadpool_limits

from .coding import CccfModel, n_words, pack_rows
from .weights import scale_integer_weights

INT32_LIMIT = np.iinfo(np.int32).max
INT64_LIMIT = np.iinfo(np.int64).max
MODES = ("cccf-fast", "cccf-exact", "float-mf", "dcf-flat")
BENCH_COLUMNS = ("mode", "users", "items", "total_bits", "nnz_w_mean", "seconds_total", "items_per_sec")


class IndexOverflowError(ValueError):
    pass


@intrinsic
def _popcount_as(typingctx, x, like):
    """popcount(x) converted to the type of ``like`` (integer or float)."""
    if not isinstance(x, types.Integer):
        return None
    src = x.bitwidth

    def codegen(context, builder, signature, args):
        t = ir.IntType(src)
        fn = builder.module.declare_intrinsic("llvm.ctpop", [t], ir.FunctionType(t, [t]))
        v = builder.call(fn, [args[0]])
        out = context.get_value_type(signature.return_type)
        if isinstance(like, types.Float):
            return builder.uitofp(v, out)
        if out.width > src:
            return builder.zext(v, out)
        if out.width < src:
            return builder.trunc(v, out)
        return v

    return like(x, like), codegen


def code_dtype(r: int):
    """Narrowest unsigned word holding one r-bit code (uint64 words past 64)."""
    for bits, dt in ((8, np.uint8), (16, np.uint16), (32, np.uint32)):
        if r <= bits:
            return dt
    return np.uint64


# -- scan kernels --------------------------------------------------------------

@numba.njit(cache=True)
def _scan_grouped(ucode, eta, gstart, glen, gptr, gcomp, gblk, codes, wts, r, scores):
    """Single-word codes; components of a group are fused two at a time."""
    act = np.empty(gcomp.shape[0] + 1, dtype=np.int64)
    for g in range(gstart.shape[0]):
        L = glen[g]
        sc = scores[gstart[g]:gstart[g] + L]
        na = 0
        for q in range(gptr[g], gptr[g + 1]):
            if eta[gcomp[q]] != 0:
                act[na] = q
                na += 1
        p = 0
        if na % 2 == 1:
            k = gcomp[act[0]]
            ek = eta[k]
            u = ucode[k]
            o = gblk[act[0]]
            cc = codes[o:o + L]
            ww = wts[o:o + L]
            for i in range(L):
                h = _popcount_as(u ^ cc[i], r)
                sc[i] = ek * ww[i] * (r - (h + h))
            p = 1
        else:
            sc[:] = 0
        while p < na:
            k1 = gcomp[act[p]]
            k2 = gcomp[act[p + 1]]
            e1 = eta[k1]
            e2 = eta[k2]
            u1 = ucode[k1]
            u2 = ucode[k2]
            o1 = gblk[act[p]]
            o2 = gblk[act[p + 1]]
            c1 = codes[o1:o1 + L]
            w1 = wts[o1:o1 + L]
            c2 = codes[o2:o2 + L]
            w2 = wts[o2:o2 + L]
            for i in range(L):
                h1 = _popcount_as(u1 ^ c1[i], r)
                h2 = _popcount_as(u2 ^ c2[i], r)
                sc[i] += e1 * w1[i] * (r - (h1 + h1)) + e2 * w2[i] * (r - (h2 + h2))
            p += 2


@numba.njit(cache=True)
def _scan_grouped_words(ucode, eta, gstart, glen, gptr, gcomp, gblk, codes, wts, r, scores):
    """Multi-word codes (r > 64); codes is (entries, W)."""
    W = codes.shape[1]
    scores[:] = 0
    for g in range(gstart.shape[0]):
        L = glen[g]
        s0 = gstart[g]
        for q in range(gptr[g], gptr[g + 1]):
            k = gcomp[q]
            ek = eta[k]
            if ek == 0:
                continue
            o = gblk[q]
            for i in range(L):
                h = _popcount_as(ucode[k, 0] ^ codes[o + i, 0], r)
                for w in range(1, W):
                    h += _popcount_as(ucode[k, w] ^ codes[o + i, w], r)
                scores[s0 + i] += ek * wts[o + i] * (r - (h + h))


@numba.njit(cache=True)
def _scan_flat1(u0, c0, bits, scores):
    for j in range(c0.shape[0]):
        h = _popcount_as(u0 ^ c0[j], bits)
        scores[j] = bits - (h + h)


@numba.njit(cache=True)
def _scan_flat2(u0, u1, c0, c1, bits, scores):
    for j in range(c0.shape[0]):
        h = _popcount_as(u0 ^ c0[j], bits) + _popcount_as(u1 ^ c1[j], bits)
        scores[j] = bits - (h + h)


@numba.njit(cache=True)
def _scan_flat_planes(ucode, planes, bits, scores):
    """planes is (W, n): one contiguous word plane per 64-bit slice."""
    scores[:] = bits
    for w in range(planes.shape[0]):
        u = ucode[w]
        pl = planes[w]
        for j in range(pl.shape[0]):
            h = _popcount_as(u ^ pl[j], bits)
            scores[j] -= h + h


def _scan_flat(ucode, planes, bits, scores):
    W = planes.shape[0]
    if W == 1:
        _scan_flat1(ucode[0], planes[0], bits, scores)
    elif W == 2:
        _scan_flat2(ucode[0], ucode[1], planes[0], planes[1], bits, scores)
    else:
        _scan_flat_planes(ucode, planes, bits, scores)


# -- top-k selection ---------------------------------------------------------

@numba.njit(cache=True)
def _sift_down(hs, hi, size, pos):
    # min-heap on (score, -item): the root is the worst kept candidate
    while True:
        left = 2 * pos + 1
        if left >= size:
            return
        child = left
        right = left + 1
        if right < size and (hs[right] < hs[left] or (hs[right] == hs[left] and hi[right] > hi[left])):
            child = right
        if hs[child] < hs[pos] or (hs[child] == hs[pos] and hi[child] > hi[pos]):
            hs[child], hs[pos] = hs[pos], hs[child]
            hi[child], hi[pos] = hi[pos], hi[child]
            pos = child
        else:
            return


_BLOCK = 256


@numba.njit(cache=True)
def _select_topk(scores, ids, excluded, k):
    """Top-k under (score desc, item asc).

    ``scores[p]`` belongs to item ``ids[p]``; ``excluded`` holds sorted scan
    positions to skip.
    """
    n = scores.shape[0]
    hs = np.empty(k, dtype=scores.dtype)
    hi = np.empty(k, dtype=np.int64)
    size = 0
    e = 0
    ne = excluded.shape[0]
    nxt = excluded[0] if ne > 0 else n
    p = 0
    # fill the heap
    while p < n and size < k:
        if p == nxt:
            e += 1
            nxt = excluded[e] if e < ne else n
            p += 1
            continue
        pos = size
        hs[pos] = scores[p]
        hi[pos] = ids[p]
        size += 1
        while pos > 0:
            parent = (pos - 1) // 2
            if hs[pos] < hs[parent] or (hs[pos] == hs[parent] and hi[pos] > hi[parent]):
                hs[pos], hs[parent] = hs[parent], hs[pos]
                hi[pos], hi[parent] = hi[parent], hi[pos]
                pos = parent
            else:
                break
        p += 1
    if size == 0:
        return hs[:0].copy(), hi[:0].copy()
    thr = hs[0]
    thr_id = hi[0]
    while p < n:
        end = min(p + _BLOCK, n)
        bmax = scores[p]
        for t in range(p + 1, end):
            bmax = max(bmax, scores[t])
        skip = bmax < thr
        if bmax == thr:
            # ties enter only with a smaller item index; sparse weights leave many zero scores
            bmin = ids[p]
            for t in range(p + 1, end):
                bmin = min(bmin, ids[t])
            skip = bmin > thr_id
        if skip:
            # nothing here can enter the heap; only advance the exclusion cursor
            while nxt < end:
                e += 1
                nxt = excluded[e] if e < ne else n
            p = end
            continue
        while p < end:
            v = scores[p]
            if p == nxt:
                e += 1
                nxt = excluded[e] if e < ne else n
            elif v >= thr:
                j = ids[p]
                if v > thr or j < thr_id:
                    hs[0] = v
                    hi[0] = j
                    _sift_down(hs, hi, size, 0)
                    thr = hs[0]
                    thr_id = hi[0]
            p += 1
    return hs[:size].copy(), hi[:size].copy()


@dataclass
class TopKResult:
    items: np.ndarray
    scores: np.ndarray
    integer_scaled: bool

    def __len__(self) -> int:
        return len(self.items)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.items.tolist(), self.scores.tolist()))


def _finish(scores, idx, integer_scaled):
    order = np.lexsort((idx, -scores))
    return TopKResult(idx[order], scores[order], integer_scaled)


# -- layout ------------------------------------------------------------------

@dataclass
class GroupedLayout:
    """Items grouped by non-zero weight pattern, scanned in ``perm`` order."""

    perm: np.ndarray      # scan position -> item
    inv: np.ndarray       # item -> scan position
    gstart: np.ndarray    # first scan position of each group
    glen: np.ndarray
    gptr: np.ndarray      # CSR over groups into gcomp / gblk
    gcomp: np.ndarray     # component of each block
    gblk: np.ndarray      # offset of each block in codes / wts
    codes: np.ndarray     # (entries,) or (entries, W)
    wts: np.ndarray       # (entries,) in the accumulator dtype

    @property
    def entries(self) -> int:
        return int(self.wts.shape[0])


def _group_layout(item_weights: np.ndarray, item_codes: np.ndarray, acc_dtype) -> GroupedLayout:
    n, G = item_weights.shape
    nz = item_weights != 0
    patterns, inverse = np.unique(nz, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    perm = np.argsort(inverse, kind="stable").astype(np.int64)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    glen = np.bincount(inverse, minlength=len(patterns)).astype(np.int64)
    gstart = np.concatenate([[0], np.cumsum(glen)[:-1]]).astype(np.int64)

    gptr, gcomp, gblk, blocks, wts = [0], [], [], [], []
    offset = 0
    for g, pattern in enumerate(patterns):
        rows = perm[gstart[g]:gstart[g] + glen[g]]
        for k in np.flatnonzero(pattern):
            gcomp.append(k)
            gblk.append(offset)
            blocks.append(item_codes[k][rows])
            wts.append(item_weights[rows, k])
            offset += len(rows)
        gptr.append(len(gcomp))
    W = item_codes.shape[2]
    codes = np.concatenate(blocks) if blocks else np.zeros((0, W), item_codes.dtype)
    if W == 1:
        codes = codes[:, 0]
    return GroupedLayout(perm, inv, gstart, glen, np.asarray(gptr, np.int64), np.asarray(gcomp, np.int64),
                         np.asarray(gblk, np.int64), np.ascontiguousarray(codes),
                         np.concatenate(wts).astype(acc_dtype) if wts else np.zeros(0, acc_dtype))


def _scan(layout: GroupedLayout, ucode, eta, r, out):
    kernel = _scan_grouped if layout.codes.ndim == 1 else _scan_grouped_words
    kernel(ucode if layout.codes.ndim > 1 else ucode[:, 0], eta, layout.gstart, layout.glen, layout.gptr,
           layout.gcomp, layout.gblk, layout.codes, layout.wts, r, out)


class RetrievalIndex:
    """Immutable scan layout of a trained model."""

    def __init__(self, model: CccfModel, e: int = 100):
        self.G, self.r, self.m, self.n = model.G, model.r, model.m, model.n
        self.e = int(e)
        if self.e < 1:
            raise ValueError("e must be >= 1")
        self.W = n_words(self.r)
        words = np.stack([c.words for c in model.user_codes])  # (G, m, W)
        item_words = np.stack([c.words for c in model.item_codes])  # (G, n, W)
        self.user_codes = words
        dt = code_dtype(self.r)
        self.user_codes_by_row = np.ascontiguousarray(words.transpose(1, 0, 2).astype(dt))  # (m, G, W)
        item_codes = item_words.astype(dt)

        w = model.weights
        iw = scale_integer_weights(w, self.e)
        self.integer_weights = iw
        bound = self.G * self.r * int(np.abs(iw.user).max(initial=0)) * int(np.abs(iw.item).max(initial=0))
        if bound > INT64_LIMIT:
            raise IndexOverflowError(f"scale e={self.e} can overflow the int64 accumulator (bound {bound})")
        self.acc_dtype = np.int32 if bound <= INT32_LIMIT else np.int64
        self.user_wf = np.ascontiguousarray(w.user, dtype=np.float64)
        self.user_wi = np.ascontiguousarray(iw.user, dtype=self.acc_dtype)
        self.item_wf = w.item
        self.item_wi = iw.item
        self.exact = _group_layout(w.item, item_codes, np.float64)
        self.fast = _group_layout(iw.item, item_codes, self.acc_dtype)

        if model.seen is not None:
            self.seen_ptr, self.seen_items = model.seen
        else:
            self.seen_ptr, self.seen_items = np.zeros(self.m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        self._item_words = item_words
        self._flat = None

    def item_code_words(self) -> np.ndarray:
        """(G, n, W) uint64 item codes, as stored in the model."""
        return self._item_words

    # -- queries ------------------------------------------------------------

    def excluded(self, user: int, exclude_seen: bool = True) -> np.ndarray:
        """Sorted item indices withheld from ``user``'s candidates."""
        if not exclude_seen:
            return np.zeros(0, dtype=np.int64)
        return np.sort(self.seen_items[self.seen_ptr[user]:self.seen_ptr[user + 1]]).astype(np.int64)

    def scan_exact(self, user: int, out: np.ndarray | None = None) -> np.ndarray:
        """Float scores in scan order (see ``exact.perm``)."""
        out = np.empty(self.n) if out is None else out
        _scan(self.exact, self.user_codes_by_row[user], self.user_wf[user], np.float64(self.r), out)
        return out

    def scan_fast(self, user: int, out: np.ndarray | None = None) -> np.ndarray:
        out = np.empty(self.n, dtype=self.acc_dtype) if out is None else out
        _scan(self.fast, self.user_codes_by_row[user], self.user_wi[user], self.acc_dtype(self.r), out)
        return out

    def scores_exact(self, user: int) -> np.ndarray:
        """Float weighted scores of every item, in item order."""
        return self.scan_exact(user)[self.exact.inv]

    def scores_fast(self, user: int) -> np.ndarray:
        """Integer-scaled scores of every item, in item order (int64)."""
        return self.scan_fast(user)[self.fast.inv].astype(np.int64)

    def flat_codes(self):
        """Concatenated (G*r)-bit codes: the unweighted binary baseline layout.

        Returns (user words (m, W'), item word planes (W', n), user +-1 floats,
        item +-1 floats).
        """
        if self._flat is None:
            G, r = self.G, self.r
            ub = np.concatenate([np.unpackbits(self.user_codes[k].view(np.uint8), axis=1,
                                               bitorder="little")[:, :r] for k in range(G)], axis=1)
            ib = np.concatenate([np.unpackbits(self._item_words[k].view(np.uint8), axis=1,
                                               bitorder="little")[:, :r] for k in range(G)], axis=1)
            up = pack_rows(ub.astype(np.int8) * 2 - 1)
            ip = pack_rows(ib.astype(np.int8) * 2 - 1)
            self._flat = (np.ascontiguousarray(up), np.ascontiguousarray(ip.T),
                          ub.astype(np.float64) * 2 - 1, np.ascontiguousarray(ib.astype(np.float64) * 2 - 1))
        return self._flat

    def mean_pair_nnz(self, users=None, integer: bool = True) -> float:
        """Average count of components with non-zero pair weight, over the given users."""
        uw = self.user_wi if integer else self.user_wf
        iw = self.item_wi if integer else self.item_wf
        per_comp = np.count_nonzero(iw, axis=0) / self.n
        rows = uw if users is None else uw[np.asarray(users)]
        return float(np.mean((rows != 0) @ per_comp))


def build_index(model: CccfModel, e: int = 100) -> RetrievalIndex:
    return RetrievalIndex(model, e)


def _check_k(k: int):
    if k < 1:
        raise ValueError("k must be >= 1")


def _query(index: RetrievalIndex, layout: GroupedLayout, scores, user, k, exclude_seen, integer):
    _check_k(k)
    excl = np.sort(layout.inv[index.excluded(user, exclude_seen)])
    s, idx = _select_topk(scores, layout.perm, excl, min(k, index.n))
    return _finish(s.astype(np.int64) if integer else s, idx, integer)


def topk_exact(index: RetrievalIndex, user: int, k: int, exclude_seen: bool = True) -> TopKResult:
    return _query(index, index.exact, index.scan_exact(user), user, k, exclude_seen, False)


def topk_fast(index: RetrievalIndex, user: int, k: int, exclude_seen: bool = True) -> TopKResult:
    return _query(index, index.fast, index.scan_fast(user), user, k, exclude_seen, True)


def benchmark(index: RetrievalIndex, mode: str, users, k: int = 10, repeats: int = 3,
              exclude_seen: bool = False, float_factors=None) -> dict:
    """Single-threaded wall-clock of full scan + top-k over all items.

    Each user is timed ``repeats`` times and the fastest run kept; the
    report sums those per-user minima. ``float-mf`` scans real factors of
    rank G*r: ``float_factors=(U, V)`` if given, else the +-1 codes as floats.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    users = np.asarray(users, dtype=np.int64)
    n = index.n
    kk = min(k, n)
    ids = np.arange(n, dtype=np.int64)
    if mode == "cccf-fast":
        lay = index.fast
        ids = lay.perm
        buf = np.empty(n, dtype=index.acc_dtype)
        uc, uw, r = index.user_codes_by_row, index.user_wi, index.acc_dtype(index.r)

        def scan(u):
            _scan(lay, uc[u], uw[u], r, buf)
    elif mode == "cccf-exact":
        lay = index.exact
        ids = lay.perm
        buf = np.empty(n)
        uc, uw, r = index.user_codes_by_row, index.user_wf, np.float64(index.r)

        def scan(u):
            _scan(lay, uc[u], uw[u], r, buf)
    elif mode == "dcf-flat":
        ucodes, planes, _, _ = index.flat_codes()
        buf = np.empty(n, dtype=np.int32)
        bits = np.int32(index.G * index.r)

        def scan(u):
            _scan_flat(ucodes[u], planes, bits, buf)
    else:
        if float_factors is None:
            _, _, uf, vf = index.flat_codes()
        else:
            uf, vf = (np.ascontiguousarray(a, dtype=np.float64) for a in float_factors)
        buf = np.empty(n)

        def scan(u):
            np.dot(vf, uf[u], out=buf)

    with threadpool_limits(limits=1):
        total = _time_queries(index, mode, scan, buf, ids, users, kk, repeats, exclude_seen)
    nnz = index.mean_pair_nnz(users, integer=(mode == "cccf-fast")) if mode.startswith("cccf") else float(index.G)
    return dict(mode=mode, users=len(users), items=n, total_bits=index.G * index.r,
                nnz_w_mean=nnz, seconds_total=total, items_per_sec=len(users) * n / total)


def _time_queries(index, mode, scan, buf, ids, users, kk, repeats, exclude_seen) -> float:
    none = np.zeros(0, dtype=np.int64)
    inv = index.fast.inv if mode == "cccf-fast" else index.exact.inv if mode == "cccf-exact" else None
    # warm-up compiles and faults in the layout
    scan(users[0])
    _select_topk(buf, ids, none, kk)
    total = 0.0
    for u in users:
        excl = none
        if exclude_seen:
            excl = index.excluded(int(u), True)
            if inv is not None:
                excl = np.sort(inv[excl])
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            scan(u)
            _select_topk(buf, ids, excl, kk)
            best = min(best, time.perf_counter() - t0)
        total += best
    return total


def write_bench_csv(rows: list[dict], fh) -> None:
    fh.write(",".join(BENCH_COLUMNS) + "\n")
    for row in rows:
        fh.write(",".join(str(row[c]) for c in BENCH_COLUMNS) + "\n")
