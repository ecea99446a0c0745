"""Rating ingestion, filtering, per-user splitting and the dual-indexed matrix."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "csv")
RATING_RANGE = (0.0, 5.0)


class DataError(ValueError):
    """Raised for malformed input or an unusable dataset."""


class ParseError(DataError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


@dataclass
class RatingTriples:
    """Observed (user, item, rating) entries with opaque string ids."""

    users: list[str]
    items: list[str]
    ratings: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise DataError("users, items and ratings must have equal length")

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self):
        return zip(self.users, self.items, self.ratings.tolist())

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, str, float]], source: str = "") -> "RatingTriples":
        users, items, ratings = [], [], []
        for u, i, r in entries:
            users.append(str(u))
            items.append(str(i))
            ratings.append(float(r))
        return cls(users, items, np.array(ratings, dtype=np.float64), source)

    def subset(self, mask: np.ndarray, source: str | None = None) -> "RatingTriples":
        idx = np.flatnonzero(mask)
        return RatingTriples(
            [self.users[t] for t in idx],
            [self.items[t] for t in idx],
            self.ratings[idx],
            self.source if source is None else source,
        )

    def user_counts(self) -> Counter:
        return Counter(self.users)

    def item_counts(self) -> Counter:
        return Counter(self.items)

    def key_set(self) -> set[tuple[str, str, float]]:
        return set(self)

    def to_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "item_id", "rating"])
        for u, i, r in self:
            writer.writerow([u, i, repr(r)])


def _check_rating(value: str, line_no: int) -> float:
    try:
        r = float(value)
    except ValueError:
        raise ParseError(line_no, f"rating {value!r} is not a number") from None
    lo, hi = RATING_RANGE
    if not math.isfinite(r) or r < lo or r > hi:
        raise ParseError(line_no, f"rating {r} outside [{lo:g}, {hi:g}]")
    return r


def parse_ratings(reader: BinaryIO | io.TextIOBase, format: str = "csv", source: str = "") -> RatingTriples:
    """Parse a MovieLens ``::`` file or a ``user_id,item_id,rating[,timestamp]`` CSV.

    Duplicate (user, item) pairs keep the last occurrence; timestamps are
    read past and dropped.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    raw = reader.read()
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    lines = text.splitlines()

    entries: dict[tuple[str, str], float] = {}
    start = 0
    if format == "csv":
        if not lines:
            return RatingTriples([], [], np.empty(0), source)
        header = [h.strip() for h in lines[0].split(",")]
        if header[:3] != ["user_id", "item_id", "rating"] or len(header) > 4:
            raise ParseError(1, f"expected header user_id,item_id,rating[,timestamp], got {lines[0]!r}")
        ncols = len(header)
        start = 1

    for line_no, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        if format == "movielens-dat":
            parts = line.split("::")
            if len(parts) not in (3, 4):
                raise ParseError(line_no, f"expected user::item::rating[::timestamp], got {line!r}")
        else:
            parts = next(csv.reader([line]))
            if len(parts) != ncols:
                raise ParseError(line_no, f"expected {ncols} fields, got {len(parts)}")
        user, item = parts[0].strip(), parts[1].strip()
        if not user or not item:
            raise ParseError(line_no, "empty user or item id")
        rating = _check_rating(parts[2].strip(), line_no)
        key = (user, item)
        # re-insert so dict order follows the last occurrence
        entries.pop(key, None)
        entries[key] = rating

    return RatingTriples(
        [u for u, _ in entries],
        [i for _, i in entries],
        np.fromiter(entries.values(), dtype=np.float64, count=len(entries)),
        source,
    )


def load_ratings(path, format: str | None = None) -> RatingTriples:
    path = str(path)
    if format is None:
        format = "movielens-dat" if path.endswith(".dat") else "csv"
    with open(path, "rb") as fh:
        return parse_ratings(fh, format, source=path)


def filter_min_interactions(triples: RatingTriples, min_count: int) -> RatingTriples:
    """Drop users, then items, below ``min_count`` ratings until nothing changes."""
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    users = np.array(triples.users, dtype=object)
    items = np.array(triples.items, dtype=object)
    keep = np.ones(len(triples), dtype=bool)
    while True:
        before = int(keep.sum())
        ucount = Counter(users[keep])
        keep &= np.fromiter((ucount[u] >= min_count for u in users), dtype=bool, count=len(users))
        icount = Counter(items[keep])
        keep &= np.fromiter((icount[i] >= min_count for i in items), dtype=bool, count=len(items))
        if int(keep.sum()) == before:
            break
    if not keep.any():
        raise DataError(f"dataset vanished under filtering with min_count={min_count}")
    return triples.subset(keep)


def split_per_user(triples: RatingTriples, train_frac: float = 0.7, seed: int = 0):
    """Seeded per-user split: ``ceil(train_frac * count)`` ratings of each user go to train.

    Test entries whose user or item never occurs in train are dropped and
    counted in the log.
    """
    if not 0.0 < train_frac < 1.0:
        raise DataError("train_frac must lie in (0, 1)")
    by_user: dict[str, list[int]] = {}
    for t, u in enumerate(triples.users):
        by_user.setdefault(u, []).append(t)
    rng = np.random.default_rng(seed)
    train_mask = np.zeros(len(triples), dtype=bool)
    for u, rows in by_user.items():
        if len(rows) < 2:
            raise DataError(f"user {u!r} has {len(rows)} rating(s); splitting needs >= 2")
        order = np.array(rows)[rng.permutation(len(rows))]
        n_train = math.ceil(train_frac * len(rows) - 1e-9)
        train_mask[order[:n_train]] = True

    train = triples.subset(train_mask)
    test = triples.subset(~train_mask)
    known_users, known_items = set(train.users), set(train.items)
    ok = np.fromiter(
        ((u in known_users and i in known_items) for u, i in zip(test.users, test.items)),
        dtype=bool,
        count=len(test),
    )
    dropped = int((~ok).sum())
    if dropped:
        log.info("dropped %d test ratings with users/items unseen in train", dropped)
    return train, test.subset(ok)


@dataclass
class RatingsMatrix:
    """Sparse ratings indexed both by user and by item.

    Observations are stored once, ordered by user (``obs_*`` arrays); the
    by-user view is a CSR over that order and the by-item view is a CSR of
    observation ids.
    """

    m: int
    n: int
    obs_user: np.ndarray
    obs_item: np.ndarray
    obs_rating: np.ndarray
    user_indptr: np.ndarray
    item_indptr: np.ndarray
    item_obs: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    user_index: dict[str, int] = field(repr=False)
    item_index: dict[str, int] = field(repr=False)

    @property
    def nnz(self) -> int:
        return len(self.obs_rating)

    def by_user(self, i: int) -> list[tuple[int, float]]:
        s = slice(self.user_indptr[i], self.user_indptr[i + 1])
        return list(zip(self.obs_item[s].tolist(), self.obs_rating[s].tolist()))

    def by_item(self, j: int) -> list[tuple[int, float]]:
        obs = self.item_obs[self.item_indptr[j]:self.item_indptr[j + 1]]
        return list(zip(self.obs_user[obs].tolist(), self.obs_rating[obs].tolist()))

    def user_items(self, i: int) -> np.ndarray:
        return self.obs_item[self.user_indptr[i]:self.user_indptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.m, self.n))
        dense[self.obs_user, self.obs_item] = self.obs_rating
        return dense

    def to_csv(self, fh) -> None:
        fh.write("user_index,item_index,rating\n")
        for u, i, r in zip(self.obs_user.tolist(), self.obs_item.tolist(), self.obs_rating.tolist()):
            fh.write(f"{u},{i},{r!r}\n")


def _index_tokens(tokens: list[str]) -> tuple[list[str], dict[str, int], np.ndarray]:
    index: dict[str, int] = {}
    codes = np.empty(len(tokens), dtype=np.int64)
    for t, tok in enumerate(tokens):
        codes[t] = index.setdefault(tok, len(index))
    return list(index), index, codes


def build_matrix(triples: RatingTriples) -> RatingsMatrix:
    """Reindex ids densely in first-appearance order and build both views."""
    if len(triples) == 0:
        raise DataError("cannot build a matrix from zero ratings")
    user_ids, user_index, u = _index_tokens(triples.users)
    item_ids, item_index, i = _index_tokens(triples.items)
    m, n = len(user_ids), len(item_ids)

    order = np.lexsort((i, u))
    obs_user, obs_item, obs_rating = u[order], i[order], triples.ratings[order]
    user_indptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(obs_user, minlength=m), out=user_indptr[1:])
    item_obs = np.lexsort((obs_user, obs_item)).astype(np.int64)
    item_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(obs_item, minlength=n), out=item_indptr[1:])
    return RatingsMatrix(
        m, n, obs_user, obs_item, obs_rating, user_indptr, item_indptr, item_obs,
        user_ids, item_ids, user_index, item_index,
    )
