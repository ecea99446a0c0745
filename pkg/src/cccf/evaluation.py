"""NDCG@K and the experiment harness for the hyper-parameter sweeps."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import RatingTriples, build_matrix, filter_min_interactions, split_per_user
from .mf import MfConfig, train_mf
from .retrieval import RetrievalIndex, build_index, topk_exact, topk_fast
from .solver import TrainConfig, fit

log = logging.getLogger(__name__)

DEFAULT_KS = (2, 4, 6, 8, 10)
REPORT_COLUMNS = ("dataset", "split_seed", "G", "r", "total_bits", "h", "e", "alpha1", "alpha2",
                  "ndcg@2", "ndcg@4", "ndcg@6", "ndcg@8", "ndcg@10", "train_secs", "retrieval_secs")


def _gain(rating: float, gain: str) -> float:
    return rating if gain == "linear" else 2.0 ** rating - 1.0


def ndcg_at_k(ranked_items, test_ratings: dict, k: int, gain: str = "linear") -> float:
    """NDCG of a ranking against held-out ratings (items outside the test set gain 0)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not test_ratings:
        raise ValueError("user has no test ratings")
    dcg = 0.0
    for p, item in enumerate(list(ranked_items)[:k]):
        rel = test_ratings.get(item)
        if rel:
            dcg += _gain(rel, gain) / math.log2(p + 2)
    ideal = sorted(test_ratings.values(), reverse=True)[:k]
    idcg = sum(_gain(rel, gain) / math.log2(p + 2) for p, rel in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class EvalReport:
    ndcg: dict[int, float]
    users: int
    skipped_users: int = 0
    retrieval_secs: float = 0.0
    rows: list[dict] = field(default_factory=list)


def test_by_user(index_user_ids: dict[str, int], index_item_ids: dict[str, int],
                 test: RatingTriples) -> dict[int, dict[int, float]]:
    """Group test triples into {user index: {item index: rating}} in model index space."""
    out: dict[int, dict[int, float]] = {}
    for u, i, r in test:
        ui, ii = index_user_ids.get(u), index_item_ids.get(i)
        if ui is None or ii is None:
            continue
        out.setdefault(ui, {})[ii] = r
    return out


def evaluate_rankings(ranker, truth: dict[int, dict[int, float]], m: int, ks=DEFAULT_KS,
                      gain: str = "linear") -> EvalReport:
    """Average NDCG@K over users; ``ranker(user, k)`` returns ranked item indices."""
    kmax = max(ks)
    sums = {k: 0.0 for k in ks}
    users = 0
    t0 = time.perf_counter()
    for u in range(m):
        rel = truth.get(u)
        if not rel:
            continue
        ranked = list(ranker(u, kmax))
        for k in ks:
            sums[k] += ndcg_at_k(ranked, rel, k, gain)
        users += 1
    elapsed = time.perf_counter() - t0
    skipped = m - users
    if skipped:
        log.info("skipped %d users without test ratings", skipped)
    return EvalReport({k: (sums[k] / users if users else 0.0) for k in ks}, users, skipped, elapsed)


CANDIDATE_SETS = ("all", "test")


def evaluate(index: RetrievalIndex, user_ids: list[str], item_ids: list[str], test: RatingTriples,
             ks=DEFAULT_KS, fast: bool = True, gain: str = "linear", candidates: str = "all") -> EvalReport:
    """Mean NDCG@K of the index's rankings against held-out ratings.

    ``candidates="all"`` ranks every item the user did not train on (top-k
    retrieval). ``candidates="test"`` ranks only the user's held-out items,
    the rating-prediction protocol common in the discrete CF literature.
    """
    if candidates not in CANDIDATE_SETS:
        raise ValueError(f"candidates must be one of {CANDIDATE_SETS}")
    truth = test_by_user({u: t for t, u in enumerate(user_ids)}, {i: t for t, i in enumerate(item_ids)}, test)
    if candidates == "all":
        query = topk_fast if fast else topk_exact
        return evaluate_rankings(lambda u, k: query(index, u, k).items.tolist(), truth, index.m, ks, gain)

    def rank_test_items(u, k):
        items = np.fromiter(truth[u], dtype=np.int64)
        scores = (index.scores_fast(u) if fast else index.scores_exact(u))[items]
        return items[np.lexsort((items, -scores))][:k].tolist()

    return evaluate_rankings(rank_test_items, truth, index.m, ks, gain)


def average_reports(reports: list[EvalReport]) -> EvalReport:
    ks = list(reports[0].ndcg)
    return EvalReport(
        {k: float(np.mean([r.ndcg[k] for r in reports])) for k in ks},
        int(np.sum([r.users for r in reports])),
        int(np.sum([r.skipped_users for r in reports])),
        float(np.sum([r.retrieval_secs for r in reports])),
    )


@dataclass
class Split:
    seed: int
    train: RatingTriples
    test: RatingTriples


def make_splits(triples: RatingTriples, seeds, train_frac: float = 0.7, min_count: int = 1) -> list[Split]:
    if min_count > 1:
        triples = filter_min_interactions(triples, min_count)
    return [Split(s, *split_per_user(triples, train_frac, s)) for s in seeds]


def run_experiment(splits: list[Split], grid: list[dict], base: TrainConfig = TrainConfig(),
                   mf: MfConfig = MfConfig(), e: int = 100, ks=DEFAULT_KS, dataset: str = "",
                   fast: bool = True, candidates: str = "all", gain: str = "linear") -> list[dict]:
    """Train and evaluate every grid point on every shared split.

    Grid entries override ``base`` fields plus the optional key ``e``.
    Latent factors are trained once per split and shared across the grid.
    """
    rows = []
    for split in splits:
        matrix = build_matrix(split.train)
        latents = train_mf(matrix, replace(mf, seed=mf.seed))
        for point in grid:
            point = dict(point)
            scale = int(point.pop("e", e))
            cfg = replace(base, **point)
            t0 = time.perf_counter()
            result = fit(matrix, latents, cfg)
            train_secs = time.perf_counter() - t0
            index = build_index(result.model, scale)
            report = evaluate(index, matrix.user_ids, matrix.item_ids, split.test, ks, fast, gain, candidates)
            row = dict(dataset=dataset, split_seed=split.seed, G=cfg.G, r=cfg.r, total_bits=cfg.G * cfg.r,
                       h=cfg.h, e=scale, alpha1=cfg.alpha1, alpha2=cfg.alpha2,
                       train_secs=train_secs, retrieval_secs=report.retrieval_secs)
            for k in ks:
                row[f"ndcg@{k}"] = report.ndcg[k]
            rows.append(row)
            log.info("split %d G=%d r=%d ndcg@%d=%.4f", split.seed, cfg.G, cfg.r, max(ks), report.ndcg[max(ks)])
    return rows


def write_report(rows: list[dict], fh, columns=REPORT_COLUMNS) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
