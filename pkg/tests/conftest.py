import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cccf.data import RatingTriples, build_matrix

warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

ROOT = Path(__file__).resolve().parent.parent
ML100K = ROOT / "data" / "ml-100k.csv"

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_triples(rng, m, n, density=0.6, source="synthetic"):
    """Random ratings where every user and every item has at least one entry."""
    mask = rng.random((m, n)) < density
    for i in range(m):
        if not mask[i].any():
            mask[i, rng.integers(n)] = True
    for j in range(n):
        if not mask[:, j].any():
            mask[rng.integers(m), j] = True
    users, items = np.nonzero(mask)
    ratings = rng.integers(1, 6, size=len(users)).astype(float)
    return RatingTriples([f"u{u}" for u in users], [f"i{i}" for i in items], ratings, source)


def random_matrix(rng, m, n, density=0.6):
    return build_matrix(random_triples(rng, m, n, density))


@pytest.fixture(scope="session")
def ml100k_path():
    if not ML100K.exists():
        sys.path.insert(0, str(ROOT / "scripts"))
        try:
            from fetch_ml100k import fetch
            fetch(ML100K)
        except Exception as exc:  # network or mirror unavailable
            pytest.skip(f"MovieLens-100K unavailable: {exc}")
    return ML100K


@pytest.fixture(scope="session")
def ml100k(ml100k_path):
    from cccf.data import load_ratings
    return load_ratings(ml100k_path)


# acceptance criteria register one line each; the lines are echoed live and
# again in the terminal summary so they survive output capturing
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
