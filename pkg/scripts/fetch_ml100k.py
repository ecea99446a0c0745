#!/usr/bin/env python3
"""Fetch MovieLens-100K as ``data/ml-100k.csv``.

The grouplens archive is tried first. Sandboxes without general network
access can still reach a PyPI mirror, so the fallback pulls the RecBole
wheel (which bundles the ML-100K interaction file) and converts it.
"""
from __future__ import annotations

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
DEFAULT_OUT = Path(__file__).resolve().parent.parent / "data" / "ml-100k.csv"


def _rows_from_grouplens() -> list[tuple[str, str, str, str]]:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=20) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    text = archive.read("ml-100k/u.data").decode()
    return [tuple(line.split("\t")) for line in text.splitlines() if line]


def _rows_from_recbole() -> list[tuple[str, str, str, str]]:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        text = zipfile.ZipFile(wheel).read(RECBOLE_MEMBER).decode()
    lines = text.splitlines()[1:]  # typed header: user_id:token ...
    return [tuple(line.split("\t")) for line in lines if line]


def fetch(out: Path = DEFAULT_OUT) -> Path:
    if out.exists():
        return out
    try:
        rows = _rows_from_grouplens()
    except OSError:
        rows = _rows_from_recbole()
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("user_id,item_id,rating,timestamp\n")
        for user, item, rating, ts in rows:
            fh.write(f"{user},{item},{float(rating):g},{int(float(ts))}\n")
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()
    print(fetch(args.out))


if __name__ == "__main__":
    main()
