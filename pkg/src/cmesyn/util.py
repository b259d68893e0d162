"""Small shared helpers: deterministic CSV writing, hashing, worker pools."""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor


def fmt(value) -> str:
    """Shortest round-trip decimal form; bit-stable across runs."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    """Write rows with a fixed '\\n' terminator so output is byte-stable."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def ordered_map(fn, items, workers: int = 1) -> list:
    """Apply ``fn`` over ``items``, preserving order in the result.

    With workers > 1 the calls run on a thread pool (the heavy lifting
    inside is BLAS, which releases the GIL); aggregation order is fixed,
    so results are identical for any worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
