"""Small helpers shared across modules: RNG streams and text output."""

from __future__ import annotations

import csv
import io
import math
from typing import Iterable, Sequence

import numpy as np


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed on ``seed`` and an integer tuple.

    Streams for distinct keys are independent, and a stream depends only on
    its key, so batches can be generated in any order or in parallel.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def uniform_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` points uniformly distributed on the unit sphere."""
    z = rng.standard_normal((n, 3))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def fmt(x) -> str:
    """Shortest round-trip text for a float (or int/str passthrough)."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(a) for a in row])
    return buf.getvalue()


def mean_and_stderr(batch_sums: Sequence[float], batch_sq: Sequence[float], n: int) -> tuple[float, float]:
    """Mean and standard error from per-batch sums, combined deterministically."""
    mean = math.fsum(batch_sums) / n
    var = max(math.fsum(batch_sq) / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)
