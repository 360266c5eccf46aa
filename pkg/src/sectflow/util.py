"""Shared plumbing: seeded RNG streams, order-preserving parallel map,
Halton points, atomic file writes, config hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_HALTON_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)


def rng_stream(master_seed: int, label: str) -> np.random.Generator:
    """Generator derived from the master seed and a fixed label.

    Streams for distinct labels are independent, so adding a new consumer
    never perturbs the draws of existing ones.
    """
    digest = hashlib.blake2s(f"{master_seed:d}/{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def parallel_map(fn, items, threads: int = 1) -> list:
    """Map fn over items, results in input order.

    Each item must be computed independently of the others; the output is
    then identical for every thread count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def halton(n: int, dim: int, start: int = 0) -> np.ndarray:
    """First n Halton points in [0,1)^dim, skipping `start` points."""
    if dim > len(_HALTON_PRIMES):
        raise ValueError(f"halton supports dim <= {len(_HALTON_PRIMES)}")
    out = np.empty((n, dim))
    idx = np.arange(start + 1, start + n + 1, dtype=np.int64)
    for j in range(dim):
        base = _HALTON_PRIMES[j]
        i = idx.copy()
        val = np.zeros(n)
        f = 1.0
        while np.any(i > 0):
            f /= base
            val += f * (i % base)
            i //= base
        out[:, j] = val
    return out


def atomic_write(path: str, data) -> None:
    """Write bytes or text to path via a temp file and rename."""
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def json_ready(obj):
    """Recursively convert numpy scalars/arrays so json.dumps succeeds."""
    if isinstance(obj, dict):
        return {k: json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_ready(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(json_ready(obj), indent=2, sort_keys=True) + "\n"
