"""Labeled random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("env", "init", "sampler", "gate", "action", "eval")


def derive_seed(master: int, label: str) -> np.random.SeedSequence:
    """Independent seed sequence for ``label``; stable across runs and platforms."""
    return np.random.SeedSequence([int(master), zlib.crc32(label.encode("utf-8"))])


def derive_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))


def worker_seeds(master: int, label: str, n: int) -> list[int]:
    """One integer seed per worker slot, in worker-index order."""
    return [int(s.generate_state(1)[0]) for s in derive_seed(master, label).spawn(n)]
