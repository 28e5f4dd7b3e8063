"""Deterministic random-stream management.

Every command seeds a single integer; purpose-specific streams (init, noise,
data, ...) are split off by label so that adding a consumer never shifts the
draws seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str) -> tuple[int, int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    w0 = int.from_bytes(digest[0:4], "little")
    w1 = int.from_bytes(digest[4:8], "little")
    return w0, w1


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Generator for (seed, label); identical arguments give identical streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_label_words(label))
    return np.random.default_rng(ss)


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for sub-tasks that take an integer seed themselves."""
    payload = int(seed).to_bytes(16, "little", signed=True) + label.encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
