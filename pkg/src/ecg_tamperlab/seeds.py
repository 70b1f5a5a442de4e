"""Child-seed derivation: every stochastic step draws from ``derive_seed(master, *keys)``."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys) -> int:
    """Hash ``master`` and a path of keys (names, indices) into a 63-bit seed."""
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def child_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
