"""Seeded randomness.

Every generator is numpy's counter-based Philox keyed by a 64-bit value, so a
(seed, purpose) pair produces the same stream on every platform. Purposes are
free-form strings ("cs.phi", "data.train", "stage3.lora") hashed into the key.
"""
import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    h = hashlib.blake2b(f"{int(seed)}:{purpose}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, purpose: str = "") -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, purpose)))
