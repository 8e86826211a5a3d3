"""Deterministic seed derivation and RNG streams.

Every random draw in the package goes through a counter-based Philox
generator keyed by a 64-bit seed, and sub-seeds are derived with a
splitmix64-style mix.  This keeps grid cells bit-reproducible and
independent of execution order, so cells can train concurrently.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

# Stream roles, combined into sub-seeds so that e.g. the initialization
# stream never collides with the mini-batch shuffle stream of the same cell.
ROLE_INIT = 0x11
ROLE_DATA = 0x22
ROLE_AUG = 0x33
ROLE_UNLABELED = 0x44
ROLE_POWER_ITER = 0x55
ROLE_MODEL_A = 0x66
ROLE_MODEL_B = 0x77
ROLE_DATASET = 0x88
ROLE_CENTERS = 0x99


def splitmix64(x: int) -> int:
    """One splitmix64 output step on a 64-bit state."""
    x = (x + _GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix64(*parts: int) -> int:
    """Mix integers into one 64-bit sub-seed (order-sensitive)."""
    h = 0x6A09E667F3BCC909
    for p in parts:
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h


def stream(seed: int) -> np.random.Generator:
    """Counter-based generator keyed directly by ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))
