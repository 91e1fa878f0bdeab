"""Deterministic 64-bit seed derivation shared by the network and the harness.

mix64 folds a sequence of integers through the splitmix64 finalizer, one
round per input. The same inputs give the same output on every platform,
unlike Python's built-in hash. Used to derive per-layer weight seeds from an
initialization seed and per-cell (init, run) seeds from a master seed.
"""

from __future__ import annotations

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _finalize(z: int) -> int:
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _M64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _M64
    z ^= z >> 31
    return z


def mix64(*parts: int) -> int:
    """Mix any number of integers into one uniform 64-bit value."""
    if not parts:
        raise ValueError("mix64 needs at least one input")
    acc = _GOLDEN
    for part in parts:
        acc = (acc ^ (int(part) & _M64)) & _M64
        acc = (acc + _GOLDEN) & _M64
        acc = _finalize(acc)
    return acc
