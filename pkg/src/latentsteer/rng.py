"""Counter-based deterministic randomness.

Every draw is a pure function of (seed, iteration, lane).  Nothing here
keeps mutable state, so resuming a run at iteration t reproduces exactly
the draws the uninterrupted run would have made, on any platform.  The
mixer is the splitmix64 finalizer; the three inputs are folded in with
odd 64-bit constants so distinct (seed, iteration, lane) triples land in
distinct counter positions.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_ITER_SALT = np.uint64(0xD1B54A32D192ED03)
_LANE_SALT = np.uint64(0x8CB92BA72F3D8DD7)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)

def _mix64(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2^64; that is the intended behaviour.
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX_A
        x = (x ^ (x >> np.uint64(27))) * _MIX_B
        return x ^ (x >> np.uint64(31))


def _as_u64(value):
    # Accept plain ints (possibly negative or > 64 bits) and wrap them,
    # or pass integer ndarrays through for batched draws.
    if isinstance(value, np.ndarray):
        return value.astype(np.uint64)
    return np.uint64(int(value) & 0xFFFFFFFFFFFFFFFF)


def draw_u64(seed, iteration, lane):
    """Raw 64-bit draw for counter (seed, iteration, lane).

    ``seed`` and ``lane`` may be integers or integer ndarrays; inputs
    broadcast and the result has the broadcast shape.
    """
    with np.errstate(over="ignore"):
        s = _mix64(_as_u64(seed) ^ _GOLDEN)
        i = _mix64(s + _as_u64(iteration) * _ITER_SALT)
        lanes = np.asarray(lane, dtype=np.uint64)
        return _mix64(i + lanes * _LANE_SALT)


def draw_uniform(seed, iteration, lane):
    """Uniform draw(s) in [0, 1) with 53 bits of precision."""
    bits = draw_u64(seed, iteration, lane)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def draw_normal(seed, iteration, lane):
    """Standard normal draw(s) via Box-Muller.

    Each output consumes lanes (2*lane, 2*lane + 1), so callers may use
    consecutive lane values without overlap.
    """
    lanes = np.asarray(lane, dtype=np.uint64)
    with np.errstate(over="ignore"):
        u1 = draw_uniform(seed, iteration, lanes * np.uint64(2))
        u2 = draw_uniform(seed, iteration, lanes * np.uint64(2) + np.uint64(1))
    # 1 - u1 keeps the log argument in (0, 1].
    r = np.sqrt(-2.0 * np.log1p(-u1))
    return r * np.cos(2.0 * np.pi * u2)


class DeterministicStream:
    """Convenience wrapper binding a seed to the counter draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def uniform(self, iteration: int, lane) -> np.ndarray:
        return draw_uniform(self.seed, iteration, lane)

    def normal(self, iteration: int, lane) -> np.ndarray:
        return draw_normal(self.seed, iteration, lane)

    def raw(self, iteration: int, lane) -> np.ndarray:
        return draw_u64(self.seed, iteration, lane)

    def uniform_block(self, iteration: int, start: int, count: int) -> np.ndarray:
        """count uniforms on consecutive lanes starting at ``start``."""
        lanes = np.arange(start, start + count, dtype=np.uint64)
        return draw_uniform(self.seed, iteration, lanes)

    def normal_block(self, iteration: int, start: int, count: int) -> np.ndarray:
        lanes = np.arange(start, start + count, dtype=np.uint64)
        return draw_normal(self.seed, iteration, lanes)


def string_key(text: str) -> int:
    """Stable 64-bit key for a string (FNV-1a), independent of process."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
