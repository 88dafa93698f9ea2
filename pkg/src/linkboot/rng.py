"""Deterministic seed derivation for nested, parallel bootstrap streams.

Every random draw in the package flows from a single 64-bit master seed.
Replicate-level streams are derived by hashing a path of integers
(tag, level, b, c, d, ...) with splitmix64, so replicates are
order-insensitive and safe to evaluate in parallel.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


_M = 0xFFFFFFFFFFFFFFFF


def _splitmix64_int(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _M
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M
    return z ^ (z >> 31)


def splitmix64(state: np.ndarray | int) -> np.ndarray | np.uint64:
    """One splitmix64 step; arrays wrap silently, scalars go through ints."""
    if np.isscalar(state) or np.ndim(state) == 0:
        return np.uint64(_splitmix64_int(int(state)))
    z = (np.asarray(state, dtype=np.uint64) + _GAMMA) & _U64
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _U64
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _U64
    return z ^ (z >> np.uint64(31))


def derive_seed(master: int, *path: int) -> int:
    """Hash (master, *path) into a stream seed.

    Pure function of its arguments: the same path always yields the same
    seed no matter how many other streams were derived in between.
    """
    state = int(master) & _M
    for part in path:
        state = _splitmix64_int(state ^ (int(part) & _M))
    return _splitmix64_int(state)


def derive_seed_array(master: int, *path: int, count: int, offset: int = 0) -> np.ndarray:
    """Vector of `count` stream seeds for replicates offset..offset+count-1."""
    base = np.uint64(derive_seed(master, *path))
    idx = (np.arange(offset, offset + count, dtype=np.uint64) * _MIX1) & _U64
    return splitmix64((base ^ idx) & _U64)


def finalize64(state: np.ndarray) -> np.ndarray:
    """splitmix64 output function (no increment); vectorized."""
    z = np.asarray(state, dtype=np.uint64)
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _U64
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _U64
    return z ^ (z >> np.uint64(31))


def stream_draws53(state: int | np.uint64, count: int) -> np.ndarray:
    """The `count` 53-bit integer draws a replicate stream yields.

    Must stay bit-identical to the inline generator in the numba kernels:
    t_k = finalize64(state + k * GAMMA) >> 11, k = 1..count.
    """
    ks = (np.uint64(int(state) & _M) + np.arange(1, count + 1, dtype=np.uint64) * _GAMMA) & _U64
    return finalize64(ks) >> np.uint64(11)


def stream_uniforms(state: int | np.uint64, count: int) -> np.ndarray:
    """The stream's uniforms: its 53-bit draws scaled by 2^-53."""
    return stream_draws53(state, count) * (1.0 / 9007199254740992.0)


def generator(master: int, *path: int) -> np.random.Generator:
    """NumPy Generator on the stream addressed by `path`."""
    return np.random.default_rng(derive_seed(master, *path))


def path_states(master: int, tag: int, level: int, dims: tuple[int, ...]) -> np.ndarray:
    """Replicate stream states for every index tuple of `dims`, flattened.

    States depend only on (master, tag, level, b, c, ...), so enlarging a
    dimension or adding deeper levels never disturbs existing streams.
    """
    state = np.uint64(derive_seed(master, tag, level))
    out = np.array(state)
    for d in dims:
        idx = (np.arange(d, dtype=np.uint64) * _MIX2) & _U64
        out = splitmix64((out[..., None] ^ idx) & _U64)
    return out.reshape(-1)


def retry_states(states: np.ndarray, attempt: int) -> np.ndarray:
    """Fresh derived streams for replicates whose estimator failed."""
    bump = np.uint64(derive_seed(attempt, 0xDEAD))
    return splitmix64((np.asarray(states, dtype=np.uint64) ^ bump) & _U64)


def fresh_master_seed() -> int:
    """Draw a new master seed from OS entropy (used when none is given)."""
    return int(np.random.SeedSequence().entropy % (1 << 64))
