"""Seedable, counter-based generation of coupled Brownian increments.

Every normal variate is a pure function of (experiment_seed, iteration,
level, sample_index, variate_index), so paths can be generated in any
order, on any number of workers, and always come out bit-identical.
A level-l path over the unit horizon uses 2^l uniform steps; its
next-coarser version is obtained by summing adjacent increment pairs,
which makes fine and coarse simulations share one underlying Brownian
motion.

The uniform stream is Philox4x32-10 (counter-based, crypto-derived
mixing); normals come from the inverse normal CDF applied to the 53-bit
uniform built from the output words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

# Time horizon of every simulation; level l discretizes [0, HORIZON]
# into 2^l steps.  Kept a module constant on purpose: the coupling and
# cost arithmetic elsewhere assume the dyadic grid.
HORIZON = 1.0

# Levels above this would allocate 2^l-entry arrays per path; treat as
# a configuration mistake rather than letting memory blow up.
LEVEL_CAP = 30

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1

# Philox4x32 round constants (Salmon et al. reference values).
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85


def _splitmix64(z: int) -> int:
    """One step of the splitmix64 mixer; bijective on 64-bit ints."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix(*words: int) -> int:
    """Fold integer words into one well-mixed 64-bit value."""
    h = 0x243F6A8885A308D3
    for w in words:
        h = _splitmix64(h ^ (w & _MASK64))
    return h


def derive_stream_root(experiment_seed: int, tag: str) -> int:
    """Derive an independent 64-bit seed root for a named sub-stream.

    Used to keep training, evaluation, and parameter-initialization
    randomness disjoint while all flowing from one experiment seed.
    """
    return _mix(experiment_seed, int.from_bytes(tag.encode(), "little"))


@dataclass(frozen=True)
class SeedSpec:
    """Address of one independent random stream.

    Distinct field tuples give statistically independent streams; equal
    tuples always reproduce the same variates bit for bit.
    """

    experiment_seed: int
    iteration: int = 0
    level: int = 0
    sample_index: int = 0

    def __post_init__(self):
        if self.iteration < 0 or self.level < 0 or self.sample_index < 0:
            raise ValueError(
                f"SeedSpec indices must be nonnegative, got {self}"
            )

    def _key_stream(self) -> tuple[int, int]:
        """64-bit Philox key and 64-bit stream id for this address."""
        key = _mix(self.experiment_seed, self.iteration, self.level,
                   self.sample_index)
        stream = _splitmix64(key ^ 0x5851F42D4C957F2D)
        return key, stream


def _philox_uniforms(keys: np.ndarray, streams: np.ndarray,
                     counters: np.ndarray) -> np.ndarray:
    """Vectorized Philox4x32-10 -> uniforms in the open interval (0, 1).

    keys, streams: uint64 arrays broadcastable against counters (uint64).
    One counter value yields one variate.
    """
    keys, streams, counters = np.broadcast_arrays(
        np.asarray(keys, dtype=np.uint64),
        np.asarray(streams, dtype=np.uint64),
        np.asarray(counters, dtype=np.uint64),
    )
    shape = counters.shape
    # 0-d arrays degrade to numpy scalars under arithmetic, which warn on
    # the intentional wraparound below; keep everything >= 1-d.
    keys = np.atleast_1d(keys)
    streams = np.atleast_1d(streams)
    counters = np.atleast_1d(counters)
    c0 = (counters & np.uint64(_MASK32)).astype(np.uint32)
    c1 = (counters >> np.uint64(32)).astype(np.uint32)
    c2 = (streams & np.uint64(_MASK32)).astype(np.uint32)
    c3 = (streams >> np.uint64(32)).astype(np.uint32)
    k0 = (keys & np.uint64(_MASK32)).astype(np.uint32)
    k1 = (keys >> np.uint64(32)).astype(np.uint32)

    for r in range(10):
        p0 = c0.astype(np.uint64) * _PHILOX_M0
        p1 = c2.astype(np.uint64) * _PHILOX_M1
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo0 = (p0 & np.uint64(_MASK32)).astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        lo1 = (p1 & np.uint64(_MASK32)).astype(np.uint32)
        rk0 = np.uint32((_PHILOX_W0 * r) & _MASK32)
        rk1 = np.uint32((_PHILOX_W1 * r) & _MASK32)
        c0, c1, c2, c3 = (hi1 ^ c1 ^ (k0 + rk0), lo1,
                          hi0 ^ c3 ^ (k1 + rk1), lo0)

    # 53-bit uniform, offset half a spacing so 0 and 1 are unreachable.
    bits = c0.astype(np.uint64) | (c1.astype(np.uint64) << np.uint64(32))
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return u.reshape(shape)


def gaussian_from_counter(seed: SeedSpec, k: int) -> float:
    """The k-th standard normal of the stream addressed by `seed`.

    Pure function of (seed, k); repeated calls are bit-identical.  The
    variate is the inverse normal CDF of the k-th uniform.
    """
    if k < 0:
        raise ValueError(f"variate index must be nonnegative, got {k}")
    key, stream = seed._key_stream()
    return float(ndtri(_philox_uniforms(key, stream, np.uint64(k))))


def gaussian_block(seed: SeedSpec, n: int, start: int = 0) -> np.ndarray:
    """Variates start..start+n-1 of the stream, as one vectorized draw."""
    key, stream = seed._key_stream()
    counters = np.arange(start, start + n, dtype=np.uint64)
    return ndtri(_philox_uniforms(key, stream, counters))


def gaussian_matrix(seeds: list[SeedSpec], n: int) -> np.ndarray:
    """Row i holds the first n variates of seeds[i]; shape (len(seeds), n)."""
    pairs = [s._key_stream() for s in seeds]
    keys = np.array([p[0] for p in pairs], dtype=np.uint64)[:, None]
    streams = np.array([p[1] for p in pairs], dtype=np.uint64)[:, None]
    counters = np.arange(n, dtype=np.uint64)[None, :]
    return ndtri(_philox_uniforms(keys, streams, counters))


def uniform_block(seed: SeedSpec, n: int, start: int = 0) -> np.ndarray:
    """Uniform (0, 1) variates start..start+n-1 of the stream."""
    key, stream = seed._key_stream()
    counters = np.arange(start, start + n, dtype=np.uint64)
    return _philox_uniforms(key, stream, counters)


@dataclass(frozen=True)
class CoupledIncrements:
    """One Brownian path at a level plus its pairwise-summed coarse version.

    fine has 2^level entries ~ N(0, 2^-level); coarse[k] = fine[2k] +
    fine[2k+1] and is empty at level 0.
    """

    level: int
    fine: np.ndarray
    coarse: np.ndarray
    horizon: float = HORIZON


def coarsen(increments: np.ndarray) -> np.ndarray:
    """Pairwise-sum increments down to the next-coarser level."""
    inc = np.asarray(increments)
    if inc.shape[-1] % 2 != 0:
        raise ValueError(
            f"cannot coarsen an odd number of increments ({inc.shape[-1]})"
        )
    return inc[..., 0::2] + inc[..., 1::2]


def _check_level(level: int) -> None:
    if not 0 <= level <= LEVEL_CAP:
        raise ValueError(f"level must be in [0, {LEVEL_CAP}], got {level}")


def sample_increments(seed: SeedSpec, level: int) -> CoupledIncrements:
    """Draw the level-`level` increments of the path addressed by `seed`.

    Deterministic in `seed`; the coarse sequence is derived from the fine
    one by exact pairwise summation, never sampled separately.
    """
    _check_level(level)
    n = 1 << level
    fine = gaussian_block(seed, n) * np.sqrt(HORIZON / n)
    coarse = coarsen(fine) if level >= 1 else np.empty(0)
    return CoupledIncrements(level=level, fine=fine, coarse=coarse)


def increment_matrix(seeds: list[SeedSpec], level: int) -> np.ndarray:
    """Fine increments for a batch of seeds; shape (len(seeds), 2^level)."""
    _check_level(level)
    n = 1 << level
    return gaussian_matrix(seeds, n) * np.sqrt(HORIZON / n)
