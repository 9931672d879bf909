"""Counter-based random numbers keyed by (seed, stream, replication, draw, site).

Every variate produced by this package is a pure function of five integer
keys: the user seed, a stream tag that separates logical substreams (field
innovations, set membership, centering oracles, ...), a replication index,
a draw index, and the lattice coordinates of the site the variate belongs
to.  The key words are absorbed one at a time into a 64-bit state with the
splitmix64 finalizer, constants

    0x9E3779B97F4A7C15  (golden-ratio increment)
    0xBF58476D1CE4E5B9, 0x94D049BB133111EB  (mixing multipliers)

so any single value can be recomputed in isolation.  Samplers may therefore
vectorize over sites and replications, or split work across threads, and
still produce bit-identical grids.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64 = np.uint64
_GOLDEN_A = _U64(GOLDEN)
_MIX1_A = _U64(_MIX1)
_MIX2_A = _U64(_MIX2)

# 2^-53, step of the uniforms produced by uniform01
UNIFORM_STEP = 2.0 ** -53


def mix64(x: int) -> int:
    """splitmix64 finalizer on a Python int (mod 2^64)."""
    z = x & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def absorb(h: int, w: int) -> int:
    """Fold one key word into the state (scalar path)."""
    return mix64(h ^ ((w + GOLDEN) & _MASK))


def derive_stream(stream: int, child: int) -> int:
    """Stream tag for a child substream (xi/y components, oracles, ...)."""
    return absorb(stream & _MASK, child)


def _finalize_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1_A
    z = (z ^ (z >> _U64(27))) * _MIX2_A
    return z ^ (z >> _U64(31))


def _absorb_arr(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _finalize_arr(h ^ (w + _GOLDEN_A))


def site_hashes(
    seed: int,
    stream: int,
    replications: np.ndarray | int,
    draw: int,
    points: np.ndarray,
) -> np.ndarray:
    """64-bit hashes for each (replication, site) pair.

    points: integer array of shape (n, d); coordinates may be negative
    (absorbed through their two's-complement 64-bit image).
    replications: scalar or shape (R,). Output shape is (R, n) for an array
    of replications and (n,) for a scalar.
    """
    points = np.ascontiguousarray(points, dtype=np.int64)
    if points.ndim != 2:
        raise ValueError("points must have shape (n, d)")
    scalar_rep = np.isscalar(replications)
    reps = np.atleast_1d(np.asarray(replications, dtype=np.uint64))

    h0 = absorb(absorb(mix64(seed & _MASK), stream & _MASK), draw & _MASK)
    with np.errstate(over="ignore"):
        h = _absorb_arr(np.full(reps.shape, h0, dtype=np.uint64), reps)
        h = h[:, None]
        coords = points.view(np.uint64)
        for axis in range(points.shape[1]):
            h = _absorb_arr(h, coords[None, :, axis])
    return h[0] if scalar_rep else h


def uniform01(hashes: np.ndarray) -> np.ndarray:
    """Map hashes to uniforms in the open interval (0, 1).

    Uses the top 53 bits plus a half-step offset, so the output is symmetric
    about 1/2 (exactly balanced sign draws for centered marginals).
    """
    return ((hashes >> _U64(11)).astype(np.float64) + 0.5) * UNIFORM_STEP


def site_uniforms(
    seed: int,
    stream: int,
    replications: np.ndarray | int,
    draw: int,
    points: np.ndarray,
) -> np.ndarray:
    """Uniforms in (0,1), one per (replication, site)."""
    return uniform01(site_hashes(seed, stream, replications, draw, points))
