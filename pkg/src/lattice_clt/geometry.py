"""Subsets of Z^d, window restriction, and exact set correlograms.

A set correlogram records, for each lag k, the fraction of the centered
window [-N, N]^d occupied by A_N ∩ (k + A_N), where A_N is the set
restricted to the window.  Counting is exact (hash-set intersection over
integer-encoded points) and values are kept as (numerator, denominator)
pairs, so identities such as the k ↔ -k symmetry hold bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import rng

# stream tag for Bernoulli set membership (arbitrary fixed constant)
_BERNOULLI_STREAM = 0x5E7B

Lag = tuple[int, ...]


class DimensionMismatchError(ValueError):
    """Set spec and window disagree on the lattice dimension."""


@dataclass(frozen=True)
class Window:
    """Centered cube [-N, N]^d of lattice points."""

    d: int
    N: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("window dimension must be >= 1")
        if self.N < 0:
            raise ValueError("window half-width must be >= 0")

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    @property
    def size(self) -> int:
        return self.side ** self.d

    def grid_points(self) -> np.ndarray:
        """All window points, shape (size, d), lexicographic order."""
        axes = [np.arange(-self.N, self.N + 1, dtype=np.int64)] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.d)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return (np.abs(points) <= self.N).all(axis=1)


def _as_points(points, d: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d in (1, None) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError("points must be a (n, d) integer array")
    return arr


def _lex_sort(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return points
    order = np.lexsort(tuple(points[:, j] for j in reversed(range(points.shape[1]))))
    return points[order]


def encode_points(points: np.ndarray, base: int, offset: int) -> np.ndarray:
    """Pack integer coordinates into one int64 key per point.

    Caller guarantees every coordinate + offset lies in [0, base); with
    d <= 3 and desk-scale windows the packed keys stay far below 2^63.
    """
    keys = np.zeros(len(points), dtype=np.int64)
    for j in range(points.shape[1]):
        keys = keys * base + (points[:, j] + offset)
    return keys


# ---------------------------------------------------------------------------
# index set specs


class IndexSet:
    """Declarative description of a subset of Z^d."""

    variant: str = ""

    def dim(self) -> int | None:
        """Intrinsic dimension, or None when the spec fits any d."""
        return None

    def check_window(self, window: Window) -> None:
        d = self.dim()
        if d is not None and d != window.d:
            raise DimensionMismatchError(
                f"{self.variant} spec has dimension {d}, window has {window.d}"
            )

    def contains(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def restrict(self, window: Window) -> np.ndarray:
        """Members inside the window, lexicographic order, shape (n, d)."""
        self.check_window(window)
        grid = window.grid_points()
        return grid[self.contains(grid)]

    def to_json(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_json(obj: dict) -> "IndexSet":
        try:
            variant = obj["variant"]
        except (TypeError, KeyError):
            raise ValueError("index set JSON must carry a 'variant' tag")
        try:
            cls = _VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown index set variant {variant!r}")
        return cls._from_json(obj)


@dataclass(frozen=True)
class FullLattice(IndexSet):
    variant = "full"

    def contains(self, points):
        return np.ones(len(points), dtype=bool)

    def restrict(self, window):
        self.check_window(window)
        return window.grid_points()

    def to_json(self):
        return {"variant": "full"}

    @classmethod
    def _from_json(cls, obj):
        return cls()


@dataclass(frozen=True)
class Periodic(IndexSet):
    """Points whose residue vector modulo `moduli` lies in `residues`."""

    moduli: tuple[int, ...]
    residues: tuple[tuple[int, ...], ...]
    variant = "periodic"

    def __post_init__(self):
        if not self.moduli or any(m < 1 for m in self.moduli):
            raise ValueError("moduli must be positive integers")
        reduced = {tuple(r[j] % self.moduli[j] for j in range(len(self.moduli)))
                   for r in self.residues}
        if not reduced:
            raise ValueError("residue set must be non-empty")
        object.__setattr__(self, "moduli", tuple(int(m) for m in self.moduli))
        object.__setattr__(self, "residues", tuple(sorted(reduced)))

    def dim(self):
        return len(self.moduli)

    def contains(self, points):
        mods = np.asarray(self.moduli, dtype=np.int64)
        res = np.mod(points, mods)
        mask = np.zeros(len(points), dtype=bool)
        for r in self.residues:
            mask |= (res == np.asarray(r, dtype=np.int64)).all(axis=1)
        return mask

    def to_json(self):
        return {"variant": "periodic", "moduli": list(self.moduli),
                "residues": [list(r) for r in self.residues]}

    @classmethod
    def _from_json(cls, obj):
        return cls(tuple(obj["moduli"]), tuple(tuple(r) for r in obj["residues"]))


@dataclass(frozen=True)
class HalfSpace(IndexSet):
    """Points whose `axis` coordinate is >= `threshold`."""

    axis: int = 0
    threshold: int = 0
    variant = "half_space"

    def __post_init__(self):
        if self.axis < 0:
            raise ValueError("axis must be >= 0")

    def check_window(self, window):
        if self.axis >= window.d:
            raise DimensionMismatchError(
                f"half-space axis {self.axis} out of range for d={window.d}"
            )

    def contains(self, points):
        return points[:, self.axis] >= self.threshold

    def to_json(self):
        return {"variant": "half_space", "axis": self.axis, "threshold": self.threshold}

    @classmethod
    def _from_json(cls, obj):
        return cls(int(obj["axis"]), int(obj["threshold"]))


@dataclass(frozen=True)
class Ball(IndexSet):
    """Max-norm ball ||x||_inf <= radius (a finite set)."""

    radius: float = 0.0
    variant = "ball"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    def contains(self, points):
        return np.abs(points).max(axis=1) <= self.radius

    def to_json(self):
        return {"variant": "ball", "radius": self.radius, "norm": "max"}

    @classmethod
    def _from_json(cls, obj):
        return cls(float(obj["radius"]))


@dataclass(frozen=True)
class BernoulliRandom(IndexSet):
    """Random set: each point kept independently with probability p.

    Membership is a pure function of (seed, point): the point's splitmix64
    hash is mapped to a uniform in (0,1) and compared with p, so realized
    sets are reproducible without storage and consistent across windows.
    """

    p: float
    seed: int
    variant = "bernoulli"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("density p must lie in (0, 1)")

    def contains(self, points):
        u = rng.site_uniforms(self.seed, _BERNOULLI_STREAM, 0, 0, points)
        return u < self.p

    def to_json(self):
        return {"variant": "bernoulli", "p": self.p, "seed": self.seed}

    @classmethod
    def _from_json(cls, obj):
        return cls(float(obj["p"]), int(obj["seed"]))


@dataclass(frozen=True)
class Explicit(IndexSet):
    """Finite explicit point list (points must be distinct)."""

    points: tuple[tuple[int, ...], ...]
    variant = "explicit"

    def __post_init__(self):
        pts = tuple(tuple(int(c) for c in p) for p in self.points)
        if len(set(pts)) != len(pts):
            raise ValueError("explicit point list contains duplicates")
        if pts and any(len(p) != len(pts[0]) for p in pts):
            raise ValueError("explicit points must share one dimension")
        object.__setattr__(self, "points", tuple(sorted(pts)))

    def dim(self):
        return len(self.points[0]) if self.points else None

    def contains(self, points):
        member = set(self.points)
        return np.fromiter(
            (tuple(row) in member for row in points), dtype=bool, count=len(points)
        )

    def restrict(self, window):
        self.check_window(window)
        if not self.points:
            return np.empty((0, window.d), dtype=np.int64)
        arr = np.asarray(self.points, dtype=np.int64)
        return arr[window.contains(arr)]

    def to_json(self):
        return {"variant": "explicit", "points": [list(p) for p in self.points]}

    @classmethod
    def _from_json(cls, obj):
        return cls(tuple(tuple(p) for p in obj["points"]))


_VARIANTS = {
    "full": FullLattice,
    "periodic": Periodic,
    "half_space": HalfSpace,
    "ball": Ball,
    "bernoulli": BernoulliRandom,
    "explicit": Explicit,
}


def evens(d: int = 1) -> Periodic:
    """Periodic set of points with all coordinates even."""
    return Periodic(moduli=(2,) * d, residues=((0,) * d,))


def half_line() -> HalfSpace:
    return HalfSpace(axis=0, threshold=0)


def restrict(spec: IndexSet, window: Window) -> np.ndarray:
    """Members of the set inside the window, lexicographic order."""
    return spec.restrict(window)


# ---------------------------------------------------------------------------
# correlograms


@dataclass
class Correlogram:
    """Exact occupation fractions card{A_N ∩ (k + B_N)} / (2N+1)^d."""

    window: Window
    kind: str  # "auto" | "cross"
    lags: list[Lag]
    counts: dict[Lag, int]

    @property
    def denominator(self) -> int:
        return self.window.size

    def value(self, lag) -> Fraction:
        return Fraction(self.counts[tuple(lag)], self.denominator)

    def values(self) -> dict[Lag, Fraction]:
        return {k: Fraction(c, self.denominator) for k, c in self.counts.items()}

    def floats(self) -> dict[Lag, float]:
        return {k: c / self.denominator for k, c in self.counts.items()}

    def to_csv(self, path) -> None:
        """Columns k_1..k_d, numerator, denominator, value."""
        d = self.window.d
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"k_{j+1}" for j in range(d)]
                            + ["numerator", "denominator", "value"])
            for lag in self.lags:
                c = self.counts[lag]
                writer.writerow(list(lag) + [c, self.denominator, repr(c / self.denominator)])


def _normalize_lags(lags, d: int) -> list[Lag]:
    out = []
    for lag in lags:
        t = (int(lag),) if np.isscalar(lag) else tuple(int(c) for c in lag)
        if len(t) != d:
            raise DimensionMismatchError(f"lag {t} does not have dimension {d}")
        out.append(t)
    return out


def _intersection_counts(ptsA: np.ndarray, ptsB: np.ndarray, window: Window,
                         lags: Sequence[Lag]) -> dict[Lag, int]:
    max_abs = max((max(abs(c) for c in lag) for lag in lags if lag), default=0)
    offset = window.N + max_abs + 1
    base = 2 * offset + 1
    keysA = np.sort(encode_points(ptsA, base, offset))
    counts: dict[Lag, int] = {}
    for lag in lags:
        if len(ptsB) == 0:
            counts[lag] = 0
            continue
        shifted = ptsB + np.asarray(lag, dtype=np.int64)
        keysB = np.sort(encode_points(shifted, base, offset))
        counts[lag] = len(np.intersect1d(keysA, keysB, assume_unique=True))
    return counts


def correlogram(spec: IndexSet, window: Window, lags: Iterable) -> Correlogram:
    """Self correlogram H_N(k; A) by exact counting."""
    lag_list = _normalize_lags(lags, window.d)
    pts = spec.restrict(window)
    counts = _intersection_counts(pts, pts, window, lag_list)
    return Correlogram(window=window, kind="auto", lags=lag_list, counts=counts)


def cross_correlogram(specA: IndexSet, specB: IndexSet, window: Window,
                      lags: Iterable) -> Correlogram:
    """Cross correlogram H_N(k; A, B) = card{A_N ∩ (k + B_N)} / (2N+1)^d."""
    lag_list = _normalize_lags(lags, window.d)
    ptsA = specA.restrict(window)
    ptsB = specB.restrict(window)
    counts = _intersection_counts(ptsA, ptsB, window, lag_list)
    return Correlogram(window=window, kind="cross", lags=lag_list, counts=counts)


# ---------------------------------------------------------------------------
# limits


@dataclass
class LimitProfile:
    """Per-lag limit H(k; A) with provenance (analytic or extrapolated)."""

    d: int
    values: dict[Lag, Fraction | float]
    provenance: dict[Lag, dict]

    def value(self, lag) -> float:
        return float(self.values[tuple(lag)])

    def has(self, lag) -> bool:
        return tuple(lag) in self.values


_ANALYTIC_VARIANTS = (FullLattice, Periodic, HalfSpace)


def _analytic_limit(spec: IndexSet, lag: Lag) -> Fraction:
    if isinstance(spec, FullLattice):
        return Fraction(1)
    if isinstance(spec, HalfSpace):
        return Fraction(1, 2)
    if isinstance(spec, Periodic):
        mods = spec.moduli
        period = 1
        for m in mods:
            period *= m
        count = 0
        for r in spec.residues:
            for rp in spec.residues:
                if all((rp[j] - r[j] - lag[j]) % mods[j] == 0 for j in range(len(mods))):
                    count += 1
        return Fraction(count, period)
    raise ValueError(f"no analytic limit for variant {spec.variant!r}")


def limit_profile(spec: IndexSet, lags: Iterable, *, mode: str = "analytic",
                  N_sequence: Sequence[int] | None = None,
                  d: int | None = None) -> LimitProfile:
    """Limit H(k; A) per lag.

    mode="analytic" supports FullLattice, Periodic and HalfSpace.
    mode="extrapolated" works for any spec and needs a strictly increasing
    N_sequence of length >= 3; it reports H at the largest N together with
    the larger of the last two successive increments as a residual.
    """
    dim = spec.dim() or d
    if dim is None:
        raise ValueError("pass d= for specs without intrinsic dimension")
    lag_list = _normalize_lags(lags, dim)

    if mode == "analytic":
        if not isinstance(spec, _ANALYTIC_VARIANTS):
            raise ValueError(
                f"analytic limit profile unavailable for variant {spec.variant!r}"
            )
        values = {lag: _analytic_limit(spec, lag) for lag in lag_list}
        prov = {lag: {"mode": "analytic"} for lag in lag_list}
        return LimitProfile(d=dim, values=values, provenance=prov)

    if mode != "extrapolated":
        raise ValueError(f"unknown mode {mode!r}")
    _check_N_sequence(N_sequence)
    history = {lag: [] for lag in lag_list}
    for N in N_sequence:
        corr = correlogram(spec, Window(dim, N), lag_list)
        for lag in lag_list:
            history[lag].append(corr.value(lag))
    values: dict[Lag, Fraction | float] = {}
    prov: dict[Lag, dict] = {}
    for lag in lag_list:
        hs = history[lag]
        residual = max(abs(float(hs[-1] - hs[-2])), abs(float(hs[-2] - hs[-3])))
        values[lag] = float(hs[-1])
        prov[lag] = {"mode": "extrapolated", "N_sequence": list(N_sequence),
                     "residual": residual}
    return LimitProfile(d=dim, values=values, provenance=prov)


def _check_N_sequence(N_sequence) -> None:
    if N_sequence is None or len(N_sequence) < 3:
        raise ValueError("N_sequence must contain at least 3 window sizes")
    if any(b <= a for a, b in zip(N_sequence, N_sequence[1:])):
        raise ValueError("N_sequence must be strictly increasing")


def am_diagnostic(spec: IndexSet, lags: Iterable, N_sequence: Sequence[int],
                  *, d: int | None = None) -> dict:
    """Numerical convergence report for H_N(k; A) along an N sequence.

    Reports values, successive absolute differences and flags; it never
    rejects a set (no claim of proof).  A lag whose limit looks like 0 is
    flagged, as is density outside (0, 1) at lag 0.
    """
    dim = spec.dim() or d
    if dim is None:
        raise ValueError("pass d= for specs without intrinsic dimension")
    _check_N_sequence(N_sequence)
    lag_list = _normalize_lags(lags, dim)

    per_lag = []
    density_flag = "ok"
    for lag in lag_list:
        nums, dens, vals = [], [], []
        for N in N_sequence:
            corr = correlogram(spec, Window(dim, N), [lag])
            nums.append(corr.counts[lag])
            dens.append(corr.denominator)
            vals.append(corr.counts[lag] / corr.denominator)
        diffs = [abs(b - a) for a, b in zip(vals, vals[1:])]
        decreasing = all(b <= a for a, b in zip(diffs, diffs[1:]))
        # a saturated numerator means the realized set stopped growing:
        # the density limit is 0 (finite sets, balls, explicit lists)
        zero_limit = vals[-1] == 0.0 or nums[-1] == nums[-2]
        per_lag.append({
            "lag": list(lag),
            "numerators": nums,
            "denominators": dens,
            "H": vals,
            "abs_diffs": diffs,
            "diffs_decreasing": decreasing,
            "suspected_zero_limit": zero_limit,
        })
        if all(c == 0 for c in lag):
            if zero_limit:
                density_flag = "zero"
            elif nums[-1] == dens[-1]:
                density_flag = "full"
    return {
        "set": spec.to_json(),
        "d": dim,
        "N_sequence": list(N_sequence),
        "per_lag": per_lag,
        "density_flag": density_flag,
    }


def index_set_to_json_file(spec: IndexSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(spec.to_json(), fh, indent=2)
        fh.write("\n")


def index_set_from_json_file(path) -> IndexSet:
    with open(path, "r", encoding="utf-8") as fh:
        return IndexSet.from_json(json.load(fh))
