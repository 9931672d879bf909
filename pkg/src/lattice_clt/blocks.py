"""Bernshtein big/small-block partitions and dependence diagnostics.

A plan splits each window axis into k_n = floor((2N+1)/(p+q)) intervals
[-N + j(p+q), -N + j(p+q) + p] for j = 0..k_n-1; their d-fold products are
the big blocks, pairwise at max-norm distance >= q, and the rest of the
window is the small-block complement whose partial-sum variance must be
negligible.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .fields import CovarianceModel, FieldSpec, sample_at_points, truncate, truncation_mean
from .geometry import Explicit, IndexSet, Window
from .sums import second_moment_identity


class BlockPlanError(ValueError):
    """Rates are incompatible with the window."""


@dataclass(frozen=True)
class BlockPlan:
    window: Window
    p: int
    q: int
    k_n: int

    @property
    def axis_starts(self) -> tuple[int, ...]:
        N, pq = self.window.N, self.p + self.q
        return tuple(-N + j * pq for j in range(self.k_n))

    @property
    def n_blocks(self) -> int:
        return self.k_n ** self.window.d

    @property
    def block_card(self) -> int:
        return (self.p + 1) ** self.window.d

    @property
    def card_delta(self) -> int:
        return self.n_blocks * self.block_card

    @property
    def complement_count(self) -> int:
        return self.window.size - self.card_delta

    def corners(self) -> np.ndarray:
        starts = np.asarray(self.axis_starts, dtype=np.int64)
        mesh = np.meshgrid(*([starts] * self.window.d), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.window.d)

    def block_points(self, index: int) -> np.ndarray:
        corner = self.corners()[index]
        axes = [np.arange(c, c + self.p + 1, dtype=np.int64) for c in corner]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.window.d)

    def block_index(self, points: np.ndarray) -> np.ndarray:
        """Block id per point (C order over axis intervals), -1 outside Delta."""
        pq = self.p + self.q
        t = points + self.window.N
        j = t // pq
        inside = (j < self.k_n) & (t - j * pq <= self.p)
        ok = inside.all(axis=1)
        ids = np.zeros(len(points), dtype=np.int64)
        for axis in range(self.window.d):
            ids = ids * self.k_n + j[:, axis]
        ids[~ok] = -1
        return ids

    def delta_mask(self, points: np.ndarray) -> np.ndarray:
        return self.block_index(points) >= 0

    def to_json(self) -> dict:
        return {
            "d": self.window.d, "N": self.window.N, "p": self.p, "q": self.q,
            "k_n": self.k_n, "block_side": self.p + 1,
            "axis_starts": list(self.axis_starts),
            "block_corners": [list(map(int, c)) for c in self.corners()],
            "card_delta": self.card_delta,
            "complement_count": self.complement_count,
        }


def build_blocks(window: Window, p: int, q: int) -> BlockPlan:
    if p < 1 or q < 1:
        raise BlockPlanError("block rates p, q must be >= 1")
    if p + q > window.side:
        raise BlockPlanError(f"p+q = {p+q} exceeds window side {window.side}")
    k_n = window.side // (p + q)
    return BlockPlan(window=window, p=p, q=q, k_n=k_n)


def _int_root(n: int, k: int) -> int:
    """Largest integer x with x^k <= n (exact, no float drift)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    x = int(round(n ** (1.0 / k)))
    while x > 0 and x ** k > n:
        x -= 1
    while (x + 1) ** k <= n:
        x += 1
    return x


def default_rates(N: int) -> tuple[int, int]:
    """p = floor(N^(2/3)), q = max(1, floor(N^(1/3))).

    Divergent rates with q/p -> 0 and p/N -> 0, so the complement variance
    fraction and the block-count times any finite-range dependence both
    vanish along N.
    """
    if N < 8:
        raise ValueError("default rates need N >= 8")
    return _int_root(N * N, 3), max(1, _int_root(N, 3))


# ---------------------------------------------------------------------------
# remainder variance (small-block contribution)


@dataclass
class RemainderReport:
    exact: float
    exact_fraction: Fraction
    bound_exact_form: float
    bound_paper_form: float
    complement_card_in_A: int
    plan: BlockPlan

    @property
    def ratio(self) -> float:
        return self.exact / self.bound_exact_form if self.bound_exact_form else 0.0


def remainder_variance(cov: CovarianceModel, spec: IndexSet, plan: BlockPlan) -> RemainderReport:
    """Exact E{S_N(A ∩ Delta^C)^2} against the block-count bound.

    The bound uses the exact cardinality form
        C * (1 - k_n^d (p+1)^d / (2N+1)^d),  C = sum |r(k)|,
    and the looser asymptotic form C * (1 - ((p+1)/(p+q))^d) is reported
    alongside.  The comparison with the exact value is done in rational
    arithmetic, so equality cases (iid full-lattice) are honored.
    """
    window = plan.window
    pts = spec.restrict(window)
    complement = pts[~plan.delta_mask(pts)]
    comp_spec = Explicit(tuple(tuple(map(int, row)) for row in complement))
    ident = second_moment_identity(cov, comp_spec, window)

    C_exact = sum((abs(Fraction(v)) for v in cov.values.values()), Fraction(0))
    bound_exact = C_exact * (1 - Fraction(plan.card_delta, window.size))
    ratio = (plan.p + 1) / (plan.p + plan.q)
    bound_paper = float(C_exact) * (1.0 - ratio ** window.d)
    if ident.rhs_exact > bound_exact:
        raise AssertionError(
            f"remainder variance {float(ident.rhs_exact)} exceeds bound {float(bound_exact)}"
        )
    return RemainderReport(exact=float(ident.rhs_exact), exact_fraction=ident.rhs_exact,
                           bound_exact_form=float(bound_exact), bound_paper_form=bound_paper,
                           complement_card_in_A=len(complement), plan=plan)


# ---------------------------------------------------------------------------
# characteristic-function dependence gap


@dataclass
class DependenceGap:
    distance: int
    J: float
    t_grid: list[float]
    gaps: list[float]
    stderrs: list[float]
    R: int

    @property
    def sup_gap(self) -> float:
        return max(self.gaps)

    @property
    def sup_t(self) -> float:
        return self.t_grid[int(np.argmax(self.gaps))]

    def within_noise(self, sigmas: float = 4.0) -> bool:
        return all(g <= sigmas * s for g, s in zip(self.gaps, self.stderrs))

    def detected_at(self, sigmas: float = 4.0) -> bool:
        return any(g > sigmas * s and s > 0 for g, s in zip(self.gaps, self.stderrs))


def set_distance(ptsA: np.ndarray, ptsB: np.ndarray) -> int:
    """Min over pairs of the max-norm distance (exact, chunked)."""
    if len(ptsA) == 0 or len(ptsB) == 0:
        raise ValueError("distance of an empty restricted set is undefined")
    best = None
    step = max(1, (1 << 22) // max(len(ptsB), 1))
    for lo in range(0, len(ptsA), step):
        chunk = ptsA[lo:lo + step]
        dist = np.abs(chunk[:, None, :] - ptsB[None, :, :]).max(axis=2).min()
        best = dist if best is None else min(best, dist)
    return int(best)


def dependence_gap(field_spec: FieldSpec, specA: IndexSet, specB: IndexSet,
                   window: Window, *, J: float, t_grid: Sequence[float],
                   R: int, seed: int, row: int | None = None) -> DependenceGap:
    """Monte Carlo |E e^{itS(A∪B)} - E e^{itS(A)} E e^{itS(B)}| per t.

    The three characteristic functions share common random numbers (each
    replication samples the truncated field once on A_N ∪ B_N), which keeps
    the variance of the near-cancelling difference small.  The reported
    standard error is the influence-function (delta method) one.
    """
    if row is None:
        row = window.N
    ptsA = specA.restrict(window)
    ptsB = specB.restrict(window)
    if len(ptsA) and len(ptsB):
        keysA = {tuple(map(int, r)) for r in ptsA}
        if any(tuple(map(int, r)) in keysA for r in ptsB):
            raise ValueError("restricted sets must be disjoint")
    distance = set_distance(ptsA, ptsB)

    points = np.concatenate([ptsA, ptsB], axis=0)
    nA = len(ptsA)
    norm = math.sqrt(window.size)
    ts = [float(t) for t in t_grid]
    nt = len(ts)

    sum_eU = np.zeros(nt, dtype=np.complex128)
    sum_eA = np.zeros(nt, dtype=np.complex128)
    sum_eB = np.zeros(nt, dtype=np.complex128)
    sum_UAc = np.zeros(nt, dtype=np.complex128)  # eU * conj(eA)
    sum_UBc = np.zeros(nt, dtype=np.complex128)  # eU * conj(eB)
    sum_ABc = np.zeros(nt, dtype=np.complex128)  # eA * conj(eB)

    for lo, hi in _rep_chunks(R, len(points)):
        reps = np.arange(lo, hi, dtype=np.uint64)
        vals = sample_at_points(field_spec, points, row=row, seed=seed,
                                replications=reps)
        vals = truncate(vals, field_spec, row, J)
        SA = vals[:, :nA].sum(axis=1) / norm
        SB = vals[:, nA:].sum(axis=1) / norm
        SU = SA + SB
        for i, t in enumerate(ts):
            eU = np.exp(1j * t * SU)
            eA = np.exp(1j * t * SA)
            eB = np.exp(1j * t * SB)
            sum_eU[i] += eU.sum()
            sum_eA[i] += eA.sum()
            sum_eB[i] += eB.sum()
            sum_UAc[i] += (eU * np.conj(eA)).sum()
            sum_UBc[i] += (eU * np.conj(eB)).sum()
            sum_ABc[i] += (eA * np.conj(eB)).sum()

    gaps, ses = [], []
    for i in range(nt):
        mU, mA, mB = sum_eU[i] / R, sum_eA[i] / R, sum_eB[i] / R
        D = mU - mA * mB
        # w = eU - mB*eA - mA*eB; E|w|^2 from accumulated pair products
        e_w2 = (1.0 + abs(mB) ** 2 + abs(mA) ** 2
                - 2.0 * (np.conj(mB) * sum_UAc[i] / R).real
                - 2.0 * (np.conj(mA) * sum_UBc[i] / R).real
                + 2.0 * (np.conj(mB) * mA * np.conj(sum_ABc[i] / R)).real)
        e_w = mU - 2.0 * mA * mB
        var = max(e_w2 - abs(e_w) ** 2, 0.0)
        gaps.append(abs(D))
        ses.append(math.sqrt(var / R))
    return DependenceGap(distance=distance, J=J, t_grid=ts, gaps=gaps,
                         stderrs=ses, R=R)


def _rep_chunks(R: int, width: int, budget: int = 1 << 22):
    step = max(1, budget // max(width, 1))
    lo = 0
    while lo < R:
        hi = min(lo + step, R)
        yield lo, hi
        lo = hi


def dependence_profile_to_csv(entries: Iterable[DependenceGap], path) -> None:
    """Columns distance, t, gap, stderr."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["distance", "t", "gap", "stderr"])
        for entry in entries:
            for t, g, s in zip(entry.t_grid, entry.gaps, entry.stderrs):
                writer.writerow([entry.distance, repr(t), repr(g), repr(s)])


# ---------------------------------------------------------------------------
# telescoping product bound (exact finite joint laws)


Rational = Fraction
RC = tuple[Fraction, Fraction]  # exact complex number (re, im)


def _rc(value) -> RC:
    if isinstance(value, tuple):
        return (Fraction(value[0]), Fraction(value[1]))
    if isinstance(value, complex):
        return (Fraction(value.real), Fraction(value.imag))
    return (Fraction(value), Fraction(0))


def _rc_mul(a: RC, b: RC) -> RC:
    return (a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0])


def _rc_sub(a: RC, b: RC) -> RC:
    return (a[0] - b[0], a[1] - b[1])


def _rc_add(a: RC, b: RC) -> RC:
    return (a[0] + b[0], a[1] + b[1])


def _rc_scale(a: RC, s: Fraction) -> RC:
    return (a[0] * s, a[1] * s)


def _rc_abs2(a: RC) -> Fraction:
    return a[0] * a[0] + a[1] * a[1]


_RC_ZERO = (Fraction(0), Fraction(0))
_RC_ONE = (Fraction(1), Fraction(0))


class FiniteJointLaw:
    """Exact joint law of complex variables Z_1..Z_n with |Z_i| <= 1.

    Atoms are (probability, values) pairs; probabilities and the real and
    imaginary parts of the values are kept as exact rationals, so all
    expectations below are computed without rounding.
    """

    def __init__(self, atoms: Sequence[tuple] ):
        if not atoms:
            raise ValueError("joint law needs at least one atom")
        parsed = []
        n = None
        for prob, values in atoms:
            p = Fraction(prob)
            if p < 0:
                raise ValueError("probabilities must be >= 0")
            zs = tuple(_rc(z) for z in values)
            if n is None:
                n = len(zs)
            elif len(zs) != n:
                raise ValueError("atoms must share the variable count")
            for z in zs:
                if _rc_abs2(z) > 1:
                    raise ValueError(f"|Z_i| > 1 in support: {z}")
            parsed.append((p, zs))
        total = sum(p for p, _ in parsed)
        if total != 1:
            raise ValueError(f"probabilities must sum to 1 exactly, got {total}")
        self.atoms = parsed
        self.n = n

    @classmethod
    def independent(cls, marginals: Sequence[Sequence[tuple]]) -> "FiniteJointLaw":
        """Product law from per-variable (prob, value) lists."""
        atoms = [(Fraction(1), ())]
        for marg in marginals:
            atoms = [(p * Fraction(q), zs + (z,))
                     for p, zs in atoms for q, z in marg]
        return cls(atoms)

    def suffix_expectations(self) -> list[RC]:
        """E prod_{i >= j} Z_i for j = 1..n (1-indexed list)."""
        out = [_RC_ZERO] * self.n
        for p, zs in self.atoms:
            suffix = _RC_ONE
            prods = [None] * self.n
            for j in range(self.n - 1, -1, -1):
                suffix = _rc_mul(zs[j], suffix)
                prods[j] = suffix
            for j in range(self.n):
                out[j] = _rc_add(out[j], _rc_scale(prods[j], p))
        return out

    def marginal_expectations(self) -> list[RC]:
        out = [_RC_ZERO] * self.n
        for p, zs in self.atoms:
            for j in range(self.n):
                out[j] = _rc_add(out[j], _rc_scale(zs[j], p))
        return out


@dataclass
class TelescopingResult:
    lhs: float
    rhs: float
    terms: list[float]


def telescoping_check(law: FiniteJointLaw) -> TelescopingResult:
    """|E prod Z_i - prod E Z_i| against the telescoped sum of factor gaps.

    All expectations are exact rationals; the only rounding is the final
    square root per modulus, so independence gives literal zeros and the
    n = 2 case returns bit-identical sides.  Raises if lhs > rhs.
    """
    suffix = law.suffix_expectations()
    marginals = law.marginal_expectations()

    prod_marg = _RC_ONE
    for m in marginals:
        prod_marg = _rc_mul(prod_marg, m)
    lhs = math.sqrt(float(_rc_abs2(_rc_sub(suffix[0], prod_marg))))

    terms = []
    for j in range(law.n - 1):
        tail = suffix[j + 1]
        w = _rc_sub(suffix[j], _rc_mul(marginals[j], tail))
        terms.append(math.sqrt(float(_rc_abs2(w))))
    rhs = math.fsum(terms)
    if lhs > rhs:
        raise AssertionError(f"telescoping bound violated: {lhs} > {rhs}")
    return TelescopingResult(lhs=lhs, rhs=rhs, terms=terms)


# ---------------------------------------------------------------------------
# Lyapunov fourth-moment diagnostic


def lyapunov_rate(plan: BlockPlan) -> Fraction:
    """((p+1)^2 / ((p+q)(2N+1)))^d, the block fourth-moment rate."""
    d = plan.window.d
    num = (plan.p + 1) ** (2 * d)
    den = ((plan.p + plan.q) * plan.window.side) ** d
    return Fraction(num, den)


@dataclass
class LyapunovDiagnostic:
    total: float
    stderr: float
    rate: float
    n_blocks: int


def lyapunov_sum(field_spec: FieldSpec, set_spec: IndexSet, plan: BlockPlan, *,
                 J: float, R: int, seed: int, row: int | None = None) -> LyapunovDiagnostic:
    """Monte Carlo sum over blocks of E{S_N(A ∩ Delta(l), X^J)^4}."""
    window = plan.window
    if row is None:
        row = window.N
    pts = set_spec.restrict(window)
    ids = plan.block_index(pts)
    pts = pts[ids >= 0]
    ids = ids[ids >= 0]
    order = np.argsort(ids, kind="stable")
    pts, ids = pts[order], ids[order]
    norm = math.sqrt(window.size)

    if len(pts) == 0:
        return LyapunovDiagnostic(0.0, 0.0, float(lyapunov_rate(plan)), plan.n_blocks)

    boundaries = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], boundaries])
    total = 0.0
    total_sq = 0.0
    done = 0
    for lo, hi in _rep_chunks(R, len(pts)):
        reps = np.arange(lo, hi, dtype=np.uint64)
        vals = sample_at_points(field_spec, pts, row=row, seed=seed, replications=reps)
        vals = truncate(vals, field_spec, row, J)
        S = np.add.reduceat(vals, starts, axis=1) / norm
        T = (S ** 4).sum(axis=1)
        total += float(T.sum())
        total_sq += float((T * T).sum())
        done += len(reps)
    mean = total / done
    var = max(total_sq / done - mean * mean, 0.0)
    return LyapunovDiagnostic(total=mean, stderr=math.sqrt(var / done),
                              rate=float(lyapunov_rate(plan)), n_blocks=plan.n_blocks)
