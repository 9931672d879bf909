"""Normalized partial sums over restricted index sets and their second moment.

The second-moment identity E{S_N(A,X)^2} = sum_k r(k) H_N(k;A) is checked
by computing both sides through unrelated code paths: the left side walks
the points of A_N and tests membership of each covariance-support neighbor
(the direct double sum with zero terms skipped), the right side weighs the
correlogram module's exact rational counts.  Comparisons against closed
bounds are done in exact rational arithmetic so that equality cases hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .fields import CovarianceModel
from .geometry import IndexSet, Window, correlogram, encode_points


@dataclass
class SumValue:
    value: float
    window: Window
    set_spec: IndexSet
    card: int


def partial_sum(values: np.ndarray, spec: IndexSet, window: Window) -> SumValue:
    """(2N+1)^(-d/2) * sum of the grid values over A_N.

    The grid must cover the window, shape (2N+1,)*d.  Points are visited in
    lexicographic order and accumulated with math.fsum, so the result does
    not depend on evaluation order at all.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (window.side,) * window.d:
        raise ValueError(
            f"grid shape {values.shape} does not cover the window "
            f"(expected {(window.side,) * window.d})"
        )
    pts = spec.restrict(window)
    flat = values.reshape(-1)
    if len(pts):
        idx = np.zeros(len(pts), dtype=np.int64)
        for j in range(window.d):
            idx = idx * window.side + (pts[:, j] + window.N)
        total = math.fsum(flat[idx].tolist())
    else:
        total = 0.0
    norm = math.sqrt(window.size)
    return SumValue(value=total / norm, window=window, set_spec=spec, card=len(pts))


@dataclass
class MomentIdentity:
    lhs: float
    rhs: float
    lhs_exact: Fraction
    rhs_exact: Fraction
    abs_diff: float
    rel_diff: float


def second_moment_identity(cov: CovarianceModel, spec: IndexSet,
                           window: Window) -> MomentIdentity:
    """Both sides of E{S_N^2}: direct double sum vs correlogram-weighted sum."""
    if cov.d != window.d:
        raise ValueError(f"covariance dimension {cov.d} != window dimension {window.d}")
    pts = spec.restrict(window)
    size = window.size

    # left side: for each point of A_N and each support lag, test whether the
    # shifted point is also in A_N; this enumerates every non-zero pair term
    offset = window.N + cov.support_range + 1
    base = 2 * offset + 1
    keys = np.sort(encode_points(pts, base, offset))
    terms = []
    lhs_exact = Fraction(0)
    for lag in cov.lags:
        r = cov.values[lag]
        shifted = pts + np.asarray(lag, dtype=np.int64)
        hits = int(np.isin(encode_points(shifted, base, offset), keys,
                           assume_unique=True).sum())
        terms.append(hits * r)
        lhs_exact += Fraction(hits) * Fraction(r)
    lhs = math.fsum(terms) / size
    lhs_exact /= size

    corr = correlogram(spec, window, cov.lags)
    rhs_exact = Fraction(0)
    for lag in cov.lags:
        rhs_exact += Fraction(cov.values[lag]) * corr.value(lag)
    rhs = float(rhs_exact)

    abs_diff = abs(lhs - rhs)
    scale = max(abs(lhs), abs(rhs))
    rel = abs_diff / scale if scale > 0 else 0.0
    return MomentIdentity(lhs=lhs, rhs=rhs, lhs_exact=lhs_exact,
                          rhs_exact=rhs_exact, abs_diff=abs_diff, rel_diff=rel)


@dataclass
class VarianceBound:
    bound: float
    bound_exact: Fraction
    lhs: float
    card: int
    total_abs_cov: float


def variance_bound(cov: CovarianceModel, spec: IndexSet, window: Window) -> VarianceBound:
    """C * card(A_N)/(2N+1)^d with C = sum |r(k)|; checks it dominates E{S_N^2}."""
    ident = second_moment_identity(cov, spec, window)
    card = len(spec.restrict(window))
    C_exact = sum((abs(Fraction(v)) for v in cov.values.values()), Fraction(0))
    bound_exact = C_exact * Fraction(card, window.size)
    if ident.lhs_exact > bound_exact:
        raise AssertionError(
            f"second moment {float(ident.lhs_exact)} exceeds bound {float(bound_exact)}"
        )
    return VarianceBound(bound=float(bound_exact), bound_exact=bound_exact,
                         lhs=ident.lhs, card=card, total_abs_cov=float(C_exact))
