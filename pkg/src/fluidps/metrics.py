"""
Distances between finite measures on the half line and the fitting of
power-law convergence rates.

The Prohorov distance is the extended one, allowing unequal total masses:

    ρ(ζ1, ζ2) = inf{δ > 0 : ζ1(B) ≤ ζ2(B^δ) + δ and ζ2(B) ≤ ζ1(B^δ) + δ for closed B},

with B^δ the open δ-neighbourhood of B intersected with R+.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .config import get_logger
from .exceptions import InsufficientSamplesError, ValidationError
from .measures import Certified, GridMeasure, resample

logger = get_logger(__name__)

MIN_SAMPLES = 5


# --- Prohorov ---
def _max_excess(
    left: np.ndarray,
    right: np.ndarray,
    masses: np.ndarray,
    delta: float,
    closed_cdf: Callable,
    open_cdf: Callable,
) -> float:
    """
    sup over unions B of the pieces [left_j, right_j] of ζ1(B) - ζ2(B^δ).

    Pieces are sorted and their dilations (left - δ, right + δ) are ordered
    on both ends, so the union measure telescopes along the chosen pieces.
    V[j] is the best objective among choices whose last piece is j; the
    predecessor is either disjoint from j (running prefix maximum) or
    overlapping it (sliding-window maximum over a monotone deque).
    """
    lo = left - delta
    hi = right + delta
    g_lo = np.asarray(closed_cdf(lo), dtype=float).tolist()
    g_hi = np.asarray(open_cdf(hi), dtype=float).tolist()
    lo, hi, masses = lo.tolist(), hi.tolist(), masses.tolist()

    n = len(masses)
    values = [0.0] * n
    keys = [0.0] * n
    best = 0.0
    prefix = -math.inf
    disjoint = 0
    window: deque[int] = deque()
    for j in range(n):
        while disjoint < j and hi[disjoint] <= lo[j]:
            prefix = max(prefix, values[disjoint])
            disjoint += 1
        while window and window[0] < disjoint:
            window.popleft()
        start = g_lo[j] + max(0.0, prefix)
        if window:
            start = max(start, keys[window[0]])
        values[j] = masses[j] - g_hi[j] + start
        keys[j] = values[j] + g_hi[j]
        while window and keys[window[-1]] <= keys[j]:
            window.pop()
        window.append(j)
        best = max(best, values[j])
    return best


@dataclass(frozen=True)
class _Pieces:
    """A measure as sorted closed pieces with masses, plus its CDF from both sides."""

    left: np.ndarray
    right: np.ndarray
    masses: np.ndarray
    closed_cdf: Callable
    open_cdf: Callable
    total: float


def _grid_pieces(zeta: GridMeasure) -> _Pieces:
    keep = zeta.cell_masses > 0
    left = zeta.nodes[:-1][keep]
    right = zeta.nodes[1:][keep]
    masses = zeta.cell_masses[keep]
    if zeta.tail_mass > 0:
        left = np.append(left, zeta.x_max)
        right = np.append(right, math.inf)
        masses = np.append(masses, zeta.tail_mass)
    total = zeta.total_mass

    def cdf(x):
        x = np.asarray(x, dtype=float)
        return np.where(np.isposinf(x), total, np.interp(x, zeta.nodes, zeta.cdf, left=0.0, right=zeta.cdf[-1]))

    return _Pieces(left, right, masses, cdf, cdf, total)


def _atom_pieces(points, masses) -> _Pieces:
    points = np.asarray(points, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if points.shape != masses.shape:
        raise ValidationError("Atom positions and masses differ in length.")
    if np.any(points < 0) or np.any(masses < 0):
        raise ValidationError("Atoms must sit on R+ and carry nonnegative mass.")
    keep = masses > 0
    positions, inverse = np.unique(points[keep], return_inverse=True)
    merged = np.bincount(inverse, weights=masses[keep], minlength=positions.size)
    cumulative = np.concatenate(([0.0], np.cumsum(merged)))

    def closed_cdf(x):
        return cumulative[np.searchsorted(positions, x, side="right")]

    def open_cdf(x):
        return cumulative[np.searchsorted(positions, x, side="left")]

    return _Pieces(positions, positions.copy(), merged, closed_cdf, open_cdf, float(cumulative[-1]))


def _bisect(first: _Pieces, second: _Pieces, resolution: float) -> float:
    def feasible(delta: float) -> bool:
        if _max_excess(first.left, first.right, first.masses, delta, second.closed_cdf, second.open_cdf) > delta:
            return False
        return (
            _max_excess(second.left, second.right, second.masses, delta, first.closed_cdf, first.open_cdf)
            <= delta
        )

    if feasible(0.0):
        return 0.0
    lo, hi = 0.0, max(first.total, second.total)
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _common_grid(z1: GridMeasure, z2: GridMeasure) -> tuple[GridMeasure, GridMeasure]:
    if math.isclose(z1.h, z2.h, rel_tol=1e-12) and z1.n_cells == z2.n_cells:
        return z1, z2
    h = min(z1.h, z2.h)
    x_max = min(z1.x_max, z2.x_max)
    logger.debug(f"Resampling measures to h={h:g}, x_max={x_max:g}")
    return resample(z1, h, x_max), resample(z2, h, x_max)


def prohorov(z1: GridMeasure, z2: GridMeasure, resolution: float | None = None) -> Certified:
    """
    ρ(z1, z2) over sets B that are unions of grid cells.

    Bisection on δ stops at ``resolution`` (a quarter step by default). The
    error bar covers the one-cell misalignment at each boundary of B, the
    unresolved tails and the bisection resolution.
    """
    z1, z2 = _common_grid(z1, z2)
    resolution = 0.25 * z1.h if resolution is None else resolution
    value = _bisect(_grid_pieces(z1), _grid_pieces(z2), resolution)
    return Certified(value, 2.0 * z1.h + z1.tail_mass + z2.tail_mass + resolution)


def prohorov_discrete(points1, masses1, points2, masses2, resolution: float = 1e-9) -> float:
    """Exact ρ between two purely atomic measures, up to the bisection resolution."""
    return _bisect(_atom_pieces(points1, masses1), _atom_pieces(points2, masses2), resolution)


# --- Total variation ---
def total_variation(z1: GridMeasure, z2: GridMeasure) -> Certified:
    """
    Σ |Δ1 - Δ2| over cells; mass beyond x_max contributes at least the
    difference of the tail masses and at most their sum.
    """
    z1, z2 = _common_grid(z1, z2)
    grid_part = float(np.sum(np.abs(z1.cell_masses - z2.cell_masses)))
    low = abs(z1.tail_mass - z2.tail_mass)
    return Certified(grid_part + low, z1.tail_mass + z2.tail_mass - low)


# --- Rates ---
@dataclass(frozen=True)
class RateReport:
    times: np.ndarray
    distances: np.ndarray
    slope: float
    constant: float
    window: tuple[float, float]
    excluded: int = 0
    exact_convergence: bool = False
    predicted: dict | None = field(default=None)

    @property
    def samples(self) -> int:
        return int(self.times.size)

    def bound(self, t):
        return self.constant * np.asarray(t, dtype=float) ** self.slope

    def to_dict(self) -> dict:
        out = {
            "slope": None if self.exact_convergence else self.slope,
            "C": self.constant,
            "window": list(self.window),
            "samples": self.samples,
            "excluded_zero_samples": self.excluded,
            "exact_convergence": self.exact_convergence,
            "times": self.times.tolist(),
            "distances": self.distances.tolist(),
        }
        if self.predicted is not None:
            out["predicted"] = self.predicted
        return out


def fit_rate(times, distances, window: tuple[float, float] | None = None) -> RateReport:
    """
    Least-squares fit of log d against log t inside ``window``.

    The constant is the smallest C with d(t_k) ≤ C t_k^slope at every sample,
    so the reported envelope majorizes the data. Zero distances are excluded
    from the fit and counted; when every distance is zero the report flags
    exact convergence.
    """
    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if times.shape != distances.shape:
        raise ValidationError("times and distances differ in length.")
    if np.any(np.diff(times) <= 0):
        raise ValidationError("times must be strictly increasing.")
    if np.any(distances < 0):
        raise ValidationError("distances must be nonnegative.")
    if window is None:
        window = (float(times[0]), float(times[-1])) if times.size else (0.0, 0.0)
    inside = (times >= window[0]) & (times <= window[1])
    t, d = times[inside], distances[inside]
    if t.size < MIN_SAMPLES:
        raise InsufficientSamplesError(f"Need at least {MIN_SAMPLES} samples in {window}, got {t.size}.")
    positive = d > 0
    excluded = int(t.size - positive.sum())
    if excluded == t.size:
        logger.info("All distances are zero: exact convergence.")
        return RateReport(t, d, math.nan, 0.0, window, excluded, exact_convergence=True)
    if positive.sum() < MIN_SAMPLES:
        raise InsufficientSamplesError(
            f"Only {int(positive.sum())} nonzero distances in {window}; need {MIN_SAMPLES}."
        )
    if excluded:
        logger.warning(f"Excluding {excluded} zero distances from the log-log fit.")
    fit = stats.linregress(np.log(t[positive]), np.log(d[positive]))
    slope = float(fit.slope)
    constant = float(np.max(d[positive] / t[positive] ** slope))
    logger.info(f"Fitted rate: slope={slope:.4g}, C={constant:.4g} on {window}")
    return RateReport(t, d, slope, constant, window, excluded)


class BoundCheck(NamedTuple):
    constant: float
    exponent: float
    anchor: float
    violations: list[float]

    @property
    def holds(self) -> bool:
        return not self.violations


def power_bound(
    times, distances, exponent: float, anchor: float, errors: Sequence[float] | None = None
) -> BoundCheck:
    """
    Fixes C from the sample at ``anchor`` (C = d(anchor)·anchor^{-exponent})
    and lists the later times where d(t) minus its error bar exceeds C t^exponent.
    """
    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    errors = np.zeros_like(distances) if errors is None else np.asarray(errors, dtype=float)
    index = int(np.argmin(np.abs(times - anchor)))
    if not math.isclose(times[index], anchor, rel_tol=1e-9, abs_tol=1e-12):
        raise ValidationError(f"Anchor time {anchor:g} is not among the sampled times.")
    constant = float(distances[index] * anchor ** (-exponent))
    later = times >= anchor
    envelope = constant * times**exponent * (1 + 1e-9)
    bad = later & (distances - errors > envelope)
    return BoundCheck(constant, exponent, float(anchor), times[bad].tolist())


def prohorov_rate_constant(M: float, C: float) -> float:
    """The positive root of y² - (M + 4C) y - 2C."""
    if not M > 0:
        raise ValidationError(f"M must be positive, got {M}.")
    if not C >= 1:
        raise ValidationError(f"C must be at least 1, got {C}.")
    b = M + 4.0 * C
    return 0.5 * (b + math.sqrt(b * b + 8.0 * C))


def predicted_prohorov_envelope(times, discrepancies, M: float, eps: float) -> dict:
    """
    Turns uniform CDF gaps d(t) ≤ C t^{-ε} into the Prohorov envelope
    C_ρ t^{-ε/4}, with C the smallest admissible constant (at least one).
    """
    times = np.asarray(times, dtype=float)
    discrepancies = np.asarray(discrepancies, dtype=float)
    C = max(1.0, float(np.max(discrepancies * times**eps)))
    return {
        "discrepancy_constant": C,
        "constant": prohorov_rate_constant(M, C),
        "exponent": -eps / 4.0,
    }
