"""
Atomless finite measures on the half line, stored as piecewise-linear CDFs
on a uniform grid 0, h, 2h, ..., x_max.

Mass beyond x_max is described by a tail model so that moments and
membership tests never rely on silent truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from scipy import optimize

from .config import settings, get_logger
from .distributions import Exponential, Pareto, ServiceDistribution, Uniform
from .exceptions import (
    AtomInSpecError,
    GridResampleError,
    InvalidSpecError,
    OutOfRangeError,
    TailBoundMissingError,
)
from .utils import check_keys, parse_spec, scalar

logger = get_logger(__name__)


class Certified(NamedTuple):
    """A numerical value with an upper bound on its absolute error."""

    value: float
    error: float


@dataclass(frozen=True)
class GridParams:
    """Spatial step h, state-space extent x_max and service-time extent u_max."""

    h: float = field(default_factory=lambda: settings.GRID_STEP)
    x_max: float = field(default_factory=lambda: settings.X_MAX)
    u_max: float = field(default_factory=lambda: settings.U_MAX)

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidSpecError(f"Grid step must be positive, got h={self.h}.")
        if self.x_max < self.h or self.u_max < self.h:
            raise InvalidSpecError(f"Grid extents must be at least one step: {self}.")
        # Extents are snapped to whole steps
        object.__setattr__(self, "x_max", self.h * round(self.x_max / self.h))
        object.__setattr__(self, "u_max", self.h * round(self.u_max / self.h))

    @classmethod
    def for_distribution(cls, d: ServiceDistribution, h=None, x_max=None, u_max=None) -> "GridParams":
        if x_max is None:
            x_max = settings.X_MAX_HEAVY if d.heavy_tailed else settings.X_MAX
        return cls(
            h=settings.GRID_STEP if h is None else h,
            x_max=x_max,
            u_max=settings.U_MAX if u_max is None else u_max,
        )

    @property
    def n_x(self) -> int:
        return int(round(self.x_max / self.h))

    @property
    def n_u(self) -> int:
        return int(round(self.u_max / self.h))

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.n_x + 1)

    @property
    def u_nodes(self) -> np.ndarray:
        return self.h * np.arange(self.n_u + 1)


# --- Tail models ---
class TailModel:
    """Mass and moments of a measure on (X, ∞) for X at or beyond the grid end."""

    def mass_above(self, X):
        raise NotImplementedError

    def moment(self, gamma: float, X) -> tuple[np.ndarray, bool]:
        """∫ over (X, ∞) of x^γ, and whether the value is exact (else an upper bound)."""
        raise NotImplementedError

    def sample_beyond(self, rng: np.random.Generator, size: int, x_max: float) -> np.ndarray:
        raise NotImplementedError


class AnalyticTail(TailModel):
    """scale times ν ("service") or ν_e ("excess") of a closed-form law."""

    def __init__(self, law: ServiceDistribution, scale: float, which: str = "service"):
        self.law = law
        self.scale = float(scale)
        self.which = which

    def mass_above(self, X):
        return self.scale * np.asarray(self.law.tail_moment(0.0, X, self.which), dtype=float)

    def moment(self, gamma, X):
        return self.scale * np.asarray(self.law.tail_moment(gamma, X, self.which), dtype=float), True

    def sample_beyond(self, rng, size, x_max):
        if self.which == "service":
            draws = np.empty(0)
            while draws.size < size:
                batch = self.law.sample(rng, max(4 * size, 64))
                draws = np.concatenate((draws, batch[batch > x_max]))
            return draws[:size]
        # Inverse transform on F_e restricted to (x_max, ∞)
        low = float(self.law.excess_cdf(x_max))
        targets = rng.uniform(low, 1.0, size)
        out = np.empty(size)
        for i, target in enumerate(targets):
            upper = 2.0 * x_max + 1.0
            while self.law.excess_cdf(upper) < target:
                upper *= 2.0
            out[i] = optimize.brentq(lambda x: self.law.excess_cdf(x) - target, x_max, upper)
        return out


class EmpiricalTail(TailModel):
    """Point masses of equal ``weight`` at ``values`` (all beyond the grid)."""

    def __init__(self, values, weight: float):
        self.values = np.sort(np.asarray(values, dtype=float))
        self.weight = float(weight)

    def _above(self, X):
        return np.searchsorted(self.values, np.asarray(X, dtype=float), side="right")

    def mass_above(self, X):
        return self.weight * (self.values.size - self._above(X))

    def moment(self, gamma, X):
        X = np.asarray(X, dtype=float)
        powers = np.concatenate((np.cumsum((self.values**gamma)[::-1])[::-1], [0.0]))
        return self.weight * powers[self._above(X)], True

    def sample_beyond(self, rng, size, x_max):
        return rng.choice(self.values, size=size)


class SolutionTail(TailModel):
    """
    Tail of a fluid state: the shifted initial measure beyond ``shift``
    plus a quadrature-weighted mixture of shifted service laws.
    """

    def __init__(self, xi: "GridMeasure", law: ServiceDistribution, shift: float, shifts, weights):
        self.xi = xi
        self.law = law
        self.shift = float(shift)
        self.shifts = np.asarray(shifts, dtype=float)
        self.weights = np.asarray(weights, dtype=float)

    def mass_above(self, X):
        X = np.asarray(X, dtype=float)
        mixture = np.asarray(
            [np.dot(self.weights, self.law.excess_density(x + self.shifts)) for x in np.atleast_1d(X)]
        )
        value = self.xi.mass_above(self.shift + np.atleast_1d(X)) + mixture
        return value.reshape(X.shape)

    def moment(self, gamma, X):
        X = np.asarray(X, dtype=float)
        values, exact = [], True
        for x in np.atleast_1d(X):
            shifted, shifted_exact = residual_moment(self.xi, gamma, x, self.shift)
            residual, residual_exact = self.law.residual_tail_moment(gamma, x, self.shifts)
            values.append(shifted + self.law.alpha * np.dot(self.weights, residual))
            exact = exact and shifted_exact and residual_exact
        return np.asarray(values).reshape(X.shape), exact


# --- The measure itself ---
@dataclass(frozen=True, eq=False)
class GridMeasure:
    h: float
    cdf: np.ndarray
    tail_mass: float = 0.0
    tail: TailModel | None = None

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=float)
        if cdf.ndim != 1 or cdf.size < 2:
            raise InvalidSpecError("A grid measure needs at least one cell.")
        scale = max(1.0, float(np.max(np.abs(cdf))))
        if abs(cdf[0]) > 1e-12 * scale:
            raise AtomInSpecError(f"CDF starts at {cdf[0]}, i.e. an atom at the origin.")
        if np.any(np.diff(cdf) < -1e-9 * scale):
            raise InvalidSpecError("CDF decreases somewhere: negative mass.")
        cdf = np.maximum.accumulate(np.maximum(cdf, 0.0))
        cdf[0] = 0.0
        if self.tail_mass < -1e-9 * scale or not math.isfinite(self.tail_mass):
            raise InvalidSpecError(f"Invalid tail mass {self.tail_mass}.")
        object.__setattr__(self, "cdf", cdf)
        object.__setattr__(self, "tail_mass", max(float(self.tail_mass), 0.0))

    @property
    def n_cells(self) -> int:
        return self.cdf.size - 1

    @property
    def x_max(self) -> float:
        return self.h * self.n_cells

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.cdf.size)

    @cached_property
    def cell_masses(self) -> np.ndarray:
        return np.diff(self.cdf)

    @property
    def total_mass(self) -> float:
        return float(self.cdf[-1] + self.tail_mass)

    @property
    def is_zero(self) -> bool:
        return self.total_mass == 0.0

    def _require_tail(self):
        if self.tail is None and self.tail_mass > 0:
            raise TailBoundMissingError(
                f"Measure has mass {self.tail_mass:.3g} beyond x_max={self.x_max:g} but no tail model."
            )

    def mass_above(self, x):
        """ζ((x, ∞)) for scalar or array x."""
        x = np.asarray(x, dtype=float)
        inside = np.minimum(np.maximum(x, 0.0), self.x_max)
        value = self.total_mass - np.interp(inside, self.nodes, self.cdf)
        beyond = x > self.x_max
        if np.any(beyond):
            if self.tail is None:
                if self.tail_mass > 0:
                    raise OutOfRangeError(
                        f"Cannot evaluate beyond x_max={self.x_max:g} without a tail model."
                    )
                tail_values = 0.0
            else:
                tail_values = self.tail.mass_above(np.where(beyond, x, self.x_max))
            value = np.where(beyond, tail_values, value)
        return float(value) if value.ndim == 0 else value

    def cdf_at(self, x):
        """ζ([0, x])."""
        x = np.asarray(x, dtype=float)
        value = self.total_mass - np.asarray(self.mass_above(x))
        value = np.where(x < 0, 0.0, value)
        return float(value) if value.ndim == 0 else value

    @cached_property
    def _workload_nodes(self) -> np.ndarray:
        above = self.total_mass - self.cdf
        return np.concatenate(([0.0], np.cumsum(0.5 * self.h * (above[:-1] + above[1:]))))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """i.i.d. draws from ζ/⟨1, ζ⟩."""
        if size == 0 or self.is_zero:
            return np.empty(0)
        u = rng.uniform(0.0, self.total_mass, size)
        out = np.interp(u, self.cdf, self.nodes)
        beyond = u >= self.cdf[-1]
        count = int(beyond.sum())
        if count:
            try:
                out[beyond] = self.tail.sample_beyond(rng, count, self.x_max)
            except (AttributeError, NotImplementedError):
                logger.warning(f"{count} draws fell beyond x_max={self.x_max:g}; placed at x_max.")
                out[beyond] = self.x_max
        return out


def zero_measure(h: float, x_max: float) -> GridMeasure:
    n = int(round(x_max / h))
    return GridMeasure(h=h, cdf=np.zeros(n + 1))


def _cell_power_integrals(zeta: GridMeasure, gamma: float, lower: float, shift: float = 0.0) -> float:
    """∫ over the grid part above ``lower`` of (x - shift)^γ, density constant per cell."""
    left, right = zeta.nodes[:-1], zeta.nodes[1:]
    lo = np.clip(lower, left, right)
    g1 = gamma + 1.0
    density = zeta.cell_masses / zeta.h
    pieces = density * (np.maximum(right - shift, 0.0) ** g1 - np.maximum(lo - shift, 0.0) ** g1) / g1
    return float(np.sum(pieces[right > lo]))


def residual_moment(zeta: GridMeasure, gamma: float, X: float, w: float) -> tuple[float, bool]:
    """
    ∫ over (X + w, ∞) of (z - w)^γ ζ(dz), with an exactness flag.

    Exact on the grid; beyond it exact for γ in {0, 1, 2} when the tail model
    is exact, else bounded by ∫ z^γ.
    """
    base = X + w
    value = _cell_power_integrals(zeta, gamma, base, w) if base < zeta.x_max else 0.0
    if zeta.tail_mass == 0:
        return value, True
    zeta._require_tail()
    start = max(base, zeta.x_max)
    top, exact = zeta.tail.moment(gamma, start)
    top = float(top)
    if float(gamma).is_integer() and 0 <= gamma <= 2 and math.isfinite(top):
        order = int(gamma)
        expansion = 0.0
        for k in range(order + 1):
            moment_k, exact_k = zeta.tail.moment(k, start)
            expansion += math.comb(order, k) * (-w) ** (order - k) * float(moment_k)
            exact = exact and exact_k
        return value + max(expansion, 0.0), exact
    return value + top, False


def mass_and_moment(zeta: GridMeasure, gamma: float) -> Certified:
    """
    ⟨χ^γ, ζ⟩ with an error bar.

    The grid part integrates the cell densities exactly; its error bar is the
    largest shift the moment can see if mass moves within its cell. A tail
    contribution that is only an upper bound is added to both value and error.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}.")
    value = _cell_power_integrals(zeta, gamma, 0.0)
    if gamma == 0:
        error = 0.0
    else:
        error = float(np.sum(zeta.cell_masses * (zeta.nodes[1:] ** gamma - zeta.nodes[:-1] ** gamma)))
    if zeta.tail_mass > 0:
        zeta._require_tail()
        tail_value, exact = zeta.tail.moment(gamma, zeta.x_max)
        tail_value = float(tail_value)
        if math.isinf(tail_value):
            return Certified(math.inf, 0.0)
        value += tail_value
        if not exact:
            error += tail_value
    return Certified(value, error)


def partial_moment(zeta: GridMeasure, gamma: float, X: float) -> Certified:
    """∫ over (X, ∞) of x^γ dζ."""
    value, exact = residual_moment(zeta, gamma, X, 0.0)
    return Certified(value, 0.0 if exact else value)


def truncated_workload(zeta: GridMeasure, x):
    """H(x) = ⟨χ ∧ x, ζ⟩ = ∫_0^x ζ((y, ∞)) dy; concave, with H(∞) = ⟨χ, ζ⟩."""
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x)
    out = np.empty(flat.shape)
    inside = flat <= zeta.x_max
    if np.any(inside):
        xs = np.maximum(flat[inside], 0.0)
        cell = np.minimum((xs / zeta.h).astype(int), zeta.n_cells - 1)
        above = zeta.total_mass - zeta.cdf
        offset = xs - zeta.nodes[cell]
        out[inside] = zeta._workload_nodes[cell] + 0.5 * offset * (above[cell] + zeta.mass_above(xs))
    if np.any(~inside):
        first = mass_and_moment(zeta, 1.0).value
        xs = flat[~inside]
        if zeta.tail_mass == 0:
            out[~inside] = zeta._workload_nodes[-1]
        else:
            zeta._require_tail()
            finite = np.isfinite(xs)
            tail_excess = np.zeros(xs.shape)
            if np.any(finite):
                m1, _ = zeta.tail.moment(1.0, xs[finite])
                m0 = zeta.tail.mass_above(xs[finite])
                tail_excess[finite] = np.asarray(m1) - xs[finite] * np.asarray(m0)
            out[~inside] = first - tail_excess
    return float(out[0]) if x.ndim == 0 else out.reshape(x.shape)


def tail_mass_at(zeta: GridMeasure, x):
    """H'(x) = ζ((x, ∞)); nonincreasing with H'(0) = total mass."""
    return zeta.mass_above(x)


def integrate(zeta: GridMeasure, fn: Callable, sup: float | None = None) -> Certified:
    """⟨fn, ζ⟩ by Simpson's rule per cell; tail mass enters the error as sup·mass."""
    left, right = zeta.nodes[:-1], zeta.nodes[1:]
    averages = (fn(left) + 4.0 * fn(0.5 * (left + right)) + fn(right)) / 6.0
    value = float(np.dot(zeta.cell_masses, averages))
    if zeta.tail_mass == 0:
        return Certified(value, 0.0)
    return Certified(value, math.inf if sup is None else sup * zeta.tail_mass)


def in_moment_ball(zeta: GridMeasure, M: float, eps: float, which: str = "rho") -> bool:
    """
    Membership of the moment balls used by the rate statements.

    ``rho`` bounds ⟨1,ζ⟩, ⟨χ,ζ⟩, ⟨χ^{1+ε},ζ⟩ by M; ``tv`` additionally
    ⟨χ²,ζ⟩ and ⟨χ^{2+ε},ζ⟩. Values are taken together with their error bars.
    """
    if which not in ("rho", "tv"):
        raise ValueError(f"which must be 'rho' or 'tv', got '{which}'.")
    gammas = [0.0, 1.0, 1.0 + eps]
    if which == "tv":
        gammas += [2.0, 2.0 + eps]
    for gamma in gammas:
        try:
            certified = mass_and_moment(zeta, gamma)
        except TailBoundMissingError as e:
            logger.warning(f"Moment ball membership undecidable: {e}")
            return False
        if not certified.value + certified.error <= M:
            return False
    return True


# --- Constructors ---
def _law_measure(law: ServiceDistribution, mass: float, grid: GridParams) -> GridMeasure:
    if mass == 0:
        return zero_measure(grid.h, grid.x_max)
    nodes = grid.nodes
    return GridMeasure(
        h=grid.h,
        cdf=mass * law.cdf(nodes),
        tail_mass=mass * float(law.sf(grid.x_max)),
        tail=AnalyticTail(law, mass, "service"),
    )


def scaled_excess(d: ServiceDistribution, c: float, grid: GridParams) -> GridMeasure:
    """The invariant state c·ν_e on the grid, with an exact analytic tail."""
    if c < 0 or not math.isfinite(c):
        raise InvalidSpecError(f"Scale of the excess law must be finite and nonnegative, got {c}.")
    if c == 0:
        return zero_measure(grid.h, grid.x_max)
    return GridMeasure(
        h=grid.h,
        cdf=c * d.excess_cdf(grid.nodes),
        tail_mass=c * float(d.tail_moment(0.0, grid.x_max, "excess")),
        tail=AnalyticTail(d, c, "excess"),
    )


def _measure_from_csv(path: str, grid: GridParams) -> GridMeasure:
    table = pd.read_csv(path, header=None).apply(pd.to_numeric, errors="coerce").dropna()
    if table.shape[1] != 2 or table.empty:
        raise InvalidSpecError(f"{path} must have two numeric columns (x, CDF).")
    xs = table.iloc[:, 0].to_numpy(dtype=float)
    Fs = table.iloc[:, 1].to_numpy(dtype=float)
    if xs[0] != 0.0 or Fs[0] != 0.0:
        if xs[0] == 0.0:
            raise AtomInSpecError(f"{path}: CDF({xs[0]}) = {Fs[0]} is an atom at the origin.")
        raise InvalidSpecError(f"{path}: first row must be 0,0.")
    steps = np.diff(xs)
    if np.any((steps == 0) & (np.diff(Fs) != 0)):
        raise AtomInSpecError(f"{path}: repeated x with a CDF jump describes an atom.")
    if np.any(steps <= 0):
        raise InvalidSpecError(f"{path}: x values must be strictly increasing.")
    if np.any(np.diff(Fs) < 0):
        raise InvalidSpecError(f"{path}: CDF decreases, i.e. negative mass.")
    if not np.all(np.isfinite(Fs)):
        raise InvalidSpecError(f"{path}: infinite mass.")
    if xs[-1] > grid.x_max and np.interp(grid.x_max, xs, Fs) < Fs[-1]:
        raise InvalidSpecError(f"{path}: support extends beyond x_max={grid.x_max:g}; enlarge the grid.")
    logger.info(f"Loaded measure with {len(xs)} CDF rows from {path}")
    return GridMeasure(h=grid.h, cdf=np.interp(grid.nodes, xs, Fs))


def _mass(params, key="mass") -> float:
    mass = scalar(params, key, 1.0)
    if mass < 0:
        raise InvalidSpecError(f"Negative mass {mass}.")
    if not math.isfinite(mass):
        raise InvalidSpecError("Infinite mass.")
    return mass


def make_measure(spec: str, grid: GridParams, dist: ServiceDistribution | None = None) -> GridMeasure:
    """
    Builds an initial measure from a spec string.

    Families: ``zero``, ``uniformdensity:a=,b=,mass=``, ``expdensity:rate=,mass=``,
    ``paretodensity:xm=,p=,mass=``, ``scaledexcess:c=`` (needs ``dist``) and
    ``csv:path``.
    """
    family, params = parse_spec(spec)
    if family == "zero":
        if params:
            raise InvalidSpecError("The zero measure takes no parameters.")
        return zero_measure(grid.h, grid.x_max)
    if family == "csv":
        return _measure_from_csv(params, grid)
    if family == "uniformdensity":
        check_keys(family, params, ("a", "b", "mass"))
        return _law_measure(Uniform(scalar(params, "a", 0.0), scalar(params, "b")), _mass(params), grid)
    if family == "expdensity":
        check_keys(family, params, ("rate", "mass"))
        return _law_measure(Exponential(scalar(params, "rate")), _mass(params), grid)
    if family == "paretodensity":
        check_keys(family, params, ("xm", "p", "mass"))
        return _law_measure(Pareto(scalar(params, "xm"), scalar(params, "p")), _mass(params), grid)
    if family == "scaledexcess":
        check_keys(family, params, ("c",))
        if dist is None:
            raise InvalidSpecError("scaledexcess needs a service distribution.")
        return scaled_excess(dist, scalar(params, "c", 1.0), grid)
    if family in ("atom", "dirac", "point"):
        raise AtomInSpecError(f"'{family}' describes an atom; initial measures must be atomless.")
    raise InvalidSpecError(f"Unknown measure family '{family}' in spec '{spec}'.")


def resample(zeta: GridMeasure, h: float, x_max: float) -> GridMeasure:
    """
    Re-expresses ζ on a grid whose step divides ζ's step and whose extent
    does not exceed ζ's. Mass cut off at the new x_max moves into the tail.
    """
    ratio = zeta.h / h
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise GridResampleError(f"Step {h:g} does not refine step {zeta.h:g}.")
    if x_max > zeta.x_max + 1e-9:
        raise GridResampleError(f"Cannot extend a measure from x_max={zeta.x_max:g} to {x_max:g}.")
    if round(ratio) == 1 and abs(x_max - zeta.x_max) <= 1e-9:
        return zeta
    nodes = h * np.arange(int(round(x_max / h)) + 1)
    cdf = np.interp(nodes, zeta.nodes, zeta.cdf)
    same_end = abs(x_max - zeta.x_max) <= 1e-9
    tail = zeta.tail if same_end or isinstance(zeta.tail, AnalyticTail) else None
    return GridMeasure(h=h, cdf=cdf, tail_mass=zeta.total_mass - cdf[-1], tail=tail)
