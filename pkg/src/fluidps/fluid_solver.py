"""
Fluid model solutions of the critical processor-sharing queue.

The solution started from ξ is built in the service-time scale u:

    T̄'(u) = (H'_ξ * U_e)(u)        mass after cumulative service u
    T̄(u)  = (H_ξ * U_e)(u)         time needed to render service u

S̄ = T̄^{-1} is the cumulative service per unit mass, Z̄(t) = T̄'(S̄(t)) the
total mass, and the state itself is

    μ̄(t)[0, x] = ξ((S, S+x]) + ∫_0^S (f_e(y) - f_e(x+y)) T̄'(S-y) dy,   S = S̄(t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal
from scipy.integrate import cumulative_trapezoid

from .config import get_logger
from .distributions import ServiceDistribution, TestFunction
from .exceptions import (
    DegenerateSolutionError,
    GridMismatchError,
    OutOfRangeError,
    RateUndefinedError,
    WorkloadInfiniteError,
)
from .measures import (
    GridMeasure,
    GridParams,
    SolutionTail,
    integrate,
    mass_and_moment,
    scaled_excess,
    truncated_workload,
    zero_measure,
)
from .renewal import RenewalFunction, compute_renewal_function, convolve_with_renewal

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class FluidSolution:
    xi: GridMeasure
    dist: ServiceDistribution
    renewal: RenewalFunction
    grid: GridParams
    mass_by_service: np.ndarray
    time_by_service: np.ndarray
    workload: float
    limit_mass: float
    extrapolate: bool = False

    @property
    def is_zero(self) -> bool:
        return self.xi.is_zero

    @property
    def u_nodes(self) -> np.ndarray:
        return self.renewal.nodes

    @property
    def horizon(self) -> float:
        """Largest time covered by the tabulated T̄."""
        return float(self.time_by_service[-1])


class GapEstimate(NamedTuple):
    value: float
    horizon: float
    lower_estimate: bool


class LowerBoundCheck(NamedTuple):
    onset: float | None
    holds: np.ndarray
    bound: np.ndarray


def solve(
    xi: GridMeasure,
    d: ServiceDistribution,
    grid: GridParams | None = None,
    renewal: RenewalFunction | None = None,
    extrapolate: bool = False,
) -> FluidSolution:
    """
    Builds the fluid solution started from ξ.

    A precomputed renewal function on the same step may be passed in to
    share it between initial conditions. The zero measure gives the
    degenerate solution μ̄ ≡ 0.
    """
    grid = grid or GridParams.for_distribution(d, h=xi.h)
    if not math.isclose(grid.h, xi.h, rel_tol=1e-12):
        raise GridMismatchError(f"Initial measure step {xi.h:g} differs from grid step {grid.h:g}.")
    if renewal is None:
        renewal = compute_renewal_function(d, grid.h, grid.u_max)
    elif not math.isclose(renewal.h, xi.h, rel_tol=1e-12):
        raise GridMismatchError(f"Renewal step {renewal.h:g} differs from measure step {xi.h:g}.")
    grid = GridParams(h=xi.h, x_max=xi.x_max, u_max=renewal.u_max)

    workload = mass_and_moment(xi, 1.0).value
    if not math.isfinite(workload):
        raise WorkloadInfiniteError("The initial measure has an infinite first moment.")

    u = renewal.nodes
    if xi.is_zero:
        logger.info("Zero initial measure: returning the degenerate solution.")
        zeros = np.zeros_like(u)
        return FluidSolution(xi, d, renewal, grid, zeros, zeros.copy(), 0.0, 0.0, extrapolate)

    logger.info(f"Solving fluid model for {d.spec}, mass={xi.total_mass:.6g}, workload={workload:.6g}")
    mass_by_service = convolve_with_renewal(renewal, xi.mass_above(u))
    time_by_service = np.maximum.accumulate(convolve_with_renewal(renewal, truncated_workload(xi, u)))
    limit_mass = d.renewal_rate * workload
    logger.info(
        f"Fluid solution covers t <= {time_by_service[-1]:.6g}; limit mass kappa={limit_mass:.6g}"
    )
    return FluidSolution(
        xi, d, renewal, grid, mass_by_service, time_by_service, workload, limit_mass, extrapolate
    )


def cumulative_service(sol: FluidSolution, t):
    """S̄(t), the inverse of T̄; optional extrapolation with slope κ beyond the grid."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise OutOfRangeError("Times must be nonnegative.")
    if sol.is_zero:
        value = np.zeros_like(t)
        return float(value) if value.ndim == 0 else value
    value = np.interp(t, sol.time_by_service, sol.u_nodes)
    beyond = t > sol.horizon
    if np.any(beyond):
        if not sol.extrapolate or sol.limit_mass == 0:
            raise OutOfRangeError(
                f"t={float(np.max(t)):g} is beyond the solved horizon {sol.horizon:.6g}; raise u_max."
            )
        value = np.where(beyond, sol.renewal.u_max + (t - sol.horizon) / sol.limit_mass, value)
    return float(value) if value.ndim == 0 else value


def total_mass(sol: FluidSolution, t):
    """Z̄(t) = T̄'(S̄(t))."""
    s = np.asarray(cumulative_service(sol, t))
    if sol.is_zero:
        value = np.zeros_like(s)
    else:
        value = np.where(
            s > sol.renewal.u_max,
            sol.limit_mass,
            np.interp(s, sol.u_nodes, sol.mass_by_service),
        )
    return float(value) if value.ndim == 0 else value


def measure_at(sol: FluidSolution, t: float) -> GridMeasure:
    """
    The fluid state μ̄(t) on the grid of ξ.

    The y-integral uses the trapezoid rule on the nodes 0, h, ..., kh with a
    final partial panel up to S = S̄(t); for all x at once it is a single
    correlation of f_e with the weighted T̄' profile.
    """
    xi = sol.xi
    if sol.is_zero:
        return zero_measure(xi.h, xi.x_max)
    S = float(cumulative_service(sol, t))
    if S > sol.renewal.u_max + 1e-12:
        raise OutOfRangeError(f"S(t)={S:.6g} exceeds u_max={sol.renewal.u_max:g}; measure unavailable.")

    h, n_x = xi.h, xi.n_cells
    k = int(math.floor(S / h + 1e-9))
    delta = max(S - k * h, 0.0)
    if delta < 1e-12:
        delta = 0.0

    y = h * np.arange(k + 1)
    weights = np.full(k + 1, h)
    weights[0] = weights[-1] = 0.5 * h
    if k == 0:
        weights[0] = 0.0
    weights[-1] += 0.5 * delta
    profile = weights * np.interp(S - y, sol.u_nodes, sol.mass_by_service)

    fe = np.asarray(sol.dist.excess_density(h * np.arange(n_x + k + 1)), dtype=float)
    tail_kernel = signal.fftconvolve(fe, profile[::-1], mode="valid")
    shifts, mix = y, profile
    if delta > 0:
        end_weight = 0.5 * delta * sol.mass_by_service[0]
        tail_kernel = tail_kernel + end_weight * np.asarray(sol.dist.excess_density(xi.nodes + S))
        shifts = np.append(y, S)
        mix = np.append(profile, end_weight)

    shifted = xi.mass_above(S) - xi.mass_above(S + xi.nodes)
    cdf = shifted + (tail_kernel[0] - tail_kernel)
    tail_mass = float(xi.mass_above(S + xi.x_max) + tail_kernel[-1])
    tail = SolutionTail(xi, sol.dist, S, shifts, mix)
    return GridMeasure(h=h, cdf=cdf, tail_mass=tail_mass, tail=tail)


def workload_at(sol: FluidSolution, t: float) -> float:
    """⟨χ, μ̄(t)⟩; conserved along the solution."""
    if sol.is_zero:
        return 0.0
    return mass_and_moment(measure_at(sol, t), 1.0).value


def dynamic_residuals(
    sol: FluidSolution, functions: Sequence[TestFunction], times: Sequence[float]
) -> np.ndarray:
    """
    ⟨g, μ̄(t)⟩ - ⟨g, ξ⟩ + ∫_0^t ⟨g', μ̄(s)⟩/⟨1, μ̄(s)⟩ ds - α t ⟨g, ν⟩
    for every test function (rows) and time (columns).

    The s-integral uses a time grid with the spatial step h, refined to hit
    every requested time, and Z̄ from the tabulated solution.
    """
    if sol.is_zero:
        raise DegenerateSolutionError("The zero solution has no dynamics to check.")
    times = np.asarray(times, dtype=float)
    functions = [g.validate() for g in functions]
    h = sol.xi.h
    t_max = float(np.max(times)) if times.size else 0.0
    base = h * np.arange(int(math.ceil(t_max / h)) + 1)
    grid = np.unique(np.round(np.concatenate((base[base <= t_max], times, [0.0])), 12))

    logger.info(f"Evaluating dynamic residuals for {len(functions)} test functions on {grid.size} times...")
    drift = np.empty((len(functions), grid.size))
    level = np.empty((len(functions), grid.size))
    masses = np.asarray(total_mass(sol, grid))
    for j, s in enumerate(grid):
        state = measure_at(sol, s)
        for i, g in enumerate(functions):
            drift[i, j] = integrate(state, g.g_prime, g.g_prime_sup).value / masses[j]
            level[i, j] = integrate(state, g.g, g.g_sup).value

    accumulated = cumulative_trapezoid(drift, grid, axis=1, initial=0.0)
    index = np.searchsorted(grid, np.round(times, 12))
    out = np.empty((len(functions), times.size))
    for i, g in enumerate(functions):
        start = integrate(sol.xi, g.g, g.g_sup).value
        arrivals = sol.dist.alpha * sol.dist.expect(g.g)
        out[i] = level[i, index] - start + accumulated[i, index] - arrivals * times
    return out


def dynamic_residual(sol: FluidSolution, g: TestFunction, t: float) -> float:
    return float(dynamic_residuals(sol, [g], [t])[0, 0])


def limit_state(sol: FluidSolution) -> GridMeasure:
    """κ·ν_e, or the zero measure when κ = 0 (including a zero renewal rate)."""
    if sol.limit_mass == 0:
        return zero_measure(sol.xi.h, sol.xi.x_max)
    return scaled_excess(sol.dist, sol.limit_mass, sol.grid)


def stationarity_gap(sol: FluidSolution, r: float) -> GapEstimate:
    """
    ∫_r^{u_max} |T̄'(u) - κ| du.

    Flagged as a lower estimate: mass of |τ - κℓ| beyond u_max is not seen.
    """
    u_max = sol.renewal.u_max
    if r < 0 or r > u_max + 1e-9:
        raise OutOfRangeError(f"r={r:g} lies outside [0, {u_max:g}].")
    h = sol.renewal.h
    diff = np.abs(sol.mass_by_service - sol.limit_mass)
    k = min(int(math.ceil(r / h - 1e-9)), diff.size - 1)
    at_r = abs(float(np.interp(r, sol.u_nodes, sol.mass_by_service)) - sol.limit_mass)
    head = 0.5 * (k * h - r) * (at_r + diff[k])
    body = float(np.sum(0.5 * h * (diff[k:-1] + diff[k + 1 :])))
    return GapEstimate(head + body, u_max, True)


def linear_lower_bound(sol: FluidSolution, eta: float, times) -> LowerBoundCheck:
    """
    Checks S̄(t) ≥ t / ((β_e + η)⟨χ, ξ⟩) on ``times`` and reports the first
    time from which it holds for every later sample (None if it fails at the end).
    """
    if sol.is_zero:
        raise DegenerateSolutionError("The zero solution renders no service.")
    rate = sol.dist.renewal_rate + eta
    if not rate > 0:
        raise RateUndefinedError("The bound needs beta_e + eta > 0.")
    times = np.asarray(times, dtype=float)
    bound = times / (rate * sol.workload)
    holds = np.asarray(cumulative_service(sol, times)) >= bound
    if not holds[-1]:
        return LowerBoundCheck(None, holds, bound)
    failures = np.flatnonzero(~holds)
    onset = float(times[0] if failures.size == 0 else times[failures[-1] + 1])
    return LowerBoundCheck(onset, holds, bound)


def upper_envelope_holds(sol: FluidSolution, rel_tol: float = 1e-9) -> bool:
    """T̄(u) ≤ ⟨χ, ξ⟩ U_e(u) on the whole grid."""
    envelope = sol.workload * sol.renewal.values
    return bool(np.all(sol.time_by_service <= envelope * (1 + rel_tol) + rel_tol))


def interval_discrepancy(sol: FluidSolution, t: float) -> float:
    """
    sup over grid x and x = ∞ of |μ̄(t)[0, x) - κ F_e(x)|.

    Its decay in t drives the Prohorov rate constant.
    """
    state = measure_at(sol, t)
    if sol.limit_mass > 0:
        target = sol.limit_mass * np.asarray(sol.dist.excess_cdf(state.nodes))
    else:
        target = np.zeros_like(state.cdf)
    on_grid = float(np.max(np.abs(state.cdf - target)))
    return max(on_grid, abs(state.total_mass - sol.limit_mass))
