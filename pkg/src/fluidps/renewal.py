"""
The renewal function U_e of the excess-lifetime renewal process.

U_e(u) = Σ_i F_e^{*i}(u) with F_e^{*0} ≡ 1. It is computed from the renewal
density m, the solution of m = f_e + f_e * m, so that dU_e is an atom of
size one at the origin plus m(u) du.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.integrate import cumulative_trapezoid

from .config import settings, get_logger
from .distributions import ServiceDistribution
from .exceptions import (
    CertificateError,
    DivergentSchemeError,
    GridMismatchError,
    InvalidSpecError,
    OutOfRangeError,
    RateUndefinedError,
)

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class RenewalFunction:
    h: float
    u_max: float
    values: np.ndarray
    density: np.ndarray
    renewal_rate: float
    residual_cert: float
    tolerance: float

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.values.size)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0) or np.any(u > self.u_max + 1e-9):
            raise OutOfRangeError(f"U_e is tabulated on [0, {self.u_max:g}] only.")
        value = np.interp(u, self.nodes, self.values)
        return float(value) if value.ndim == 0 else value


def _trapezoid_convolution(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """h·trapezoid of ∫_0^u a(u-s) b(s) ds at every node u."""
    n = a.size
    full = signal.fftconvolve(a, b)[:n]
    return h * (full - 0.5 * a * b[0] - 0.5 * a[0] * b)


def compute_renewal_function(
    d: ServiceDistribution,
    h: float | None = None,
    u_max: float | None = None,
    tolerance: float | None = None,
) -> RenewalFunction:
    """
    Solves m = f_e + f_e * m with the implicit trapezoid rule and integrates
    it into U_e = 1 + ∫ m.

    The renewal-equation residual max_k |U_e - 1 - F_e * U_e| is stored as a
    certificate; a value above ``tolerance`` · U_e(u_max) raises
    CertificateError.
    """
    h = settings.GRID_STEP if h is None else h
    u_max = settings.U_MAX if u_max is None else u_max
    tolerance = settings.RENEWAL_RESIDUAL_TOL if tolerance is None else tolerance
    if not h > 0:
        raise InvalidSpecError(f"Step must be positive, got h={h}.")
    if u_max < 1:
        raise InvalidSpecError(f"u_max must be at least 1, got {u_max}.")

    n = int(round(u_max / h))
    u = h * np.arange(n + 1)
    f = np.asarray(d.excess_density(u), dtype=float)
    pivot = 1.0 - 0.5 * h * f[0]
    if pivot <= 0:
        raise DivergentSchemeError(
            f"Implicit scheme diverges: 1 - h*f_e(0)/2 = {pivot:.3g} <= 0; reduce h below {2.0 / f[0]:.3g}."
        )

    logger.info(f"Solving the renewal equation for {d.spec} on {n + 1} nodes (h={h:g}, u_max={u_max:g})...")
    m = np.empty(n + 1)
    m[0] = f[0]
    for k in range(1, n + 1):
        history = np.dot(f[1:k], m[k - 1 : 0 : -1])
        m[k] = (f[k] + h * (history + 0.5 * f[k] * m[0])) / pivot
    values = 1.0 + cumulative_trapezoid(m, dx=h, initial=0.0)

    Fe = np.asarray(d.excess_cdf(u), dtype=float)
    residual = values - 1.0 - (Fe + _trapezoid_convolution(Fe, m, h))
    residual_cert = float(np.max(np.abs(residual)))
    renewal = RenewalFunction(
        h=h,
        u_max=n * h,
        values=values,
        density=m,
        renewal_rate=d.renewal_rate,
        residual_cert=residual_cert,
        tolerance=tolerance,
    )
    logger.info(
        f"Renewal function ready: U_e({renewal.u_max:g})={values[-1]:.6g}, residual certificate={residual_cert:.3g}"
    )
    if residual_cert > tolerance * values[-1]:
        raise CertificateError(
            f"Renewal residual {residual_cert:.3g} exceeds {tolerance:g} * U_e(u_max) = {tolerance * values[-1]:.3g}."
        )
    return renewal


def series_renewal_function(
    d: ServiceDistribution, h: float, u_max: float, tol: float = 1e-6, max_terms: int = 20000
) -> np.ndarray:
    """
    U_e by direct summation of the convolution powers F_e^{*i}.

    Terms are added until the last one is below ``tol`` at u_max and the
    remainder is below ``tol`` too, bounded either by F_e(u_max)^I / (1 - F_e(u_max))
    or, once the terms decay geometrically, by the observed ratio.
    """
    n = int(round(u_max / h))
    u = h * np.arange(n + 1)
    f = np.asarray(d.excess_density(u), dtype=float)
    Fe = np.asarray(d.excess_cdf(u), dtype=float)
    q = Fe[-1]
    total = 1.0 + Fe
    term = Fe
    for i in range(2, max_terms + 1):
        previous = term[-1]
        term = np.clip(_trapezoid_convolution(f, term, h), 0.0, None)
        total += term
        ratio = term[-1] / previous if previous > 0 else 0.0
        geometric_ok = q < 1.0 and q**i / (1.0 - q) <= tol
        ratio_ok = ratio < 1.0 and term[-1] * ratio / (1.0 - ratio) <= tol
        if term[-1] <= tol and (geometric_ok or ratio_ok):
            logger.info(f"Series renewal function converged after {i} terms.")
            return total
    logger.warning(f"Series renewal function stopped at {max_terms} terms without converging.")
    return total


def blackwell_discrepancy(U: RenewalFunction, t: float, s: float) -> float:
    """U_e(t+s) - U_e(t) - β_e·s by interpolation on the grid."""
    if U.renewal_rate == 0:
        raise RateUndefinedError("The renewal rate is zero; the Blackwell centering is undefined.")
    if not 0 <= s <= 1:
        raise OutOfRangeError(f"The increment s must lie in [0, 1], got {s}.")
    if t < 0 or t + s > U.u_max + 1e-9:
        raise OutOfRangeError(f"t + s = {t + s:g} lies outside [0, {U.u_max:g}].")
    return U(t + s) - U(t) - U.renewal_rate * s


def max_blackwell_discrepancy(U: RenewalFunction, t: float, n_s: int = 101) -> float:
    """max over an s-grid on [0, 1] of |U_e(t+s) - U_e(t) - β_e s|."""
    if U.renewal_rate == 0:
        raise RateUndefinedError("The renewal rate is zero; the Blackwell centering is undefined.")
    if t < 0 or t + 1 > U.u_max + 1e-9:
        raise OutOfRangeError(f"t + 1 = {t + 1:g} lies outside [0, {U.u_max:g}].")
    s = np.linspace(0.0, 1.0, n_s)
    return float(np.max(np.abs(U(t + s) - U(t) - U.renewal_rate * s)))


def discretisation_floor(U: RenewalFunction) -> float:
    """|m(u_max) - β_e|: the offset of the discrete renewal density from its limit."""
    return abs(float(U.density[-1]) - U.renewal_rate)


def elementary_renewal_gap(U: RenewalFunction) -> float:
    """|U_e(u_max)/u_max - β_e|."""
    return abs(U.values[-1] / U.u_max - U.renewal_rate)


def convolve_with_renewal(U: RenewalFunction, g, h: float | None = None) -> np.ndarray:
    """
    (g * U_e)(u) = ∫_[0,u] g(u-s) dU_e(s) at every node.

    The atom of dU_e at zero contributes g(u) exactly; the density part is
    integrated with the trapezoid rule.
    """
    g = np.asarray(g, dtype=float)
    if h is not None and not math.isclose(h, U.h, rel_tol=1e-12):
        raise GridMismatchError(f"Function step {h:g} differs from renewal step {U.h:g}.")
    if g.shape != U.values.shape:
        raise GridMismatchError(f"Function has {g.size} nodes, the renewal grid has {U.values.size}.")
    return g + _trapezoid_convolution(g, U.density, U.h)
