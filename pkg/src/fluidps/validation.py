"""
The acceptance suite behind ``fluidps selftest``.

Every check returns a dict with a ``passed`` flag and the numbers it was
decided on; run_selftest collects them, turning an exception inside a check
into a failed entry carrying the error message.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .config import get_logger
from .distributions import balance_identity_residual, make_service_dist, standard_test_functions
from .fluid_solver import (
    cumulative_service,
    dynamic_residuals,
    limit_state,
    measure_at,
    solve,
    stationarity_gap,
    total_mass,
    workload_at,
)
from .measures import GridMeasure, GridParams, make_measure, mass_and_moment, scaled_excess
from .metrics import prohorov, prohorov_discrete
from .psq_sim import median_distances, simulate
from .experiments import gap_experiment, rates_experiment
from .renewal import (
    compute_renewal_function,
    discretisation_floor,
    max_blackwell_discrepancy,
    series_renewal_function,
)

logger = get_logger(__name__)

BUILT_IN_FAMILIES = (
    "exp:rate=1",
    "uniform:a=0,b=2",
    "pareto:xm=0.75,p=4",
    "pareto:xm=0.5,p=2",
    "hyperexp:w=0.5,0.5;r=0.5,2",
)
RATE_SERVICE = "pareto:xm=0.75,p=4"
RHO_BALL = ("paretodensity:xm=0.5,p=2,mass=1", "uniformdensity:a=0,b=2,mass=1", "expdensity:rate=1,mass=1")
TV_BALL = ("paretodensity:xm=0.5,p=3,mass=1", "uniformdensity:a=0,b=2,mass=1", "expdensity:rate=1,mass=1")
RATE_TIMES = np.arange(50.0, 501.0, 50.0)


def check_renewal_exactness() -> dict:
    d = make_service_dist("exp:rate=1")
    U = compute_renewal_function(d, 0.01, 100.0)
    relative = float(np.max(np.abs(U.values - (1 + U.nodes)) / (1 + U.nodes)))
    certificates = {}
    for spec in BUILT_IN_FAMILIES:
        R = compute_renewal_function(make_service_dist(spec), 0.01, 100.0)
        certificates[spec] = R.residual_cert / R.values[-1]
    uniform = make_service_dist("uniform:a=0,b=2")
    implicit = compute_renewal_function(uniform, 0.01, 10.0).values
    series_gap = float(np.max(np.abs(series_renewal_function(uniform, 0.01, 10.0) - implicit) / implicit))
    passed = relative <= 1e-3 and series_gap <= 2e-3 and all(v <= 5e-3 for v in certificates.values())
    return {
        "passed": passed,
        "max_relative_error": relative,
        "series_relative_gap": series_gap,
        "relative_certificates": certificates,
    }


def check_invariant_manifold() -> dict:
    worst = 0.0
    for spec in ("exp:rate=1", "uniform:a=0,b=2"):
        d = make_service_dist(spec)
        grid = GridParams(h=0.01, x_max=20.0, u_max=100.0)
        U = compute_renewal_function(d, grid.h, grid.u_max)
        for c in (0.5, 1.0, 2.0):
            xi = scaled_excess(d, c, grid)
            sol = solve(xi, d, grid, renewal=U)
            for t in range(21):
                worst = max(worst, prohorov(measure_at(sol, t), xi).value)
    return {"passed": worst <= 0.02, "max_rho": worst}


def _uniform_start(x_max: float = 20.0):
    d = make_service_dist("exp:rate=1")
    grid = GridParams(h=0.01, x_max=x_max, u_max=100.0)
    xi = make_measure("uniformdensity:a=0,b=2,mass=1", grid)
    return d, grid, xi


def check_closed_form_trajectory() -> dict:
    d, grid, xi = _uniform_start()
    sol = solve(xi, d, grid)
    nu_e = scaled_excess(d, 1.0, grid)
    T3 = float(np.interp(3.0, sol.u_nodes, sol.time_by_service))
    Z = total_mass(sol, 7.0 / 6.0)
    rhos = {t: prohorov(measure_at(sol, t), nu_e).value for t in (7.0 / 3.0, 3.0, 5.0)}
    gap0 = stationarity_gap(sol, 0.0).value
    gap2 = stationarity_gap(sol, 2.0).value
    passed = (
        abs(T3 - 10.0 / 3.0) <= 5e-3
        and abs(Z - 1.25) <= 5e-3
        and max(rhos.values()) <= 0.02
        and abs(gap0 - 1.0 / 3.0) <= 5e-3
        and gap2 <= 5e-3
    )
    return {"passed": passed, "T_bar_3": T3, "Z_bar_7_6": Z, "rho_to_limit": max(rhos.values()), "gap_0": gap0, "gap_2": gap2}


def _test_pairs():
    grid = GridParams(h=0.01, x_max=20.0, u_max=100.0)
    exp = make_service_dist("exp:rate=1")
    uni = make_service_dist("uniform:a=0,b=2")
    return [
        (exp, make_measure("uniformdensity:a=0,b=2,mass=1", grid), grid),
        (exp, scaled_excess(exp, 1.0, grid), grid),
        (uni, scaled_excess(uni, 1.0, grid), grid),
        (uni, make_measure("uniformdensity:a=0,b=2,mass=1", grid), grid),
    ]


def check_conservation() -> dict:
    worst_workload, worst_mass = 0.0, 0.0
    passed = True
    for d, xi, grid in _test_pairs():
        sol = solve(xi, d, grid)
        for t in np.arange(0.0, 5.01, 0.5):
            zeta = measure_at(sol, t)
            drift = abs(mass_and_moment(zeta, 1.0).value - sol.workload) / sol.workload
            mass_gap = abs(zeta.total_mass - total_mass(sol, t))
            worst_workload, worst_mass = max(worst_workload, drift), max(worst_mass, mass_gap)
            passed = passed and drift <= 5e-3 and mass_gap <= 1e-2
    return {"passed": passed, "max_relative_workload_drift": worst_workload, "max_mass_gap": worst_mass}


def check_dynamics() -> dict:
    times = np.array([0.5, 1.0, 2.0, 5.0])
    functions = standard_test_functions()
    worst = 0.0
    for d, xi, grid in _test_pairs()[:2]:
        sol = solve(xi, d, grid)
        residuals = np.abs(dynamic_residuals(sol, functions, times))
        worst = max(worst, float(np.max(residuals / (1 + times))))
    return {"passed": worst <= 1e-2, "max_scaled_residual": worst}


def check_balance_identity() -> dict:
    worst = 0.0
    for spec in BUILT_IN_FAMILIES:
        d = make_service_dist(spec)
        for g in standard_test_functions():
            worst = max(worst, abs(balance_identity_residual(d, g)))
    return {"passed": worst <= 1e-8, "max_residual": worst}


def check_weak_convergence() -> dict:
    """
    ρ(μ̄(200), κ ν_e) ≤ 0.02 for a light-tailed pair. For pareto p=2 the mass
    decays like 1/log t, so Z̄(500) ≤ 0.6 with strictly falling Z̄ stands in
    for Z̄ → 0.
    """
    d = make_service_dist("uniform:a=0,b=2")
    grid = GridParams(h=0.01, x_max=50.0, u_max=250.0)
    xi = make_measure("paretodensity:xm=0.5,p=3,mass=1", grid)
    sol = solve(xi, d, grid)
    rho = prohorov(measure_at(sol, 200.0), limit_state(sol)).value

    # Infinite excess mean: the mass drains while the workload stays put
    heavy = make_service_dist("pareto:xm=0.5,p=2")
    heavy_grid = GridParams(h=0.05, x_max=200.0, u_max=1500.0)
    start = make_measure("uniformdensity:a=0,b=2,mass=1", heavy_grid)
    degenerate = solve(start, heavy, heavy_grid)
    masses = [total_mass(degenerate, t) for t in (100.0, 200.0, 500.0)]
    drift = abs(workload_at(degenerate, 500.0) - degenerate.workload) / degenerate.workload
    passed = (
        rho <= 0.02
        and masses[0] > masses[1] > masses[2]
        and masses[2] <= 0.6
        and drift <= 0.01
        and limit_state(degenerate).is_zero
    )
    return {"passed": passed, "rho_at_200": rho, "degenerate_masses": masses, "degenerate_workload_drift": drift}


def check_prohorov_rate() -> dict:
    result = rates_experiment(RATE_SERVICE, RHO_BALL, "rho", 0.5, 4.0, RATE_TIMES, 50.0, x_max=50.0, u_max=320.0)
    report = result.tables["rates"]
    in_ball = all(entry["in_ball"] for entry in report["measures"].values())
    passed = not result.breaches and in_ball and report["slope"] is not None and report["slope"] <= -0.05
    return {"passed": passed, "slope": report["slope"], "C": report["C"], "breaches": result.breaches}


def check_tv_rate() -> dict:
    result = rates_experiment(RATE_SERVICE, TV_BALL, "tv", 0.5, 4.0, RATE_TIMES, 50.0, x_max=50.0, u_max=320.0)
    gap = gap_experiment(
        RATE_SERVICE, "uniformdensity:a=0,b=2,mass=1", np.arange(10.0, 81.0, 10.0), eps=0.5, anchor=10.0,
        x_max=50.0, u_max=320.0,
    )
    in_ball = all(entry["in_ball"] for entry in result.tables["rates"]["measures"].values())
    breaches = result.breaches + gap.breaches
    return {"passed": not breaches and in_ball, "slope": result.tables["rates"]["slope"], "breaches": breaches}


def check_blackwell() -> dict:
    values = {}
    passed = True
    for spec in ("uniform:a=0,b=2", RATE_SERVICE):
        U = compute_renewal_function(make_service_dist(spec), 0.01, 100.0)
        early, late = max_blackwell_discrepancy(U, 10.0), max_blackwell_discrepancy(U, 80.0)
        values[spec] = {"t10": early, "t80": late}
        passed = passed and late <= early + discretisation_floor(U) + 1e-9 and late <= 0.02
    return {"passed": passed, "discrepancies": values}


def brute_force_prohorov(p1, m1, p2, m2, resolution: float = 1e-9) -> float:
    """ρ between atomic measures by enumerating every subset of atoms."""

    def violated(points, masses, others, other_masses, delta):
        for size in range(1, len(points) + 1):
            for subset in itertools.combinations(range(len(points)), size):
                covered = sum(
                    m for x, m in zip(others, other_masses)
                    if any(abs(x - points[i]) < delta for i in subset)
                )
                if sum(masses[i] for i in subset) > covered + delta:
                    return True
        return False

    def feasible(delta):
        return not violated(p1, m1, p2, m2, delta) and not violated(p2, m2, p1, m1, delta)

    if feasible(0.0):
        return 0.0
    lo, hi = 0.0, max(sum(m1), sum(m2))
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _random_grid_measure(rng: np.random.Generator, h: float = 0.05, cells: int = 100) -> GridMeasure:
    masses = rng.uniform(0.0, 1.0, cells) * (rng.uniform(size=cells) < 0.3)
    masses *= rng.uniform(0.2, 2.0) / max(masses.sum(), 1e-12)
    return GridMeasure(h=h, cdf=np.concatenate(([0.0], np.cumsum(masses))))


def check_prohorov_oracle(instances: int = 200, triples: int = 100, seed: int = 7) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(instances):
        n1, n2 = rng.integers(1, 7, size=2)
        p1, p2 = rng.uniform(0, 2, n1).round(3), rng.uniform(0, 2, n2).round(3)
        m1, m2 = rng.uniform(0, 1, n1), rng.uniform(0, 1, n2)
        fast = prohorov_discrete(p1, m1, p2, m2)
        slow = brute_force_prohorov(list(p1), list(m1), list(p2), list(m2))
        worst = max(worst, abs(fast - slow))

    axioms = True
    for _ in range(triples):
        a, b, c = (_random_grid_measure(rng) for _ in range(3))
        ab, ba, bc, ac = prohorov(a, b), prohorov(b, a), prohorov(b, c), prohorov(a, c)
        slack = 3 * max(ab.error, bc.error, ac.error)
        axioms = axioms and abs(ab.value - ba.value) <= 1e-12 and ac.value <= ab.value + bc.value + slack
    return {"passed": worst <= 1e-6 + 2e-9 and axioms, "max_oracle_gap": worst, "axioms_hold": axioms}


def check_simulator_limit() -> dict:
    d, grid, xi = _uniform_start()
    sol = solve(xi, d, grid)
    table = median_distances(sol, (50, 200, 800), [1.0], range(20))
    medians = table["median_rho"].tolist()
    passed = medians[0] > medians[1] > medians[2] and medians[2] <= 0.1
    return {"passed": passed, "medians": medians}


def check_determinism() -> dict:
    d, grid, xi = _uniform_start()
    first = simulate(d, xi, 50, [0.5, 1.0], seed=11)
    second = simulate(d, xi, 50, [0.5, 1.0], seed=11)
    identical = all(np.array_equal(a, b) for a, b in zip(first.residuals, second.residuals))
    sol = solve(xi, d, grid)
    repeat = solve(xi, d, grid)
    identical = identical and np.array_equal(sol.time_by_service, repeat.time_by_service)
    identical = identical and cumulative_service(sol, 2.0) == cumulative_service(repeat, 2.0)
    return {"passed": bool(identical)}


QUICK_CHECKS: dict[str, Callable[[], dict]] = {
    "renewal_exactness": check_renewal_exactness,
    "invariant_manifold": check_invariant_manifold,
    "closed_form_trajectory": check_closed_form_trajectory,
    "conservation": check_conservation,
    "dynamics": check_dynamics,
    "balance_identity": check_balance_identity,
    "blackwell": check_blackwell,
    "prohorov_oracle": check_prohorov_oracle,
    "determinism": check_determinism,
}
SLOW_CHECKS: dict[str, Callable[[], dict]] = {
    "weak_convergence": check_weak_convergence,
    "prohorov_rate": check_prohorov_rate,
    "tv_rate": check_tv_rate,
    "simulator_limit": check_simulator_limit,
}


def run_selftest(quick: bool = False) -> dict:
    """
    Runs the acceptance checks and returns their results keyed by name, plus
    an overall ``passed`` flag. ``quick`` skips the long-horizon checks.
    """
    checks = dict(QUICK_CHECKS)
    if not quick:
        checks.update(SLOW_CHECKS)
    results = {}
    for name, check in checks.items():
        logger.info(f"Self-test: running {name}...")
        try:
            results[name] = check()
        except Exception as e:
            logger.error(f"Self-test check {name} raised: {e}")
            results[name] = {"passed": False, "error": str(e)}
        status = "passed" if results[name]["passed"] else "FAILED"
        logger.info(f"Self-test: {name} {status}")
    results = {"checks": results, "passed": all(r["passed"] for r in results.values()), "quick": quick}
    return results
