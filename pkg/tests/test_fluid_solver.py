import numpy as np
import pytest

from fluidps.distributions import TestFunction, make_service_dist, standard_test_functions
from fluidps.exceptions import (
    DegenerateSolutionError,
    GridMismatchError,
    OutOfRangeError,
    RateUndefinedError,
    TestFunctionError,
)
from fluidps.fluid_solver import (
    cumulative_service,
    dynamic_residual,
    dynamic_residuals,
    interval_discrepancy,
    limit_state,
    linear_lower_bound,
    measure_at,
    solve,
    stationarity_gap,
    total_mass,
    upper_envelope_holds,
    workload_at,
)
from fluidps.measures import GridParams, make_measure, zero_measure
from fluidps.metrics import prohorov


# exp(1) service from the uniform density on [0, 2]:
#   T̄'(u) = H'(u) + H(u),  T̄(u) = u + u²/4 - u³/12 on [0, 2],  T̄(u) = u + 1/3 after.
def test_closed_form_trajectory(uniform_solution):
    sol = uniform_solution
    assert sol.workload == pytest.approx(1.0, abs=1e-10)
    assert sol.limit_mass == pytest.approx(1.0, abs=1e-10)
    assert np.interp(3.0, sol.u_nodes, sol.time_by_service) == pytest.approx(10.0 / 3.0, abs=5e-3)
    assert cumulative_service(sol, 7.0 / 6.0) == pytest.approx(1.0, abs=5e-3)
    assert total_mass(sol, 7.0 / 6.0) == pytest.approx(1.25, abs=5e-3)
    assert total_mass(sol, 0.0) == pytest.approx(1.0)
    assert total_mass(sol, 10.0) == pytest.approx(1.0, abs=5e-3)


def test_cumulative_service_is_increasing(uniform_solution):
    times = np.linspace(0.0, 50.0, 101)
    service = cumulative_service(uniform_solution, times)
    assert service[0] == 0.0
    assert np.all(np.diff(service) > 0)
    np.testing.assert_allclose(service[times >= 5.0], times[times >= 5.0] - 1.0 / 3.0, atol=5e-3)


def test_horizon_and_extrapolation(uniform_solution):
    sol = uniform_solution
    with pytest.raises(OutOfRangeError):
        cumulative_service(sol, -1.0)
    with pytest.raises(OutOfRangeError):
        cumulative_service(sol, sol.horizon + 10.0)

    extended = solve(sol.xi, sol.dist, sol.grid, renewal=sol.renewal, extrapolate=True)
    value = cumulative_service(extended, extended.horizon + 10.0)
    assert value == pytest.approx(sol.renewal.u_max + 10.0, rel=1e-3)
    assert total_mass(extended, extended.horizon + 10.0) == pytest.approx(1.0)
    with pytest.raises(OutOfRangeError):
        measure_at(extended, extended.horizon + 10.0)


def test_state_converges_to_the_excess_law(uniform_solution):
    limit = limit_state(uniform_solution)
    assert limit.total_mass == pytest.approx(1.0)
    for t in (7.0 / 3.0, 3.0, 5.0):
        assert prohorov(measure_at(uniform_solution, t), limit).value <= 0.02
    assert interval_discrepancy(uniform_solution, 5.0) <= 1e-2
    assert interval_discrepancy(uniform_solution, 0.0) > 0.1


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0, 3.0, 5.0])
def test_conservation(uniform_solution, t):
    state = measure_at(uniform_solution, t)
    assert workload_at(uniform_solution, t) == pytest.approx(1.0, rel=5e-3)
    assert state.total_mass == pytest.approx(total_mass(uniform_solution, t), abs=1e-2)


def test_measure_at_zero_is_the_initial_measure(uniform_solution):
    state = measure_at(uniform_solution, 0.0)
    np.testing.assert_allclose(state.cdf, uniform_solution.xi.cdf, atol=1e-12)


def test_invariant_state_stays_put(invariant_solution):
    xi = invariant_solution.xi
    assert cumulative_service(invariant_solution, 4.0) == pytest.approx(4.0, abs=5e-3)
    for t in (1.0, 5.0, 20.0):
        assert prohorov(measure_at(invariant_solution, t), xi).value <= 0.02
        assert total_mass(invariant_solution, t) == pytest.approx(1.0, abs=5e-3)


def test_dynamic_residuals_are_small(uniform_solution):
    functions = standard_test_functions()
    times = np.array([0.5, 1.0, 2.0])
    residuals = dynamic_residuals(uniform_solution, functions, times)
    assert residuals.shape == (len(functions), times.size)
    assert np.max(np.abs(residuals) / (1 + times)) <= 1e-2
    assert dynamic_residual(uniform_solution, functions[0], 1.0) == pytest.approx(residuals[0, 1], abs=1e-12)


def test_dynamic_residuals_reject_bad_test_functions(uniform_solution):
    bad = TestFunction("linear", lambda x: x, lambda x: np.ones_like(x), 1.0, 1.0)
    with pytest.raises(TestFunctionError):
        dynamic_residuals(uniform_solution, [bad], [1.0])


def test_stationarity_gap(uniform_solution):
    # ∫_0^2 (u/2 - u²/4) du = 1/3
    gap = stationarity_gap(uniform_solution, 0.0)
    assert gap.value == pytest.approx(1.0 / 3.0, abs=5e-3)
    assert gap.lower_estimate
    assert gap.horizon == pytest.approx(uniform_solution.renewal.u_max)
    assert stationarity_gap(uniform_solution, 2.0).value <= 5e-3
    assert stationarity_gap(uniform_solution, 0.55).value <= gap.value
    for r in (-1.0, 1000.0):
        with pytest.raises(OutOfRangeError):
            stationarity_gap(uniform_solution, r)


def test_linear_lower_bound(uniform_solution):
    times = np.array([0.1, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 50.0])
    check = linear_lower_bound(uniform_solution, 0.1, times)
    assert check.holds.tolist() == [True, False, False, False, True, True, True, True]
    assert check.onset == 4.0
    with pytest.raises(RateUndefinedError):
        linear_lower_bound(uniform_solution, -2.0, times)


def test_upper_envelope(uniform_solution, invariant_solution):
    assert upper_envelope_holds(uniform_solution)
    assert upper_envelope_holds(invariant_solution)


def test_zero_solution(uniform_solution, small_grid):
    sol = solve(zero_measure(small_grid.h, small_grid.x_max), uniform_solution.dist, small_grid,
                renewal=uniform_solution.renewal)
    assert sol.is_zero
    assert total_mass(sol, 5.0) == 0.0
    assert cumulative_service(sol, 1e6) == 0.0
    assert measure_at(sol, 3.0).is_zero
    assert workload_at(sol, 3.0) == 0.0
    assert limit_state(sol).is_zero
    with pytest.raises(DegenerateSolutionError):
        dynamic_residuals(sol, standard_test_functions(), [1.0])
    with pytest.raises(DegenerateSolutionError):
        linear_lower_bound(sol, 0.1, [1.0])


def test_grid_mismatch(uniform_solution, small_grid):
    coarse = make_measure("uniformdensity:a=0,b=2,mass=1", GridParams(h=0.02, x_max=20.0, u_max=100.0))
    with pytest.raises(GridMismatchError):
        solve(coarse, uniform_solution.dist, small_grid)
    with pytest.raises(GridMismatchError):
        solve(coarse, uniform_solution.dist, renewal=uniform_solution.renewal)


def test_heavy_tailed_limit_is_zero():
    # Pareto with p = 2 has ν_e without a first moment, so β_e = 0 and κ = 0
    d = make_service_dist("pareto:xm=0.5,p=2")
    grid = GridParams(h=0.05, x_max=50.0, u_max=100.0)
    sol = solve(make_measure("uniformdensity:a=0,b=2,mass=1", grid), d, grid)
    assert sol.limit_mass == 0.0
    assert limit_state(sol).is_zero
    masses = total_mass(sol, np.array([5.0, 15.0, 40.0]))
    assert np.all(np.diff(masses) < 0)
