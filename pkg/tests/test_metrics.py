import math
import unittest

import numpy as np
import pytest

from fluidps.distributions import make_service_dist
from fluidps.exceptions import InsufficientSamplesError, ValidationError
from fluidps.measures import GridMeasure, GridParams, make_measure, scaled_excess
from fluidps.metrics import (
    fit_rate,
    power_bound,
    predicted_prohorov_envelope,
    prohorov,
    prohorov_discrete,
    prohorov_rate_constant,
    total_variation,
)
from fluidps.validation import brute_force_prohorov


# --- Prohorov between atomic measures ---
@pytest.mark.parametrize(
    "p1, m1, p2, m2, expected",
    [
        ([0.0], [1.0], [0.3], [1.0], 0.3),
        ([0.0], [1.0], [2.0], [1.0], 1.0),
        ([1.0], [1.0], [1.0], [0.5], 0.5),
        ([0.0], [1.0], [], [], 1.0),
        ([0.0, 1.0], [0.5, 0.5], [1.0, 0.0], [0.5, 0.5], 0.0),
        ([0.0, 1.0], [0.5, 0.5], [0.1, 1.2], [0.5, 0.5], 0.2),
    ],
)
def test_prohorov_discrete_known_values(p1, m1, p2, m2, expected):
    assert prohorov_discrete(p1, m1, p2, m2) == pytest.approx(expected, abs=1e-8)


def test_prohorov_discrete_matches_subset_enumeration():
    rng = np.random.Generator(np.random.Philox(3))
    for _ in range(40):
        n1, n2 = rng.integers(1, 4, size=2)
        p1, p2 = rng.uniform(0, 2, n1).round(3), rng.uniform(0, 2, n2).round(3)
        m1, m2 = rng.uniform(0, 1, n1), rng.uniform(0, 1, n2)
        fast = prohorov_discrete(p1, m1, p2, m2)
        slow = brute_force_prohorov(list(p1), list(m1), list(p2), list(m2))
        assert fast == pytest.approx(slow, abs=1e-6)


def test_prohorov_discrete_merges_repeated_atoms():
    merged = prohorov_discrete([0.5, 0.5], [0.25, 0.25], [0.5], [0.5])
    assert merged <= 1e-8


def test_prohorov_discrete_rejects_bad_atoms():
    with pytest.raises(ValidationError):
        prohorov_discrete([0.0, 1.0], [1.0], [0.0], [1.0])
    with pytest.raises(ValidationError):
        prohorov_discrete([-1.0], [1.0], [0.0], [1.0])
    with pytest.raises(ValidationError):
        prohorov_discrete([1.0], [-1.0], [0.0], [1.0])


# --- Prohorov and TV between grid measures ---
class TestGridDistances(unittest.TestCase):

    def setUp(self):
        self.grid = GridParams(h=0.01, x_max=5.0, u_max=10.0)
        self.uniform = make_measure("uniformdensity:a=0,b=2,mass=1", self.grid)
        self.heavier = make_measure("uniformdensity:a=0,b=2,mass=1.5", self.grid)

    def test_distance_to_itself(self):
        rho = prohorov(self.uniform, self.uniform)
        self.assertLessEqual(rho.value, 0.25 * self.grid.h)
        self.assertAlmostEqual(rho.error, 2.25 * self.grid.h)
        tv = total_variation(self.uniform, self.uniform)
        self.assertEqual(tv, (0.0, 0.0))

    def test_mass_difference(self):
        rho = prohorov(self.uniform, self.heavier)
        self.assertLessEqual(abs(rho.value - 0.5), 0.25 * self.grid.h + 1e-12)
        self.assertAlmostEqual(total_variation(self.uniform, self.heavier).value, 0.5)

    def test_distance_to_zero_measure(self):
        zero = make_measure("zero", self.grid)
        self.assertLessEqual(abs(prohorov(self.uniform, zero).value - 1.0), 0.25 * self.grid.h + 1e-12)

    def test_grids_are_brought_together(self):
        coarse = make_measure("uniformdensity:a=0,b=2,mass=1", GridParams(h=0.02, x_max=8.0, u_max=10.0))
        rho = prohorov(coarse, self.uniform)
        self.assertLessEqual(rho.value, rho.error)

    def test_tail_enters_the_total_variation_bar(self):
        d = make_service_dist("exp:rate=1")
        tv = total_variation(scaled_excess(d, 1.0, self.grid), scaled_excess(d, 2.0, self.grid))
        self.assertAlmostEqual(tv.value, 1.0, places=12)
        self.assertAlmostEqual(tv.error, 2.0 * math.exp(-5.0), places=12)

    def test_metric_axioms_on_random_measures(self):
        rng = np.random.Generator(np.random.Philox(11))

        def random_measure():
            masses = rng.uniform(0.0, 1.0, 60) * (rng.uniform(size=60) < 0.3)
            masses *= rng.uniform(0.2, 2.0) / max(masses.sum(), 1e-12)
            return GridMeasure(h=0.05, cdf=np.concatenate(([0.0], np.cumsum(masses))))

        for _ in range(10):
            a, b, c = random_measure(), random_measure(), random_measure()
            ab, ba, bc, ac = prohorov(a, b), prohorov(b, a), prohorov(b, c), prohorov(a, c)
            self.assertEqual(ab.value, ba.value)
            self.assertLessEqual(ac.value, ab.value + bc.value + 3 * max(ab.error, bc.error, ac.error))

    def test_total_variation_dominates(self):
        rng = np.random.Generator(np.random.Philox(17))

        def random_measure():
            masses = rng.uniform(0.0, 1.0, 80) * (rng.uniform(size=80) < 0.4)
            masses *= rng.uniform(0.1, 2.0) / max(masses.sum(), 1e-12)
            return GridMeasure(h=0.05, cdf=np.concatenate(([0.0], np.cumsum(masses))))

        for _ in range(20):
            a, b = random_measure(), random_measure()
            rho, tv = prohorov(a, b), total_variation(a, b)
            self.assertLessEqual(rho.value, tv.value + rho.error + tv.error)
            self.assertGreaterEqual(tv.value, abs(a.total_mass - b.total_mass) - 1e-12)

    def test_uniform_against_exponential_excess(self):
        grid = GridParams(h=0.01, x_max=20.0, u_max=10.0)
        excess = scaled_excess(make_service_dist("exp:rate=1"), 1.0, grid)
        uniform = make_measure("uniformdensity:a=0,b=2,mass=1", grid)
        # densities cross at ln 2: 2(1/2 - ln2/2) + 2e^{-2}
        expected = 1.0 - math.log(2.0) + 2.0 * math.exp(-2.0)
        self.assertAlmostEqual(total_variation(uniform, excess).value, expected, delta=2e-2)

    def test_translates_converge_weakly(self):
        limit = make_measure("uniformdensity:a=1,b=2,mass=1", self.grid)
        points = np.linspace(0.5, 2.5, 10)
        distances, cdf_gaps = [], []
        for shift in (0.5, 0.2, 0.1, 0.05, 0.02):
            zeta = make_measure(f"uniformdensity:a={1 + shift:g},b={2 + shift:g},mass=1", self.grid)
            rho = prohorov(zeta, limit)
            distances.append(rho.value)
            cdf_gaps.append(np.max(np.abs(zeta.cdf_at(points) - limit.cdf_at(points))))
            self.assertLessEqual(rho.value, shift + rho.error)
        self.assertEqual(distances, sorted(distances, reverse=True))
        self.assertEqual(cdf_gaps, sorted(cdf_gaps, reverse=True))
        self.assertLessEqual(cdf_gaps[-1], 0.02 + 1e-9)


# --- Rates ---
TIMES = np.arange(50.0, 501.0, 50.0)


def test_fit_rate_recovers_a_power_law():
    report = fit_rate(TIMES, 3.0 * TIMES**-0.5)
    assert report.slope == pytest.approx(-0.5, abs=1e-10)
    assert report.constant == pytest.approx(3.0, rel=1e-9)
    assert report.samples == TIMES.size
    assert report.window == (50.0, 500.0)
    np.testing.assert_allclose(report.bound(TIMES), 3.0 * TIMES**-0.5, rtol=1e-9)
    payload = report.to_dict()
    assert payload["slope"] == report.slope
    assert payload["excluded_zero_samples"] == 0
    assert "predicted" not in payload


def test_fit_rate_constant_majorizes_the_samples():
    distances = 2.0 * TIMES**-0.3 * (1 + 0.1 * np.sin(TIMES))
    report = fit_rate(TIMES, distances)
    assert np.all(distances <= report.bound(TIMES) * (1 + 1e-12))


def test_fit_rate_tolerates_small_oscillation():
    times = np.arange(10.0, 101.0, 10.0)
    report = fit_rate(times, 4.0 * times**-0.5 * (1 + 0.01 * np.sin(times)))
    assert -0.52 <= report.slope <= -0.48

    flat = fit_rate(times, np.full_like(times, 0.2))
    assert flat.slope == pytest.approx(0.0, abs=1e-12)
    assert flat.constant == pytest.approx(0.2)


def test_fit_rate_window_and_zero_samples():
    distances = 3.0 * TIMES**-0.5
    distances[-1] = 0.0
    report = fit_rate(TIMES, distances)
    assert report.excluded == 1
    assert report.slope == pytest.approx(-0.5, abs=1e-10)

    windowed = fit_rate(TIMES, 3.0 * TIMES**-0.5, window=(100.0, 400.0))
    assert windowed.samples == 7


def test_fit_rate_exact_convergence():
    report = fit_rate(TIMES, np.zeros_like(TIMES))
    assert report.exact_convergence
    assert report.to_dict()["slope"] is None
    assert report.constant == 0.0


class TestFitRateErrors(unittest.TestCase):

    def test_rejections(self):
        test_cases = [
            (TIMES[:4], TIMES[:4] ** -0.5, InsufficientSamplesError),
            (TIMES, TIMES**-0.5, InsufficientSamplesError, (400.0, 500.0)),
            (TIMES[::-1], TIMES**-0.5, ValidationError),
            (TIMES, -(TIMES**-0.5), ValidationError),
            (TIMES, TIMES[:5], ValidationError),
        ]
        for case in test_cases:
            times, distances, error = case[:3]
            window = case[3] if len(case) > 3 else None
            with self.subTest(error=error.__name__, window=window):
                with self.assertRaises(error):
                    fit_rate(times, distances, window)

    def test_too_few_nonzero_samples(self):
        distances = np.zeros_like(TIMES)
        distances[:3] = 1.0
        with self.assertRaises(InsufficientSamplesError):
            fit_rate(TIMES, distances)


def test_power_bound():
    distances = 2.0 * TIMES**-0.5
    check = power_bound(TIMES, distances, -0.5, 50.0)
    assert check.holds
    assert check.constant == pytest.approx(2.0)

    distances[3] *= 2.0
    check = power_bound(TIMES, distances, -0.5, 50.0)
    assert check.violations == [200.0]
    errors = np.full_like(distances, 1.0)
    assert power_bound(TIMES, distances, -0.5, 50.0, errors).holds
    with pytest.raises(ValidationError):
        power_bound(TIMES, distances, -0.5, 75.0)


def test_prohorov_rate_constant():
    for M, C in ((4.0, 1.0), (1.0, 3.0), (10.0, 2.5)):
        y = prohorov_rate_constant(M, C)
        assert y > 0
        assert y * y - (M + 4 * C) * y - 2 * C == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValidationError):
        prohorov_rate_constant(0.0, 1.0)
    with pytest.raises(ValidationError):
        prohorov_rate_constant(4.0, 0.5)


def test_predicted_envelope():
    predicted = predicted_prohorov_envelope([1.0, 4.0], [0.5, 0.1], M=4.0, eps=0.5)
    assert predicted["discrepancy_constant"] == 1.0
    assert predicted["constant"] == pytest.approx(prohorov_rate_constant(4.0, 1.0))
    assert predicted["exponent"] == -0.125

    larger = predicted_prohorov_envelope([1.0, 4.0], [3.0, 0.1], M=4.0, eps=0.5)
    assert larger["discrepancy_constant"] == 3.0
