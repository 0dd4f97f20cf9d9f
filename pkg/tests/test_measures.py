import math
import unittest

import numpy as np
from scipy.integrate import quad

from fluidps.distributions import make_service_dist
from fluidps.exceptions import (
    AtomInSpecError,
    GridResampleError,
    InvalidSpecError,
    TailBoundMissingError,
)
from fluidps.measures import (
    EmpiricalTail,
    GridMeasure,
    GridParams,
    in_moment_ball,
    integrate,
    make_measure,
    mass_and_moment,
    partial_moment,
    resample,
    scaled_excess,
    tail_mass_at,
    truncated_workload,
    zero_measure,
)


class TestGridParams(unittest.TestCase):

    def test_extents_snap_to_step(self):
        grid = GridParams(h=0.1, x_max=1.04, u_max=2.96)
        self.assertAlmostEqual(grid.x_max, 1.0)
        self.assertAlmostEqual(grid.u_max, 3.0)
        self.assertEqual(grid.n_x, 10)
        self.assertEqual(grid.nodes.size, 11)

    def test_invalid_grid(self):
        for kwargs in ({"h": 0.0}, {"h": -1.0}, {"h": 1.0, "x_max": 0.5}):
            with self.subTest(**kwargs):
                with self.assertRaises(InvalidSpecError):
                    GridParams(**{"x_max": 10.0, "u_max": 10.0, **kwargs})

    def test_heavy_tailed_laws_get_the_wide_grid(self):
        light = GridParams.for_distribution(make_service_dist("exp:rate=1"))
        heavy = GridParams.for_distribution(make_service_dist("pareto:xm=0.75,p=4"))
        self.assertGreater(heavy.x_max, light.x_max)


class TestMakeMeasure(unittest.TestCase):

    def setUp(self):
        self.grid = GridParams(h=0.01, x_max=20.0, u_max=10.0)
        self.exp = make_service_dist("exp:rate=1")

    def test_uniform_density(self):
        xi = make_measure("uniformdensity:a=0,b=2,mass=1", self.grid)
        self.assertAlmostEqual(xi.total_mass, 1.0)
        self.assertAlmostEqual(xi.cdf_at(1.0), 0.5)
        self.assertAlmostEqual(mass_and_moment(xi, 1.0).value, 1.0, places=10)
        self.assertAlmostEqual(mass_and_moment(xi, 2.0).value, 4.0 / 3.0, places=10)

    def test_scaled_excess_moments(self):
        for c in (0.5, 1.0, 2.0):
            with self.subTest(c=c):
                xi = make_measure(f"scaledexcess:c={c}", self.grid, self.exp)
                self.assertAlmostEqual(xi.total_mass, c, places=12)
                self.assertAlmostEqual(mass_and_moment(xi, 1.0).value, c, places=4)
                self.assertAlmostEqual(mass_and_moment(xi, 2.0).value, 2.0 * c, places=3)

    def test_zero_measure(self):
        xi = make_measure("zero", self.grid)
        self.assertTrue(xi.is_zero)
        self.assertEqual(mass_and_moment(xi, 1.0).value, 0.0)

    def test_rejected_measures(self):
        test_cases = [
            ("atom:x=1", AtomInSpecError),
            ("dirac:x=0", AtomInSpecError),
            ("uniformdensity:a=0,b=2,mass=-1", InvalidSpecError),
            ("scaledexcess:c=1", InvalidSpecError),
            ("zero:mass=1", InvalidSpecError),
            ("gaussian:m=1", InvalidSpecError),
        ]
        for spec, error in test_cases:
            with self.subTest(spec=spec):
                with self.assertRaises(error):
                    make_measure(spec, self.grid)

    def test_csv_measure(self):
        path = "reports_test/xi.csv"
        with open(path, "w") as handle:
            handle.write("0,0\n2,1\n")
        xi = make_measure(f"csv:{path}", self.grid)
        self.assertAlmostEqual(xi.total_mass, 1.0)
        self.assertAlmostEqual(xi.cdf_at(0.5), 0.25)

    def test_csv_atom_at_origin(self):
        path = "reports_test/atom.csv"
        with open(path, "w") as handle:
            handle.write("0,0.2\n2,1\n")
        with self.assertRaises(AtomInSpecError):
            make_measure(f"csv:{path}", self.grid)

    def test_negative_mass_cdf(self):
        with self.assertRaises(InvalidSpecError):
            GridMeasure(h=0.5, cdf=np.array([0.0, 1.0, 0.5]))


class TestFunctionals(unittest.TestCase):

    def setUp(self):
        self.grid = GridParams(h=0.01, x_max=20.0, u_max=10.0)
        self.xi = make_measure("uniformdensity:a=0,b=2,mass=1", self.grid)

    def test_truncated_workload(self):
        # H(x) = x - x²/4 on [0, 2], then the full workload 1
        x = np.array([0.0, 0.5, 1.0, 2.0, 5.0])
        expected = np.array([0.0, 0.4375, 0.75, 1.0, 1.0])
        np.testing.assert_allclose(truncated_workload(self.xi, x), expected, atol=1e-10)

    def test_truncated_workload_beyond_grid_uses_tail(self):
        d = make_service_dist("exp:rate=1")
        xi = scaled_excess(d, 1.0, GridParams(h=0.01, x_max=5.0, u_max=10.0))
        # ⟨χ ∧ x, ν_e⟩ = 1 - e^{-x} for the unit exponential
        self.assertAlmostEqual(truncated_workload(xi, 8.0), 1 - math.exp(-8.0), places=4)

    def test_tail_mass_at(self):
        np.testing.assert_allclose(tail_mass_at(self.xi, [0.0, 1.0, 3.0]), [1.0, 0.5, 0.0])

    def test_partial_moment(self):
        value, error = partial_moment(self.xi, 1.0, 1.0)
        self.assertAlmostEqual(value, 0.75, places=10)
        self.assertEqual(error, 0.0)

    def test_integrate(self):
        value, error = integrate(self.xi, lambda x: np.square(x))
        self.assertAlmostEqual(value, 4.0 / 3.0, places=8)
        self.assertEqual(error, 0.0)

    def test_tail_without_model_is_refused(self):
        zeta = GridMeasure(h=0.5, cdf=np.array([0.0, 0.5, 1.0]), tail_mass=0.2)
        with self.assertRaises(TailBoundMissingError):
            mass_and_moment(zeta, 1.0)
        self.assertFalse(in_moment_ball(zeta, 10.0, 0.5))

    def test_empirical_tail(self):
        zeta = GridMeasure(h=0.5, cdf=np.array([0.0, 0.5, 1.0]), tail_mass=0.5, tail=EmpiricalTail([2.0, 3.0], 0.25))
        self.assertAlmostEqual(zeta.total_mass, 1.5)
        self.assertAlmostEqual(zeta.mass_above(2.5), 0.25)
        # grid part 0.5·0.25 + 0.5·0.75 plus 0.25·(2 + 3)
        self.assertAlmostEqual(mass_and_moment(zeta, 1.0).value, 0.5 + 1.25)

    def test_moment_balls(self):
        exp = make_service_dist("exp:rate=1")
        pareto_grid = GridParams(h=0.01, x_max=50.0, u_max=10.0)
        test_cases = [
            ("uniformdensity:a=0,b=2,mass=1", "rho", True),
            ("uniformdensity:a=0,b=2,mass=1", "tv", True),
            ("expdensity:rate=1,mass=1", "tv", True),
            ("paretodensity:xm=0.5,p=2,mass=1", "rho", True),
            ("paretodensity:xm=0.5,p=2,mass=1", "tv", False),
            ("uniformdensity:a=0,b=2,mass=5", "rho", False),
        ]
        for spec, which, expected in test_cases:
            with self.subTest(spec=spec, which=which):
                xi = make_measure(spec, pareto_grid, exp)
                self.assertEqual(in_moment_ball(xi, 4.0, 0.5, which), expected)


class TestWorkloadFunction(unittest.TestCase):

    def setUp(self):
        exp = make_service_dist("exp:rate=1")
        grid = GridParams(h=0.05, x_max=10.0, u_max=10.0)
        short = GridParams(h=0.05, x_max=5.0, u_max=10.0)
        self.measures = {
            "uniform": make_measure("uniformdensity:a=0,b=2,mass=1", grid),
            "exp": make_measure("expdensity:rate=1,mass=2", grid),
            "pareto": make_measure("paretodensity:xm=0.5,p=3,mass=1", grid),
            "excess with tail": scaled_excess(exp, 1.0, short),
        }

    def test_derivative_is_tail_mass(self):
        for name, zeta in self.measures.items():
            with self.subTest(measure=name):
                step = 0.5 * zeta.h
                x = np.linspace(zeta.h, zeta.x_max - zeta.h, 157)
                slope = (truncated_workload(zeta, x + step) - truncated_workload(zeta, x - step)) / (2 * step)
                gap = np.max(np.abs(slope - tail_mass_at(zeta, x)))
                self.assertLessEqual(gap, 2 * zeta.h * zeta.total_mass)

    def test_matches_quadrature_of_truncated_identity(self):
        for name, zeta in self.measures.items():
            density = zeta.cell_masses / zeta.h
            for x in (0.3, 1.0, 2.5, 0.9 * zeta.x_max):
                with self.subTest(measure=name, x=x):
                    direct = sum(
                        rho * quad(lambda y: min(y, x), left, left + zeta.h)[0]
                        for left, rho in zip(zeta.nodes[:-1], density)
                        if rho > 0
                    )
                    # mass past x_max sits above x, where χ ∧ x = x
                    direct += x * zeta.tail_mass
                    self.assertAlmostEqual(truncated_workload(zeta, x), direct, delta=1e-6)


class TestResample(unittest.TestCase):

    def test_refine_and_cut(self):
        xi = make_measure("uniformdensity:a=0,b=2,mass=1", GridParams(h=0.02, x_max=4.0, u_max=1.0))
        fine = resample(xi, 0.01, 1.0)
        self.assertAlmostEqual(fine.h, 0.01)
        self.assertAlmostEqual(fine.x_max, 1.0)
        self.assertAlmostEqual(fine.tail_mass, 0.5)
        self.assertAlmostEqual(fine.total_mass, 1.0)

    def test_incompatible_steps(self):
        xi = zero_measure(0.02, 4.0)
        with self.assertRaises(GridResampleError):
            resample(xi, 0.03, 4.0)
        with self.assertRaises(GridResampleError):
            resample(xi, 0.01, 5.0)


if __name__ == "__main__":
    unittest.main()
