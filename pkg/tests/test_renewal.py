import unittest

import numpy as np
import pytest

from fluidps.distributions import make_service_dist
from fluidps.exceptions import (
    CertificateError,
    DivergentSchemeError,
    GridMismatchError,
    InvalidSpecError,
    OutOfRangeError,
    RateUndefinedError,
)
from fluidps.renewal import (
    RenewalFunction,
    blackwell_discrepancy,
    compute_renewal_function,
    convolve_with_renewal,
    discretisation_floor,
    elementary_renewal_gap,
    max_blackwell_discrepancy,
    series_renewal_function,
)


@pytest.fixture(scope="module")
def exp_renewal():
    return compute_renewal_function(make_service_dist("exp:rate=1"), 0.01, 20.0)


@pytest.fixture(scope="module")
def uniform_renewal():
    return compute_renewal_function(make_service_dist("uniform:a=0,b=2"), 0.01, 20.0)


def test_exponential_renewal_function_is_linear(exp_renewal):
    # ν_e = ν for exp(1), so U_e(u) = 1 + u
    np.testing.assert_allclose(exp_renewal.values, 1.0 + exp_renewal.nodes, rtol=1e-3)
    assert exp_renewal.values[0] == 1.0
    assert exp_renewal.renewal_rate == pytest.approx(1.0)
    assert discretisation_floor(exp_renewal) < 1e-3
    assert elementary_renewal_gap(exp_renewal) == pytest.approx(1.0 / 20.0, abs=1e-3)


def test_call_interpolates_and_checks_range(exp_renewal):
    assert exp_renewal(2.5) == pytest.approx(3.5, rel=1e-3)
    assert exp_renewal(np.array([0.0, 1.0])).shape == (2,)
    for u in (-0.1, 25.0):
        with pytest.raises(OutOfRangeError):
            exp_renewal(u)


def test_series_agrees_with_implicit_scheme(uniform_renewal):
    d = make_service_dist("uniform:a=0,b=2")
    series = series_renewal_function(d, 0.01, 10.0)
    n = series.size
    np.testing.assert_allclose(series, uniform_renewal.values[:n], rtol=2e-3)


@pytest.mark.parametrize("spec", ["exp:rate=1", "uniform:a=0,b=2", "hyperexp:w=0.5,0.5;r=0.5,2"])
def test_residual_certificate_is_small(spec):
    U = compute_renewal_function(make_service_dist(spec), 0.01, 50.0)
    assert U.residual_cert <= 5e-3 * U.values[-1]
    assert np.all(np.diff(U.values) >= 0)


def test_blackwell_discrepancy_decays(uniform_renewal):
    early = max_blackwell_discrepancy(uniform_renewal, 0.0)
    late = max_blackwell_discrepancy(uniform_renewal, 15.0)
    assert late < early
    assert late <= 0.02
    assert abs(blackwell_discrepancy(uniform_renewal, 15.0, 0.5)) <= late + 1e-12


def test_convolution_with_one_gives_the_renewal_function(exp_renewal):
    ones = np.ones_like(exp_renewal.values)
    np.testing.assert_allclose(convolve_with_renewal(exp_renewal, ones), exp_renewal.values, rtol=1e-12)


class TestRenewalErrors(unittest.TestCase):

    def setUp(self):
        self.exp = make_service_dist("exp:rate=1")

    def test_invalid_grid(self):
        for h, u_max in ((0.0, 10.0), (-0.1, 10.0), (0.01, 0.5)):
            with self.subTest(h=h, u_max=u_max):
                with self.assertRaises(InvalidSpecError):
                    compute_renewal_function(self.exp, h, u_max)

    def test_divergent_scheme(self):
        with self.assertRaises(DivergentSchemeError):
            compute_renewal_function(make_service_dist("exp:rate=10"), 0.3, 3.0)

    def test_certificate_threshold(self):
        with self.assertRaises(CertificateError):
            compute_renewal_function(self.exp, 0.1, 10.0, tolerance=1e-12)

    def test_zero_renewal_rate(self):
        U = RenewalFunction(
            h=0.5, u_max=2.0, values=np.linspace(1.0, 3.0, 5), density=np.ones(5),
            renewal_rate=0.0, residual_cert=0.0, tolerance=5e-3,
        )
        with self.assertRaises(RateUndefinedError):
            blackwell_discrepancy(U, 0.0, 0.5)
        with self.assertRaises(RateUndefinedError):
            max_blackwell_discrepancy(U, 0.0)

    def test_blackwell_ranges(self):
        U = compute_renewal_function(self.exp, 0.1, 5.0)
        test_cases = [(0.0, 1.5), (0.0, -0.1), (4.5, 1.0), (-1.0, 0.5)]
        for t, s in test_cases:
            with self.subTest(t=t, s=s):
                with self.assertRaises(OutOfRangeError):
                    blackwell_discrepancy(U, t, s)
        with self.assertRaises(OutOfRangeError):
            max_blackwell_discrepancy(U, 4.5)

    def test_convolution_grid_checks(self):
        U = compute_renewal_function(self.exp, 0.1, 5.0)
        with self.assertRaises(GridMismatchError):
            convolve_with_renewal(U, np.ones(3))
        with self.assertRaises(GridMismatchError):
            convolve_with_renewal(U, np.ones_like(U.values), h=0.2)


if __name__ == "__main__":
    unittest.main()
