import os
import shutil
import pytest
from fluidps.config import settings
from fluidps.distributions import make_service_dist
from fluidps.fluid_solver import solve
from fluidps.measures import GridParams, make_measure, scaled_excess


@pytest.fixture(scope="session")
def test_output_dir():
    """Creates a directory for test reports."""
    output_dir = "./reports_test"
    os.makedirs(output_dir, exist_ok=True)
    yield output_dir


@pytest.fixture(autouse=True)
def clean_output_dir(test_output_dir):
    """Cleans the reports_test directory before each test."""
    output_dir = test_output_dir
    if os.path.exists(output_dir):
        for item in os.listdir(output_dir):
            item_path = os.path.join(output_dir, item)
            if os.path.isdir(item_path):
                shutil.rmtree(item_path)
            else:
                os.remove(item_path)


@pytest.fixture(autouse=True)
def monkeypatch_settings(monkeypatch, test_output_dir):
    """Monkeypatches the settings for the test environment."""
    monkeypatch.setattr(settings, "OUTPUT_DIR", test_output_dir)
    monkeypatch.setattr(settings, "THREADS", 1)


# --- Shared numerical fixtures ---
@pytest.fixture(scope="session")
def small_grid():
    return GridParams(h=0.01, x_max=20.0, u_max=100.0)


@pytest.fixture(scope="session")
def exp_dist():
    return make_service_dist("exp:rate=1")


@pytest.fixture(scope="session")
def uniform_start(small_grid):
    return make_measure("uniformdensity:a=0,b=2,mass=1", small_grid)


@pytest.fixture(scope="session")
def uniform_solution(exp_dist, uniform_start, small_grid):
    """exp(1) service started from the uniform density on [0, 2]."""
    return solve(uniform_start, exp_dist, small_grid)


@pytest.fixture(scope="session")
def invariant_solution(exp_dist, small_grid):
    """exp(1) service started from its own excess law."""
    return solve(scaled_excess(exp_dist, 1.0, small_grid), exp_dist, small_grid)
