from pathlib import Path

import pytest

from reservelab import load_triangle

DATA_DIR = Path(__file__).resolve().parents[1] / "data"

# Published values for the bundled UK motor triangle (currency units).
GOLDEN_RESERVE = 28_655_773.0
GOLDEN_SQRT_MSEP_POISSON = 11_622.0
GOLDEN_SQRT_MSEP_QUASI = 1_708_196.0
GOLDEN_SQRT_MSEP_MACK = 1_417_267.0


@pytest.fixture(scope="session")
def uk_motor_path():
    return DATA_DIR / "uk_motor.csv"


@pytest.fixture(scope="session")
def uk_motor(uk_motor_path):
    """The bundled triangle, scaled to currency units."""
    return load_triangle(uk_motor_path, scale=1000.0)


@pytest.fixture(scope="session")
def uk_motor_thousands(uk_motor_path):
    """The bundled triangle as stored (in 000's)."""
    return load_triangle(uk_motor_path, scale=1.0)
