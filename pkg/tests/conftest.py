from pathlib import Path

import numpy as np
import pytest

from lapopf.case_io import load_case

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURES / name


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def case2():
    return load_case(FIXTURES / "case2.json")


@pytest.fixture(scope="session")
def case9():
    return load_case(FIXTURES / "case9.m")


@pytest.fixture(scope="session")
def case14():
    return load_case(FIXTURES / "case14.m")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_voltages(rng, n, ref=None, spread=0.3):
    """Voltage phasors near flat start; ``vq[ref] = 0`` when ``ref`` is given."""
    from lapopf.network import VoltageVector

    vm = 1.0 + spread * (rng.random(n) - 0.5)
    va = spread * (rng.random(n) - 0.5)
    if ref is not None:
        va = va - va[ref]
    return VoltageVector.from_complex(vm * np.exp(1j * va))
