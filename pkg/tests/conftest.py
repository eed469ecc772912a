import os
from pathlib import Path

import numpy as np
import pytest

from core.fock_operator import HartreeFockSystem
from core.grid import BasisFamily, NucleusList, build_uniform_grid

REPO_ROOT = Path(__file__).resolve().parent.parent
BASE_CONFIG = str(REPO_ROOT / "config" / "solver_config.json")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("HF_CACHE_DIR", str(tmp_path / "cache"))
    yield


def make_system(dims, h=1.0, degree=0, nuclei=((2.0, (0, 0, 0)),), eta=None):
    grid = build_uniform_grid(*dims, h, degree)
    basis = BasisFamily(degree)
    eta = eta if eta is not None else (1e-10 if degree == 0 else 1e-8)
    return HartreeFockSystem.build(grid, basis, NucleusList.from_entries(nuclei), eta)


@pytest.fixture(scope="session")
def helium_p0():
    """One Z=2 nucleus on a 4^3 indicator grid"""
    return make_system((4, 4, 4), h=1.0)


@pytest.fixture(scope="session")
def tiny_p0():
    """N = 16 indicator grid for dense oracles"""
    return make_system((2, 2, 4), h=1.0, nuclei=((1.0, (0, 0, 0)),))


@pytest.fixture(scope="session")
def hat_p1():
    """One Z=1 nucleus on a 3^3 hat grid"""
    return make_system((3, 3, 3), h=1.0, degree=1, nuclei=((1.0, (0, 0, 0)),))


@pytest.fixture(scope="session")
def two_center_p0():
    return make_system((6, 4, 4), h=1.0, nuclei=((2.0, (0, 0, 0)), (2.0, (3, 0, 0))))


def dense_of(apply, N):
    """Columns of a linear map applied to the identity"""
    return np.column_stack([apply(e) for e in np.eye(N)])


def pytest_configure(config):
    os.environ.setdefault("HF_LOG_LEVEL", "WARNING")
