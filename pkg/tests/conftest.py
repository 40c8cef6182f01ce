"""Shared fixtures. Ground states are expensive, so they are built once per session."""

import logging

import pytest

from nlslab.fields import Grid3
from nlslab.ground_state import GridGroundState, constants, default_profile

logging.getLogger("nlslab").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def profile():
    return default_profile()


@pytest.fixture(scope="session")
def consts(profile):
    return constants(profile)


@pytest.fixture(scope="session")
def grid64():
    return Grid3(64, 8.0)


@pytest.fixture(scope="session")
def ref64(grid64):
    """Petviashvili ground state on the 64^3, L = 8 grid (dx = 0.25)."""
    return GridGroundState.from_petviashvili(grid64)


@pytest.fixture(scope="session")
def grid128():
    return Grid3(128, 8.0)


@pytest.fixture(scope="session")
def grid256():
    return Grid3(256, 12.0)


@pytest.fixture(scope="session")
def q256(grid256, profile):
    """Shooting profile sampled on 256^3, L = 12 (dx = 0.094); Q(12)/Q(0) is 3e-7."""
    from nlslab.ground_state import soliton

    return soliton(grid256, profile, tail_tol=1e-6)


@pytest.fixture(scope="session")
def pet256(grid256):
    """Petviashvili ground state on 256^3, L = 12; the grid fine enough for 1e-5 agreement."""
    from nlslab.ground_state import solve_petviashvili

    return solve_petviashvili(grid256)


@pytest.fixture(scope="session")
def builtin_reports():
    """All builtin scenarios, run once per session (several minutes)."""
    from nlslab.experiments import BUILTINS, builtin, run

    return {name: run(builtin(name)) for name in BUILTINS}
