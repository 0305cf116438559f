import numpy as np
import pytest

from symswitch.casestudies import room_certificates, room_system, spiral_certificates, spiral_system


@pytest.fixture(scope="session")
def room():
    return room_system()


@pytest.fixture(scope="session")
def room_certs(room):
    return room_certificates(room)


@pytest.fixture(scope="session")
def spiral():
    return spiral_system()


@pytest.fixture(scope="session")
def spiral_certs(spiral):
    return spiral_certificates(spiral)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room_model(room):
    from symswitch.abstraction import build_seq
    from symswitch.casestudies import ROOM_X_S
    from symswitch.quantizer import SeqParams
    return build_seq(room, SeqParams(30.0, 13, tuple(ROOM_X_S), 1.0))


@pytest.fixture(scope="session")
def spiral_model(spiral):
    from symswitch.abstraction import build_grid_dwell
    from symswitch.quantizer import GridParams
    return build_grid_dwell(spiral, GridParams(0.5, 0.0083, 1.2, 4))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
