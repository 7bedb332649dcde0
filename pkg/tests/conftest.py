import numpy as np
import pytest

from djds.benchmarks import (
    TEN_ROOM_SETUP, ten_room_inputs, ten_room_model, ten_room_region, ten_room_source,
    tiny_model, tiny_region,
)
from djds.abstraction import AbstractionParams, make_sigma_bound
from djds.model import quantize
from djds.simulate import SimConfig, window_grid
from djds.stability import derive_envelope, vk_search

from helpers import ACCEPTANCE_LINES, tiny_params


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ten_room():
    return ten_room_model()


@pytest.fixture(scope="session")
def ten_room_cert(ten_room):
    return vk_search(ten_room, np.eye(10))


@pytest.fixture(scope="session")
def ten_room_env(ten_room, ten_room_cert):
    return derive_envelope(ten_room_cert, ten_room.tau)


@pytest.fixture(scope="session")
def ten_room_cfg():
    return SimConfig(0.3, seed=7)


@pytest.fixture(scope="session")
def ten_room_params(ten_room, ten_room_cfg):
    step = window_grid(ten_room.tau, ten_room_cfg.dt)[1]
    return AbstractionParams(TEN_ROOM_SETUP["h"], 14, ten_room_source(ten_room.tau, step),
                             quantize(ten_room_inputs(), 0.0))


@pytest.fixture(scope="session")
def ten_room_bound(ten_room, ten_room_cert, ten_room_env, ten_room_params):
    return make_sigma_bound(ten_room_cert, ten_room_env, ten_room, ten_room_region(),
                            ten_room_params.zeta_s, ten_room_params.inputs, dq=0.1)


@pytest.fixture(scope="session")
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def tiny_cert(tiny):
    return vk_search(tiny, np.eye(1))


@pytest.fixture(scope="session")
def tiny_env(tiny, tiny_cert):
    return derive_envelope(tiny_cert, tiny.tau)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SimConfig(0.02, seed=3)


@pytest.fixture(scope="session")
def tiny_bound(tiny, tiny_cert, tiny_env):
    p = tiny_params()
    return make_sigma_bound(tiny_cert, tiny_env, tiny, tiny_region(), p.zeta_s, p.inputs)
