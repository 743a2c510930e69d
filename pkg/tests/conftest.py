import numpy as np
import pytest

from uavfl.ao import initial_state
from uavfl.scenario import build_scenario


def tiny(seed=0, m=2, u=3, n=2, **over):
    cfg = {"seed": seed, "slots": n, "devices": {"count": m}, "channel": {"rb_count": u}}
    for key, val in over.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    return build_scenario(cfg)


def start(sc, **kw):
    return initial_state(sc, **kw)[0]


@pytest.fixture(scope="session")
def desk():
    return build_scenario({"seed": 0})


@pytest.fixture(scope="session")
def desk_state(desk):
    return start(desk)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
