import pathlib

import pytest

import flowprof

MODEL_DIR = pathlib.Path(flowprof.__file__).parent / "models"


def model_path(name: str) -> pathlib.Path:
    return MODEL_DIR / f"{name}.json"


@pytest.fixture
def topo():
    return flowprof.Topology(
        device_addr="192.168.1.53",
        phone_addr="192.168.1.77",
        gateway_addr="192.168.1.1",
        local_prefixes=("192.168.1.0/24",),
    )


@pytest.fixture
def hs110():
    return flowprof.load_model(model_path("hs110_toggle"))
