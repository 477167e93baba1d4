from importlib import resources
from pathlib import Path

import pytest

from micronas.supernet import parse_architecture, parse_backbone_config


def data_path(name: str) -> Path:
    return Path(str(resources.files("micronas").joinpath("data", name)))


def tiny_config(normalization: str = "affine") -> dict:
    """Three decisions, a few thousand parameters: small enough for finite differences."""
    return {
        "name": "tiny",
        "input_shape": [6, 5, 1],
        "channel_grid": 4,
        "normalization": normalization,
        "layers": [
            {"kind": "Conv2D", "name": "stem", "kernel": [3, 3], "stride": 1, "channels": {"options": [4, 8]}},
            {
                "kind": "DepthwiseSeparableBlock",
                "name": "ds",
                "kernel": [3, 3],
                "stride": 2,
                "channels": {"options": [4, 8]},
                "optional_depth": True,
            },
            {"kind": "GlobalAvgPool", "name": "gap"},
            {"kind": "FullyConnected", "name": "fc", "channels": {"fixed": 3}},
        ],
    }


def enum_config(normalization: str = "affine") -> dict:
    """Five decisions with mixed arity (48 architectures), stride-1 optional block included."""
    return {
        "name": "enum",
        "input_shape": [8, 6, 1],
        "channel_grid": 4,
        "normalization": normalization,
        "layers": [
            {"kind": "Conv2D", "name": "stem", "kernel": [3, 3], "stride": 2, "channels": {"options": [4, 8, 12]}},
            {
                "kind": "DepthwiseSeparableBlock",
                "name": "ds1",
                "kernel": [3, 3],
                "stride": 1,
                "channels": {"options": [8, 12]},
                "optional_depth": True,
            },
            {
                "kind": "DepthwiseSeparableBlock",
                "name": "ds2",
                "kernel": [3, 3],
                "stride": 2,
                "channels": {"options": [4, 12]},
                "optional_depth": True,
            },
            {"kind": "GlobalAvgPool", "name": "gap"},
            {"kind": "FullyConnected", "name": "fc", "channels": {"fixed": 3}},
        ],
    }


@pytest.fixture
def tiny_supernet():
    return parse_backbone_config(tiny_config())


@pytest.fixture
def enum_supernet():
    return parse_backbone_config(enum_config())


@pytest.fixture(scope="session")
def kws_m():
    return parse_architecture(data_path("kws_m.json"))


@pytest.fixture(scope="session")
def kws_s():
    return parse_architecture(data_path("kws_s.json"))
