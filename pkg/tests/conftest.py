import json
from importlib import resources

import numpy as np
import pytest

from idsasym.potential import FrequencySet, Potential, ScaleParameters


def load_fixture(name: str) -> Potential:
    ref = resources.files("idsasym") / "fixtures" / "potentials" / f"{name}.json"
    return Potential.from_json(json.loads(ref.read_text()))


def config_path(name: str) -> str:
    return str(resources.files("idsasym") / "fixtures" / "configs" / f"{name}.json")


def freqs(dim, vectors) -> FrequencySet:
    return FrequencySet(dim, [np.zeros(dim)] + [np.asarray(v, dtype=float) for v in vectors])


@pytest.fixture
def mathieu():
    return load_fixture("mathieu")


@pytest.fixture
def mathieu_params():
    return ScaleParameters(rho_n=10.0, k_tilde=3, alphas=(0.45,), beta=0.1)


@pytest.fixture
def square():
    return load_fixture("square")
