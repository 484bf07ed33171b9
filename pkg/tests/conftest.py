import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from shiftflow.fixq import FixedVector, Pow2Weights, QTensor  # noqa: E402
from shiftflow.quantizer import MergedLayerParams  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

# fixed example sequence so every run of the suite checks the same cases
settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def pinned():
    return json.loads((FIXTURES / "oracle.json").read_text())


def random_qtensor(rng, dims, bits=4):
    return QTensor(rng.integers(0, 2 ** bits, dims), bits)


def random_pow2(rng, shape, bits=3):
    emax = 2 ** (bits - 1) - 2
    return Pow2Weights(rng.integers(-1, 2, shape), rng.integers(0, emax + 1, shape), bits)


def random_params(rng, n, a_d=-7, b_d=-3):
    a = FixedVector(rng.integers(1, 128, n), a_d)
    b = FixedVector(rng.integers(-127, 128, n), b_d)
    return MergedLayerParams(a, b)
