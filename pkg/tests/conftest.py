"""Shared fixtures: the bundled tiny configuration and small synthetic cases."""

from __future__ import annotations

import numpy as np
import pytest

from facedeform.components.cases import SurgicalCase
from facedeform.components.synthetic import make_case
from facedeform.utils.config import RunConfig, bundled_config, load_config


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return load_config(bundled_config("tiny"))


@pytest.fixture(scope="session")
def tiny_case(tiny_config: RunConfig) -> SurgicalCase:
    # index 1 carries a non-empty plan
    return make_case(1, tiny_config, seed=0).to_surgical_case()


@pytest.fixture(scope="session")
def tiny_cases(tiny_config: RunConfig) -> list[SurgicalCase]:
    return [make_case(i, tiny_config, seed=3).to_surgical_case() for i in range(1, 6)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
