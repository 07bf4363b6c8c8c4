from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unweaver.controller import Dims, init_model
from unweaver.core import Story, canonicalize

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

SMALL_DIMS = Dims(clip_dim=6, thread_dim=5, embed_dim=8, heads=2, ff_dim=12)


@pytest.fixture(scope="session")
def small_dims() -> Dims:
    return SMALL_DIMS


@pytest.fixture(scope="session")
def mixed_story() -> Story:
    """Seven clips covering continue, new, and resume decisions."""
    rng = np.random.default_rng(0)
    return Story(
        id="mixed",
        clips=rng.normal(size=(7, SMALL_DIMS.clip_dim)).astype(np.float32),
        ground_truth=canonicalize([1, 1, 2, 1, 3, 2, 1]),
    )


def make_model(selector: str, updater: str, seed: int = 1, **kwargs):
    return init_model(selector, updater, SMALL_DIMS, seed=seed, **kwargs)


@pytest.fixture(scope="session", params=["linear", "transformer"])
def selector(request) -> str:
    return request.param


@pytest.fixture(scope="session", params=["gru", "last_clip"])
def updater(request) -> str:
    return request.param
