"""Pytest configuration and fixtures.

This module provides reusable test fixtures for all tests.
"""

import numpy as np
import pytest

from mvcache.core.data_loader import reset_global_loader
from mvcache.core.events import EventBus, reset_event_bus
from mvcache.core.network import NetworkSpec, build_network, default_network_config
from mvcache.core.reuse import ThresholdVector
from mvcache.modules.datagen import FrameSequence, generate_sequence


@pytest.fixture(autouse=True)
def reset_globals():
    """Reset module-level singletons around every test."""
    reset_event_bus()
    reset_global_loader()
    yield
    reset_event_bus()
    reset_global_loader()


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_net() -> NetworkSpec:
    """Default network topology on 64x64 inputs.

    Returns:
        NetworkSpec with R_max 9 and S_max 4
    """
    return build_network(default_network_config(64, 64))


@pytest.fixture(scope="session")
def net() -> NetworkSpec:
    """Default network on 128x128 inputs."""
    return build_network(default_network_config(128, 128))


@pytest.fixture
def zero_thresholds(small_net: NetworkSpec) -> ThresholdVector:
    """All-zero thresholds for small_net."""
    return ThresholdVector.zeros(small_net.profiled_layers)


@pytest.fixture
def bus() -> EventBus:
    """Fresh event bus, isolated from the global one."""
    return EventBus()


@pytest.fixture
def pan_sequence() -> FrameSequence:
    """Twelve 64x64 frames panning 4 px right per frame."""
    return generate_sequence("pan", 12, 64, 64, seed=11, dy=0, dx=4)


@pytest.fixture
def two_region_sequence() -> FrameSequence:
    """Twelve 64x64 frames with a moving object over a panning background."""
    return generate_sequence("two_region", 12, 64, 64, seed=12)
