"""Shared fixtures: tiny expert datasets and toy segment batches."""

from __future__ import annotations

import numpy as np
import pytest

from masd import env as E
from masd.dataset import collect_episodes, segment


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running learning checks")
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def g3_episodes():
    return collect_episodes(E.get_task("g3"), 6, seed=3)


@pytest.fixture(scope="session")
def g5_episodes():
    return collect_episodes(E.get_task("g5"), 4, seed=4)


@pytest.fixture(scope="session")
def g3_batches(g3_episodes):
    return segment(g3_episodes, 5)


@pytest.fixture(scope="session")
def g5_batches(g5_episodes):
    return segment(g5_episodes, 5)


@pytest.fixture(scope="session")
def trained_3d(g3_episodes):
    from masd.discovery import train
    from masd.skillnet import DiscoveryConfig

    return train(g3_episodes, DiscoveryConfig(method="3d", epochs=100, hidden=32, minibatch=8, sizes=(1, 2, 3), seed=1))


@pytest.fixture(scope="session")
def trained_hier(g3_episodes):
    from masd.discovery import train
    from masd.skillnet import DiscoveryConfig

    return train(g3_episodes, DiscoveryConfig(method="hier", epochs=100, hidden=32, minibatch=8, sizes=(1, 2, 3), seed=1))


def random_batch(rng: np.random.Generator, n: int, H: int):
    """A SegmentBatch with random observations (own-alive flag set) and random actions."""
    from masd.dataset import SegmentBatch

    obs = rng.normal(size=(n, H, E.OBS_DIM)) * 0.5
    obs[:, :, 2] = 1.0
    acts = rng.integers(0, E.N_ACTIONS, size=(n, H))
    return SegmentBatch("toy", 0, 0, obs, acts, np.ones((n, H)), rng.normal(size=E.STATE_DIM))
