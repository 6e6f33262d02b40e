import numpy as np
import pytest

from brlab.env import TrajectoryClip, make_gridworld
from brlab.prefdata import PreferenceDataset, PreferencePair


def clip(sa, clip_id, next_states=None):
    """Clip from [(s, a), ...]; next states chain to the following step."""
    states = [s for s, _ in sa]
    if next_states is None:
        next_states = states[1:] + [states[-1]]
    return TrajectoryClip(tuple((s, a, s2) for (s, a), s2 in zip(sa, next_states)), clip_id)


def pair(pair_id, sa_1, sa_2, labels=(1,)):
    return PreferencePair(pair_id, clip(sa_1, pair_id + "a"), clip(sa_2, pair_id + "b"),
                          tuple(labels))


def dataset(pairs, T):
    return PreferenceDataset(tuple(pairs), T)


@pytest.fixture
def grid5():
    return make_gridworld(5, 5, slip_probability=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
