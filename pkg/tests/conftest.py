"""Shared fixtures. The canonical box mission is expensive (about a minute
per run), so the two runs used by determinism and coverage checks are
computed once per session and shared."""

import pytest

from reconplan.simulator import MissionConfig, run_mission


@pytest.fixture(scope="session")
def box_mission_pair():
    """Two runs of the default box mission with identical config."""
    cfg = MissionConfig()
    return run_mission(cfg), run_mission(cfg)
