import pytest

from surreal_driver.types import SimConfig


@pytest.fixture
def quiet_sim():
    """Simulation settings with no background traffic."""
    return SimConfig(npc_count=0)
