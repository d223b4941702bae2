import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdrct.core import GridGeometry  # noqa: E402
from sdrct.projector import build_system_matrix  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_matrix():
    """L=16, 20 angles: the workhorse for solver tests."""
    return build_system_matrix(GridGeometry(16, 20, 1))


CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "sdrct" / "configs"
DESK_SCENARIOS = ("noiseless-64", "lownoise-64", "highnoise-64")


@pytest.fixture(scope="session")
def desk_results():
    """The three bundled 64^3 scenarios, run once per session (about 30 s)."""
    from sdrct.experiment import load_scenario, run_scenario

    out = {}
    for name in DESK_SCENARIOS:
        sc = load_scenario(CONFIG_DIR / f"{name}.json")
        out[name] = (sc, run_scenario(sc))
    return out
