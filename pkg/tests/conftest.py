import json
import time
from pathlib import Path

import pytest

from flexmarket.market import run_simulation
from flexmarket.scenario import load_scenario, scenario_from_dict

REPO = Path(__file__).resolve().parent.parent
DAY_SCENARIO = REPO / "scenarios" / "three_agent_day.json"
MINI_SCENARIO = REPO / "scenarios" / "mini_two_agent.json"


@pytest.fixture(scope="session")
def day_scenario():
    return load_scenario(DAY_SCENARIO)


@pytest.fixture(scope="session")
def day_run(day_scenario):
    """Bundled-scenario trace plus its wall-clock runtime (seconds)."""
    t0 = time.perf_counter()
    trace = run_simulation(day_scenario)
    return {"trace": trace, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def degenerate_day_run():
    """The bundled day re-run with a zero flexibility request everywhere."""
    with open(DAY_SCENARIO) as fh:
        doc = json.load(fh)
    doc["policy"]["beta"] = 0.0
    doc["policy"]["clip_to_positivity"] = False
    s = scenario_from_dict(doc, base_dir=DAY_SCENARIO.parent)
    return run_simulation(s)


@pytest.fixture(scope="session")
def mini_scenario():
    return load_scenario(MINI_SCENARIO)


@pytest.fixture(scope="session")
def mini_trace(mini_scenario):
    return run_simulation(mini_scenario)
