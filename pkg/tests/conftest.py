import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from autolabel3d import synth  # noqa: E402
from autolabel3d.config import PipelineConfig  # noqa: E402
from autolabel3d.pipeline import run_autolabel  # noqa: E402


@pytest.fixture(scope="session")
def urban_mini():
    return synth.generate(synth.occlusion_scenario("urban-mini"), seed=7)


@pytest.fixture(scope="session")
def urban_all_motion(urban_mini):
    return run_autolabel(urban_mini.frames, PipelineConfig(eps_sf=0.0), urban_mini.background_queries, urban_mini.dt)


@pytest.fixture(scope="session")
def drive_by():
    return synth.generate(synth.occlusion_scenario("drive-by"), seed=7)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the terminal summary lists them all."""

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
