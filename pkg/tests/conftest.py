"""Shared fixtures: bundled scenarios, their maps, and cached end-to-end runs.

End-to-end runs take 10-20 s each, so every (scenario, seed, overrides) run
is simulated at most once per test session and shared between test modules.
"""

from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from nightpair.config import ScenarioConfig, load_config
from nightpair.field import build_ndt_grid, synthesize_field
from nightpair.pipeline import resolve_config, simulate_scenario

settings.register_profile(
    "nightpair",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("nightpair")


@pytest.fixture(scope="session")
def straight_cfg() -> ScenarioConfig:
    return load_config(resolve_config("straight_road"))


@pytest.fixture(scope="session")
def curved_cfg() -> ScenarioConfig:
    return load_config(resolve_config("curved_course"))


@pytest.fixture(scope="session")
def straight_map(straight_cfg):
    cloud = synthesize_field(straight_cfg)
    return cloud, build_ndt_grid(cloud, straight_cfg.grid.cell_size, straight_cfg.grid.origin)


@pytest.fixture(scope="session")
def curved_map(curved_cfg):
    cloud = synthesize_field(curved_cfg)
    return cloud, build_ndt_grid(cloud, curved_cfg.grid.cell_size, curved_cfg.grid.origin)


@pytest.fixture(scope="session")
def scenario_cache():
    """``get(cfg)`` returns the in-memory result for ``cfg``, simulating once."""
    cache = {}

    def get(cfg: ScenarioConfig):
        key = cfg.config_hash()
        if key not in cache:
            cache[key] = simulate_scenario(cfg)
        return cache[key]

    return get


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """``record(name, passed, detail)`` collects one line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
