import pytest

from directchain.checker import cross_validate as checker_cross_validate
from directchain.crossval import (
    Consistent, Divergent, _runs, cross_validate, curated_scenarios, model_config,
)
from directchain.simharness import ScenarioError, parse_scenario

CURATED = curated_scenarios()


def scn(text):
    return parse_scenario(text)


def test_curated_set_shape():
    names = [n for n, _ in CURATED]
    assert len(names) == 50 and len(set(names)) == 50
    assert sum(1 for n in names if n.startswith("nofault")) == 10


@pytest.mark.parametrize("name,scenario", CURATED, ids=[n for n, _ in CURATED])
def test_curated_scenario_consistent(name, scenario):
    r = cross_validate(scenario)
    assert isinstance(r, Consistent), r.describe()
    assert r.steps > 0 and r.model_actions >= r.steps


def test_scheduler_crash_path_uses_sched_crash():
    r = cross_validate(scn("config num_nodes=2 node_capacity=4\ncmd 0 1 2\nfault 4 crash sc\n"))
    assert r
    assert any("SchedCrash" in path for _, path in r.paths)


def test_mutant_without_reset_invalidation_diverges():
    sc = dict(CURATED)["crash-sc-t3"]
    r = cross_validate(sc, flags={"reset_invalidates": False})
    assert isinstance(r, Divergent) and not r
    assert r.trace and r.describe()


def test_checker_entry_point_delegates():
    sc = dict(CURATED)["nofault-n1-1"]
    assert checker_cross_validate(sc, model_config(sc))


@pytest.mark.parametrize("text", [
    "config num_nodes=1\ncmd 0 1 1\nfault 5 evict 1 1\n",
    "config num_nodes=1\ncmd 0 1 1\ncmd 0 2 1\n",
    "config num_nodes=1\ncmd 5 1 1\n",
    "config num_nodes=1 startup_delay=10\ncmd 0 1 1\n",
    "config num_nodes=2\ncmd 0 1 1\nfault 5 crash k1\n",
    "config num_nodes=2\ncmd 0 1 1\nfault 5 partition sc-k1\nfault 9 reconnect sc-k1\n",
    "config num_nodes=1\ncmd 0 1 1\nfault 5 partition sc-k1\nfault 500 reconnect sc-k1\n",
    "config num_nodes=1 node_capacity=1\ncmd 0 1 3\n",
])
def test_inexpressible_scenarios_rejected(text):
    with pytest.raises(ScenarioError):
        cross_validate(scn(text))


def test_runs_group_consecutive_ids():
    assert _runs([5, 1, 2, 3, 7]) == [(0, 3), (4, 1), (6, 1)]
