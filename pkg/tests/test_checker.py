import json

import pytest

from directchain.checker import (
    ACTIONS, BoundExceeded, ModelConfig, TRANSITIONS, converged, do_as_next, do_as_rs_handshake,
    do_klet_next, do_rs_crash, do_rs_next, do_rs_sched_handshake, do_sched_klet_handshake,
    do_sched_next, explore, initial_state, invariant_violations, reachable_within,
)

ONE = ModelConfig(1, (1, 2))
TWO = ModelConfig(2, (1, 2))


def test_config_validation():
    for bad in [dict(num_nodes=0, scaling_cmds=(1,)), dict(num_nodes=1, scaling_cmds=()),
                dict(num_nodes=1, scaling_cmds=(2, 1)), dict(num_nodes=1, scaling_cmds=(0,))]:
        with pytest.raises(ValueError):
            ModelConfig(**bad)


def test_every_action_has_a_transition():
    assert set(ACTIONS) == set(TRANSITIONS)


def test_as_next_sends_current_command():
    (s,) = do_as_next(initial_state(ONE), ONE)
    assert s.as_rs == ((1,), True) and s.last_desired == 1
    assert do_as_next(s, ONE) == [s]


def test_rs_next_creates_a_batch_from_prior_desired():
    s = do_as_next(initial_state(ONE), ONE)[0]
    (s,) = do_rs_next(s, ONE)
    assert s.desired == 1 and s.created == frozenset()  # reads pre-state desired
    (s,) = do_rs_next(s, ONE)
    assert s.created == {1} and s.max_pod_id == 1 and s.rs_sched == (((0, 1),), True)


def test_sched_next_branches_over_nodes():
    s = initial_state(TWO)._replace(rs_sched=(((0, 2),), True))
    outs = do_sched_next(s, TWO)
    assert len(outs) == 4
    assert {o.scheduled for o in outs} == {
        frozenset({(1, a), (2, b)}) for a in (1, 2) for b in (1, 2)}


def test_klet_next_receives_head_and_exposes_lowest_pending():
    s = initial_state(TWO)._replace(sched_klet=(((1, 1), (2, 2)), True),
                                    running=frozenset({(4, 1), (3, 1)}))
    (t,) = do_klet_next(s, TWO)
    assert t.running == {(1, 1), (3, 1), (4, 1)}
    # exposure picks from the pods running before this step
    assert t.api_pods == {(3, 1)}


def test_klet_next_relaxed_takes_any_inflight():
    cfg = ModelConfig(2, (1, 2), relaxed_delivery=True)
    s = initial_state(cfg)._replace(sched_klet=(((1, 1), (2, 2)), True))
    assert len(do_klet_next(s, cfg)) == 2


def test_rs_crash_restores_from_api_pods():
    s = initial_state(ONE)._replace(created=frozenset({1, 2}), desired=2,
                                    api_pods=frozenset({(1, 1)}), max_pod_id=2)
    (t,) = do_rs_crash(s, ONE)
    assert t.created == {1} and t.desired == 1 and t.max_pod_id == 2
    assert not t.rs_sched[1] and not t.as_rs[1]


def test_sched_klet_handshake_redelivers_unrunning_pods():
    s = initial_state(TWO)._replace(sched_klet=((), False), scheduled=frozenset({(1, 1), (2, 2)}),
                                    running=frozenset({(1, 1)}))
    (t,) = do_sched_klet_handshake(s, TWO)
    assert t.sched_klet == (((2, 2),), True)


def test_rs_sched_handshake_waits_for_tail_and_resets_created():
    s = initial_state(ONE)._replace(rs_sched=((), False), sched_klet=((), False),
                                    created=frozenset({1, 2}), scheduled=frozenset({(1, 1)}))
    assert do_rs_sched_handshake(s, ONE) == [s]
    s = s._replace(sched_klet=((), True))
    (t,) = do_rs_sched_handshake(s, ONE)
    assert t.created == {1} and t.rs_sched[1]


def test_as_rs_handshake_resends_last_decision():
    s = initial_state(ONE)._replace(as_rs=((), False), last_desired=2, cmd_index=2)
    (t,) = do_as_rs_handshake(s, ONE)
    assert t.as_rs == ((2,), True)
    unfixed = ModelConfig(1, (1, 2), liveness_fixes=False)
    (t,) = do_as_rs_handshake(s, unfixed)
    assert t.as_rs == ((), True)


def test_invariants_flag_double_binding():
    s = initial_state(TWO)._replace(scheduled=frozenset({(1, 1), (1, 2)}))
    assert "SchedPodUnique" in invariant_violations(s, TWO)


def test_fault_free_exploration():
    v = explore(TWO)
    assert v.invariant_result and v.convergence_result
    assert v.states_visited == 66


def test_fault_exploration_pinned_state_count():
    v = explore(ModelConfig(2, (1, 2), True, True))
    assert (v.states_visited, v.invariant_result, v.convergence_result) == (23902, True, True)


def test_without_liveness_fixes_convergence_fails():
    v = explore(ModelConfig(1, (1, 2), True, True, liveness_fixes=False))
    assert v.invariant_result and not v.convergence_result
    last = v.counterexample[-1]["state"]
    assert len(last["APIPods"]) != 2


def test_fast_forward_reset_mutant_yields_counterexample():
    v = explore(ModelConfig(1, (1, 2), True, True, fast_forward_reset=True))
    assert not v.invariant_result
    assert v.violated == ["RsPodComplete"]
    assert v.counterexample[0]["action"] == "Init"
    doc = json.loads(v.to_json())
    assert doc["counterexample"][-1]["state"] == json.loads(json.dumps(v.counterexample[-1]["state"]))


def test_literal_invariants_falsified_by_crash():
    v = explore(ModelConfig(1, (1, 2), True, True, literal_invariants=True))
    assert not v.invariant_result
    assert any(step["action"] in ("RsCrash", "SchedCrash") for step in v.counterexample)


def test_state_bound():
    with pytest.raises(BoundExceeded):
        explore(ModelConfig(2, (1, 2), True, True, max_states=100))


def test_reachable_within():
    init = initial_state(ONE)
    s = do_rs_next(do_as_next(init, ONE)[0], ONE)[0]
    assert reachable_within(init, s, ONE, 3) == ["AsNext", "RsNext"]
    assert reachable_within(init, s, ONE, 1) is None
    assert reachable_within(s, s, ONE, 0) == []


def test_converged_needs_final_command():
    s = initial_state(ONE)._replace(api_pods=frozenset({(1, 1)}))
    assert not converged(s, ONE)
    assert converged(s._replace(cmd_index=2, api_pods=frozenset({(1, 1), (2, 1)})), ONE)
