import itertools

import pytest

from directchain.core import (
    LEGAL_EDGES, IllegalTransition, LifecycleEvent, LifecyclePhase, Mark, ObjectVersion,
    PodIdMismatch, PodRecord, ScalingCommand, VersionClock, is_legal_path,
    lifecycle_transition, merge_record,
)

P = LifecyclePhase
E = LifecycleEvent


def test_pending_ready_is_running():
    assert lifecycle_transition(P.PENDING, E.MARK_READY) == P.RUNNING


def test_terminating_cannot_become_ready():
    with pytest.raises(IllegalTransition):
        lifecycle_transition(P.TERMINATING, E.MARK_READY)


def test_terminating_remove_is_removed():
    assert lifecycle_transition(P.TERMINATING, E.REMOVE) == P.REMOVED


def test_transition_table_is_exactly_the_legal_edges():
    found = set()
    for phase, event in itertools.product(P, E):
        try:
            found.add((phase, lifecycle_transition(phase, event)))
        except IllegalTransition:
            pass
    assert found == {(p, q) for p, qs in LEGAL_EDGES.items() for q in qs}


def test_terminating_only_reaches_removed():
    assert not is_legal_path(P.TERMINATING, P.RUNNING)
    assert not is_legal_path(P.TERMINATING, P.PENDING)
    assert is_legal_path(P.TERMINATING, P.REMOVED)
    assert is_legal_path(P.PENDING, P.REMOVED)
    assert not is_legal_path(P.REMOVED, P.PENDING)


def test_merge_into_empty():
    rec = PodRecord(1, node=2)
    assert merge_record(None, rec) == rec


def test_merge_keeps_terminating():
    local = PodRecord(1, phase=P.TERMINATING)
    out = merge_record(local, PodRecord(1, phase=P.RUNNING))
    assert out.phase == P.TERMINATING


def test_merge_adopts_downstream_progress():
    local = PodRecord(1, node=1, version=ObjectVersion(0, 3))
    incoming = PodRecord(1, node=1, phase=P.RUNNING, version=ObjectVersion(0, 7))
    assert merge_record(local, incoming) == incoming


def test_merge_wrong_slot():
    with pytest.raises(PodIdMismatch):
        merge_record(PodRecord(1), PodRecord(2))


def test_pod_id_positive():
    with pytest.raises(ValueError):
        PodRecord(0)


def test_invalid_records_are_not_live():
    rec = PodRecord(1).with_marks(Mark.INVALID)
    assert rec.invalid and not rec.live
    assert rec.with_marks(drop=(Mark.INVALID,)).live
    assert not PodRecord(1, phase=P.TERMINATING).live


def test_version_clock_is_unique_per_session():
    a, b = VersionClock(1), VersionClock(2)
    stamps = [a.tick() for _ in range(5)] + [b.tick() for _ in range(5)]
    assert len(set(stamps)) == 10


def test_scaling_command_rejects_negative():
    with pytest.raises(ValueError):
        ScalingCommand(0, 1, -1)
