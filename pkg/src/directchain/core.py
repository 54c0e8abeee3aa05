"""Domain types shared across the controller chain."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace


class LifecyclePhase(enum.IntEnum):
    PENDING = 0
    RUNNING = 1
    TERMINATING = 2
    REMOVED = 3


class LifecycleEvent(enum.Enum):
    MARK_READY = "MarkReady"
    MARK_TERMINATING = "MarkTerminating"
    REMOVE = "Remove"


class Mark(enum.Enum):
    DIRTY = "Dirty"
    INVALID = "Invalid"


class IllegalTransition(Exception):
    def __init__(self, phase, event):
        super().__init__(f"illegal lifecycle transition: {phase.name} + {event.value}")
        self.phase = phase
        self.event = event


class PodIdMismatch(Exception):
    pass


_TRANSITIONS = {
    (LifecyclePhase.PENDING, LifecycleEvent.MARK_READY): LifecyclePhase.RUNNING,
    (LifecyclePhase.PENDING, LifecycleEvent.MARK_TERMINATING): LifecyclePhase.TERMINATING,
    (LifecyclePhase.RUNNING, LifecycleEvent.MARK_TERMINATING): LifecyclePhase.TERMINATING,
    (LifecyclePhase.TERMINATING, LifecycleEvent.REMOVE): LifecyclePhase.REMOVED,
}

# phase -> phases it may legally move to (for trace audits)
LEGAL_EDGES = {
    LifecyclePhase.PENDING: frozenset({LifecyclePhase.RUNNING, LifecyclePhase.TERMINATING}),
    LifecyclePhase.RUNNING: frozenset({LifecyclePhase.TERMINATING}),
    LifecyclePhase.TERMINATING: frozenset({LifecyclePhase.REMOVED}),
    LifecyclePhase.REMOVED: frozenset(),
}


def lifecycle_transition(phase: LifecyclePhase, event: LifecycleEvent) -> LifecyclePhase:
    try:
        return _TRANSITIONS[(phase, event)]
    except KeyError:
        raise IllegalTransition(phase, event) from None


def is_legal_path(prev: LifecyclePhase, nxt: LifecyclePhase) -> bool:
    """True if ``nxt`` is reachable from ``prev`` through legal edges (or equal)."""
    if prev == nxt:
        return True
    frontier = [prev]
    seen = {prev}
    while frontier:
        p = frontier.pop()
        for q in LEGAL_EDGES[p]:
            if q == nxt:
                return True
            if q not in seen:
                seen.add(q)
                frontier.append(q)
    return False


@dataclass(frozen=True)
class ObjectVersion:
    """Write stamp of a record.  Only equality matters to the protocol.

    ``epoch`` is the writer's session number, allocated run-wide by the
    harness, so (epoch, counter) pairs never collide between controllers.
    """

    epoch: int
    counter: int


ZERO_VERSION = ObjectVersion(0, 0)


@dataclass(frozen=True)
class PodRecord:
    pod_id: int
    function_id: int = 0
    node: int | None = None
    phase: LifecyclePhase = LifecyclePhase.PENDING
    version: ObjectVersion = ZERO_VERSION
    marks: frozenset = frozenset()

    def __post_init__(self):
        if self.pod_id < 1:
            raise ValueError("pod_id must be a positive integer")

    @property
    def invalid(self) -> bool:
        return Mark.INVALID in self.marks

    @property
    def live(self) -> bool:
        return not self.invalid and self.phase < LifecyclePhase.TERMINATING

    def with_marks(self, *add: Mark, drop=()) -> "PodRecord":
        return replace(self, marks=(self.marks | frozenset(add)) - frozenset(drop))


@dataclass(frozen=True)
class Tombstone:
    pod_id: int
    created_by: str
    session_epoch: int


@dataclass(frozen=True, order=True)
class ScalingCommand:
    issue_time: int
    function_id: int
    desired_replicas: int

    def __post_init__(self):
        if self.desired_replicas < 0:
            raise ValueError("desired_replicas must be non-negative")


def merge_record(local: PodRecord | None, incoming: PodRecord) -> PodRecord:
    """Adopt ``incoming`` over ``local``; Terminating is never undone."""
    if local is None:
        return incoming
    if local.pod_id != incoming.pod_id:
        raise PodIdMismatch(f"merging pod {incoming.pod_id} into slot for {local.pod_id}")
    if local.phase >= LifecyclePhase.TERMINATING and incoming.phase < LifecyclePhase.TERMINATING:
        return replace(incoming, phase=local.phase, node=incoming.node if local.node is None else local.node)
    return incoming


@dataclass
class VersionClock:
    """Per-session write counter owned by one controller."""

    epoch: int
    counter: int = field(default=0)

    def tick(self) -> ObjectVersion:
        self.counter += 1
        return ObjectVersion(self.epoch, self.counter)
