"""Cache-invalidation protocol between adjacent controllers.

Hard invalidation is a two-round handshake run by the upstream end of a
link after every (re)connect: the downstream sends per-object version
digests, the upstream fetches only the objects whose versions differ, then
adopts them.  Soft invalidation is the same delta format flowing backward
on a live link.  Tombstones ride the forward path and are re-sent after
every reconnect within the creator's session.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import LifecyclePhase, Mark, ObjectVersion, PodRecord, Tombstone, merge_record
from .materialization import (
    Attr, DeltaMessage, FrameType, Literal, ObjectKind, AttrKey, pod_key, record_message,
)

DIGEST_CHUNK = 64


class HandshakeMode(enum.Enum):
    RECOVER = "Recover"
    RESET = "Reset"


class LinkLost(Exception):
    pass


class PlacementOutcome(enum.Enum):
    PLACED = "Placed"
    TIMED_WAITING = "TimedWaiting"


class TombstoneStatus(enum.Enum):
    RESOLVED = "Resolved"
    PENDING = "Pending"


@dataclass
class ChangeSet:
    overwritten: set = field(default_factory=set)
    invalidated: set = field(default_factory=set)
    mode: HandshakeMode = HandshakeMode.RESET

    def __post_init__(self):
        assert not (self.overwritten & self.invalidated)

    def __bool__(self):
        return bool(self.overwritten or self.invalidated)


@dataclass(frozen=True)
class InvalidationAck:
    pod_ids: frozenset


def handshake_mode(local: dict) -> HandshakeMode:
    return HandshakeMode.RECOVER if not local else HandshakeMode.RESET


# -- frame payloads --

def _chunks(items, size=DIGEST_CHUNK):
    items = list(items)
    if not items:
        return [[]]
    return [items[i:i + size] for i in range(0, len(items), size)]


def pod_digest(pods: dict) -> dict:
    """pod_id -> version for every record a downstream vouches for."""
    return {pid: r.version for pid, r in pods.items()
            if not r.invalid and r.phase != LifecyclePhase.REMOVED}


def digest_messages(digest: dict) -> list:
    return [DeltaMessage(tuple((pod_key(pid, Attr.VERSION), Literal(digest[pid])) for pid in chunk))
            for chunk in _chunks(sorted(digest))]


def scalar_messages(kind: ObjectKind, values: dict) -> list:
    return [DeltaMessage(tuple((AttrKey(kind, fn, Attr.REPLICAS), Literal(values[fn])) for fn in chunk))
            for chunk in _chunks(sorted(values))]


def parse_digest(msg: DeltaMessage) -> dict:
    out = {}
    for key, value in msg.entries:
        if key.attribute_path == Attr.VERSION:
            out[key.object_id] = value.value
        elif key.attribute_path == Attr.REPLICAS:
            out[key.object_id] = value.value
    return out


def fetch_messages(pod_ids) -> list:
    return [DeltaMessage(tuple((pod_key(pid, Attr.VALID), Literal(1)) for pid in chunk))
            for chunk in _chunks(sorted(pod_ids))]


def parse_ids(msg: DeltaMessage) -> list:
    return [key.object_id for key, _ in msg.entries]


def removal_message(pod_id: int) -> DeltaMessage:
    return DeltaMessage(((pod_key(pod_id, Attr.PHASE), Literal(LifecyclePhase.REMOVED)),))


def invalidation_message(pod_id: int, record: PodRecord | None) -> DeltaMessage:
    """Backward change report: a full record, or a removal when ``record`` is None."""
    return removal_message(pod_id) if record is None else record_message(record)


def ack_messages(pod_ids) -> list:
    return [DeltaMessage(tuple((pod_key(pid, Attr.VALID), Literal(0)) for pid in chunk))
            for chunk in _chunks(sorted(pod_ids))]


def tombstone_message(t: Tombstone) -> DeltaMessage:
    return DeltaMessage((
        (AttrKey(ObjectKind.TOMBSTONE, t.pod_id, Attr.VERSION), Literal(ObjectVersion(t.session_epoch, 0))),
        (AttrKey(ObjectKind.TOMBSTONE, t.pod_id, Attr.CREATOR), Literal(t.created_by)),
    ))


def parse_tombstones(msg: DeltaMessage) -> list:
    found: dict = {}
    for key, value in msg.entries:
        if key.object_kind != ObjectKind.TOMBSTONE:
            continue
        slot = found.setdefault(key.object_id, {})
        if key.attribute_path == Attr.CREATOR:
            slot["by"] = value.value
        elif key.attribute_path == Attr.VERSION:
            slot["epoch"] = value.value.epoch
    return [Tombstone(pid, v.get("by", ""), v.get("epoch", 0)) for pid, v in sorted(found.items())]


# -- handshake bookkeeping --

def diff_digest(local: dict, digest: dict) -> tuple[list, list]:
    """Pods to fetch (missing or stale locally) and pods only held locally."""
    fetch = sorted(pid for pid, ver in digest.items()
                   if pid not in local or local[pid].version != ver)
    local_only = sorted(pid for pid in local if pid not in digest)
    return fetch, local_only


def apply_handshake(local: dict, fetched: list, local_only, mode: HandshakeMode,
                    invalidate: bool = True) -> ChangeSet:
    """Overwrite ``local`` (pod_id -> PodRecord) with downstream state.

    Recover adopts everything as is.  Reset marks adopted records Dirty and
    records only present locally Invalid (they stay until acknowledged).
    """
    changes = ChangeSet(mode=mode)
    for rec in fetched:
        if rec.phase == LifecyclePhase.REMOVED:
            # vanished between the two rounds: treat as absent downstream
            if rec.pod_id in local:
                local_only = list(local_only) + [rec.pod_id]
            continue
        merged = merge_record(local.get(rec.pod_id), rec)
        if mode == HandshakeMode.RESET:
            merged = merged.with_marks(Mark.DIRTY, drop=(Mark.INVALID,))
            changes.overwritten.add(rec.pod_id)
        local[rec.pod_id] = merged
    if mode == HandshakeMode.RESET and invalidate:
        for pid in local_only:
            if pid in local and pid not in changes.overwritten:
                local[pid] = local[pid].with_marks(Mark.INVALID, drop=(Mark.DIRTY,))
                changes.invalidated.add(pid)
    return changes


def run_handshake(local: dict, downstream: dict, invalidate: bool = True) -> tuple[ChangeSet, int]:
    """Both rounds of a handshake between two pod maps, without a link.

    ``local`` is updated in place.  Returns the change set and the number
    of frames the exchange takes: the digest request, digest chunks, fetch
    chunks and one state frame per fetched pod.
    """
    mode = handshake_mode(local)
    digest = pod_digest(downstream)
    frames = 1 + len(digest_messages(digest))
    fetch, local_only = diff_digest(local, digest)
    if fetch:
        frames += len(fetch_messages(fetch)) + len(fetch)
    changes = apply_handshake(local, [downstream[pid] for pid in fetch], local_only, mode, invalidate)
    return changes, frames


class HandshakeSession:
    """Initiator-side state of one handshake on one link."""

    def __init__(self, link_name: str, scalar: bool = False):
        self.link_name = link_name
        self.scalar = scalar
        self.stage = "digest"
        self.digest: dict = {}
        self.wanted: list = []
        self.fetched: list = []
        self.frames = 0  # handshake frames exchanged, both directions

    def add_digest(self, msg: DeltaMessage, more: bool) -> bool:
        self.frames += 1
        self.digest.update(parse_digest(msg))
        if not more:
            self.stage = "diff"
        return not more

    def start_fetch(self, wanted) -> list:
        self.wanted = list(wanted)
        self.stage = "state"
        msgs = fetch_messages(self.wanted)
        self.frames += len(msgs)
        return msgs

    def add_state(self, records: list, more: bool) -> bool:
        self.frames += 1
        self.fetched.extend(records)
        if not more:
            self.stage = "done"
        return not more


# -- protocol operations over controller objects --

def soft_invalidate(controller, pod_id: int, record: PodRecord | None) -> None:
    """Queue a backward change report; it is sent when the upstream link is usable."""
    controller.report_up(pod_id, record)


def replicate_tombstone(controller, tombstone: Tombstone, link=None) -> bool:
    return controller.replicate_tombstone(tombstone, link)


def resolve_tombstone(controller, tombstone: Tombstone) -> TombstoneStatus:
    return controller.resolve_tombstone(tombstone)


def preempt_sync(scheduler, victim: int, pod: PodRecord) -> PlacementOutcome:
    return scheduler.preempt(victim, pod)


def cancel_node(scheduler, node_id: int, registry) -> None:
    scheduler.cancel_node(node_id, registry)
