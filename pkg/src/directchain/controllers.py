"""The five controllers of the scale-out chain.

Each controller is a single-threaded state machine.  The event loop hands
it decoded frames through ``receive`` and calls ``step`` (the control
loop) whenever something changed.  All side effects go through ``env``:
sending frames, timers, the registry and the run monitors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from types import SimpleNamespace

from .core import (
    LifecycleEvent, LifecyclePhase, Mark, PodRecord, Tombstone, VersionClock,
    lifecycle_transition, merge_record,
)
from .materialization import (
    Attr, DeltaMessage, FrameType, ObjectKind, batch_message, materialize, record_message,
)
from .reconciliation import (
    HandshakeMode, HandshakeSession, PlacementOutcome, TombstoneStatus, ack_messages,
    apply_handshake, diff_digest, digest_messages, handshake_mode, invalidation_message,
    parse_ids, parse_tombstones, pod_digest, scalar_messages, tombstone_message,
)
from .transport import Direction

# pods created by the scheduler itself for preemption; not owned by any ReplicaSet
PRIORITY_FUNCTION = 0

FWD = Direction.FORWARD
BWD = Direction.BACKWARD


class NoFeasibleNode(Exception):
    pass


class CapacityExceeded(Exception):
    pass


class UnknownPod(Exception):
    pass


class ControllerCache:
    def __init__(self, templates):
        self.pods: dict = {}
        self.tombstones: dict = {}
        self.templates = templates


@dataclass
class NodeState:
    node_id: int
    capacity: int
    valid: bool = True
    incarnation: int = 0
    running: frozenset = frozenset()


class Controller:
    role = "controller"
    scalar_handshake = False

    def __init__(self, name: str, env):
        self.name = name
        self.env = env
        self.up = None      # link to the upstream controller
        self.down = {}      # key -> link to a downstream controller
        self.alive = True
        self.session = 0
        self.start()

    # -- lifecycle --

    def start(self) -> None:
        """(Re)initialise for a fresh session; also used after a crash."""
        self.alive = True
        self.session = self.env.new_session()
        self.clock = VersionClock(self.session)
        self.cache = ControllerCache(self.env.templates)
        self.sessions: dict = {}     # link name -> HandshakeSession (we initiate)
        self.fetching: dict = {}     # link name -> ids requested by our upstream
        self.reply_owed = False      # upstream asked for a digest
        self.pending_up: dict = {}   # pod_id -> record, or None for a removal
        self.reset_state()

    def crash(self) -> None:
        self.alive = False
        self.cache = ControllerCache(self.env.templates)
        self.sessions.clear()
        self.pending_up.clear()

    def reset_state(self) -> None:
        pass

    # -- helpers --

    def _bare(self):
        return SimpleNamespace(templates=self.cache.templates, pods=None)

    def decode_records(self, msg: DeltaMessage) -> list:
        return materialize(msg, self._bare())

    def send(self, link, direction, ftype, msg, more=False, handshake=False):
        return self.env.send(self, link, direction, ftype, msg, more=more, handshake=handshake)

    def send_all(self, link, direction, ftype, msgs, handshake=False):
        for i, m in enumerate(msgs):
            self.send(link, direction, ftype, m, more=i < len(msgs) - 1, handshake=handshake)

    def observe(self, pid, phase, node=None):
        self.env.monitor.observe(self, pid, phase, node)

    def report_up(self, pid: int, record) -> None:
        if self.up is not None:
            self.pending_up[pid] = record

    def flush_up(self) -> None:
        if self.up is None or not self.pending_up or not self.up.usable:
            return
        for pid in sorted(self.pending_up):
            self.send(self.up, BWD, FrameType.INVALIDATE, invalidation_message(pid, self.pending_up[pid]))
        self.pending_up.clear()

    # -- frame dispatch --

    def receive(self, link, direction, ftype, more, msg) -> None:
        if not self.alive:
            return
        if direction == FWD:
            if ftype == FrameType.DIGEST:
                self.reply_owed = True
                self.try_reply()
            elif ftype == FrameType.FETCH:
                self.fetching.setdefault(link.name, []).extend(parse_ids(msg))
                if not more:
                    self._send_states(link, self.fetching.pop(link.name))
            elif ftype == FrameType.DELTA:
                self.on_delta(link, msg)
            elif ftype == FrameType.TOMBSTONE:
                for t in parse_tombstones(msg):
                    self.on_tombstone(t)
            elif ftype == FrameType.ACK:
                self.on_ack(parse_ids(msg))
        else:
            s = self.sessions.get(link.name)
            if ftype == FrameType.DIGEST and s is not None and s.stage == "digest":
                if s.add_digest(msg, more):
                    self._digest_complete(link, s)
            elif ftype == FrameType.STATE and s is not None and s.stage == "state":
                if s.add_state(self.decode_records(msg), more):
                    self._finish_handshake(link, s)
            elif ftype == FrameType.INVALIDATE:
                self.on_invalidate(link, self.decode_records(msg))
        self.env.wake(self)

    # -- responder side of the handshake --

    def downstream_settled(self) -> bool:
        return all(l.usable for l in self.down.values())

    def try_reply(self) -> None:
        """Answer the upstream's digest request once our downstreams are settled."""
        if not (self.reply_owed and self.up is not None and self.up.connected):
            return
        if not self.downstream_settled():
            return
        self.reply_owed = False
        self.send_all(self.up, BWD, FrameType.DIGEST, self.digest_for_upstream(), handshake=True)

    def _send_states(self, link, ids) -> None:
        records = self.state_for_upstream(ids)
        msgs = [invalidation_message(pid, rec) for pid, rec in records]
        self.send_all(link, BWD, FrameType.STATE, msgs, handshake=True)

    def digest_for_upstream(self) -> list:
        return digest_messages({})

    def state_for_upstream(self, ids) -> list:
        return [(pid, self.cache.pods.get(pid)) for pid in ids]

    # -- initiator side of the handshake --

    def may_handshake(self, link) -> bool:
        return True

    def start_handshake(self, link) -> None:
        if link.name in self.sessions or not (link.connected and link.handshake_required):
            return
        if not self.may_handshake(link):
            return
        s = HandshakeSession(link.name, self.scalar_handshake)
        s.frames = 1
        self.sessions[link.name] = s
        self.send(link, FWD, FrameType.DIGEST, DeltaMessage(), handshake=True)

    def _digest_complete(self, link, s) -> None:
        wanted = self.handshake_diff(link, s)
        if wanted:
            self.send_all(link, FWD, FrameType.FETCH, s.start_fetch(wanted), handshake=True)
        else:
            self._finish_handshake(link, s)

    def _finish_handshake(self, link, s) -> None:
        del self.sessions[link.name]
        self.apply_handshake_result(link, s)
        link.complete_handshake()
        self.env.handshake_completed(self, link, s)

    def handshake_diff(self, link, s) -> list:
        return []

    def apply_handshake_result(self, link, s) -> None:
        pass

    # -- link events (called by the event loop) --

    def on_link_change(self, link) -> None:
        if not self.alive:
            return
        if link is self.up:
            if not link.connected:
                self.reply_owed = False
                self.fetching.pop(link.name, None)
            elif link.usable:
                self.upstream_settled()
        else:
            if not link.connected:
                self.sessions.pop(link.name, None)
                self.downstream_lost(link)
            elif link.handshake_required:
                self.start_handshake(link)
            self.try_reply()
        self.env.wake(self)

    def upstream_settled(self) -> None:
        pass

    def downstream_lost(self, link) -> None:
        pass

    # -- control loop hooks --

    def step(self) -> None:
        pass

    def on_delta(self, link, msg) -> None:
        pass

    def on_tombstone(self, t: Tombstone) -> None:
        pass

    def on_invalidate(self, link, records) -> None:
        pass

    def on_ack(self, ids) -> None:
        pass

    def describe(self) -> dict:
        return {"name": self.name, "alive": self.alive, "session": self.session}


def _scalars(msg: DeltaMessage, kind: ObjectKind) -> dict:
    return {k.object_id: v.value for k, v in msg.entries
            if k.object_kind == kind and k.attribute_path == Attr.REPLICAS}


class Autoscaler(Controller):
    """Level-triggered: recomputes desired replicas from metrics every step."""

    role = "autoscaler"
    scalar_handshake = True

    def reset_state(self):
        self.last: dict = {}

    def crash(self):
        super().crash()
        self.last = {}

    def step(self):
        if not self.alive:
            return
        link = self.down.get("dp")
        changes = {fn: d for fn, d in self.env.desired_replicas().items() if d != self.last.get(fn, 0)}
        if changes and link is not None and link.usable:
            for msg in scalar_messages(ObjectKind.DEPLOYMENT, changes):
                self.send(link, FWD, FrameType.DELTA, msg)
            self.last.update(changes)

    def apply_handshake_result(self, link, s):
        # adopt what the downstream holds; the next step fast-forwards the rest
        self.last = dict(s.digest)


class Deployment(Controller):
    """Pass-through to the single live ReplicaSet of each function."""

    role = "deployment"
    scalar_handshake = True

    def reset_state(self):
        self.desired: dict = {}
        self.last_fwd: dict = {}

    def on_delta(self, link, msg):
        self.desired.update(_scalars(msg, ObjectKind.DEPLOYMENT))

    def step(self):
        if not self.alive:
            return
        link = self.down.get("rs")
        changes = {fn: d for fn, d in self.desired.items() if self.last_fwd.get(fn) != d}
        if changes and link is not None and link.usable:
            for msg in scalar_messages(ObjectKind.REPLICASET, changes):
                self.send(link, FWD, FrameType.DELTA, msg)
            self.last_fwd.update(changes)

    def digest_for_upstream(self):
        return scalar_messages(ObjectKind.DEPLOYMENT, self.desired)

    def apply_handshake_result(self, link, s):
        # whatever the downstream does not report must be forwarded again
        self.last_fwd = dict(s.digest)
        for fn, n in s.digest.items():
            self.desired.setdefault(fn, n)


class ReplicaSet(Controller):
    role = "replicaset"

    def reset_state(self):
        self.desired: dict = {}
        self.unsent: set = set()      # created here, not yet handed to the scheduler
        self.tomb_sent: set = set()   # tombstones replicated since the last handshake
        self.gone: set = set()        # removed or discarded this session
        for rec in self.env.registry.published(exclude_function=PRIORITY_FUNCTION):
            self.cache.pods[rec.pod_id] = replace(rec, marks=frozenset())
            self.observe(rec.pod_id, rec.phase, rec.node)
        for rec in self.cache.pods.values():
            self.desired[rec.function_id] = self.desired.get(rec.function_id, 0) + 1

    @property
    def link(self):
        return self.down.get("sc")

    def on_delta(self, link, msg):
        self.desired.update(_scalars(msg, ObjectKind.REPLICASET))

    def step(self):
        if not self.alive:
            return
        by_fn: dict = {}
        for pid, r in self.cache.pods.items():
            if r.live:
                by_fn.setdefault(r.function_id, []).append(pid)
        for fn in sorted(self.desired):
            live = sorted(by_fn.get(fn, ()))
            want = self.desired[fn]
            if want > len(live):
                self._create(fn, want - len(live))
            elif want < len(live):
                # newest first
                for pid in live[::-1][:len(live) - want]:
                    self._terminate(pid)
        self._flush()

    def _create(self, fn, count):
        durable = self.env.durable
        batch_id = durable["max_pod_id"]
        durable["max_pod_id"] = batch_id + count
        version = self.clock.tick()
        ids = range(batch_id + 1, batch_id + count + 1)
        for pid in ids:
            self.cache.pods[pid] = PodRecord(pid, fn, None, LifecyclePhase.PENDING, version)
            self.observe(pid, LifecyclePhase.PENDING)
        link = self.link
        if link is not None and link.usable and not self.unsent:
            self.send(link, FWD, FrameType.DELTA, batch_message(batch_id, count, fn, version))
        else:
            self.unsent.update(ids)

    def _terminate(self, pid):
        rec = self.cache.pods[pid]
        phase = lifecycle_transition(rec.phase, LifecycleEvent.MARK_TERMINATING)
        rec = replace(rec, phase=phase, version=self.clock.tick())
        self.cache.pods[pid] = rec
        self.observe(pid, phase, rec.node)
        t = Tombstone(pid, self.name, self.session)
        self.cache.tombstones[pid] = t
        self.env.monitor.tombstone_held(self, pid)
        if pid in self.unsent:
            # never forwarded, so nothing downstream can hold it
            self.resolve_tombstone(t)

    def _remove(self, pid):
        rec = self.cache.pods.pop(pid, None)
        if rec is not None:
            if rec.phase < LifecyclePhase.TERMINATING:
                self.observe(pid, LifecyclePhase.TERMINATING, rec.node)
            self.observe(pid, LifecyclePhase.REMOVED, rec.node)
        if self.cache.tombstones.pop(pid, None) is not None:
            self.env.monitor.tombstone_dropped(self, pid)
        self.unsent.discard(pid)
        self.tomb_sent.discard(pid)
        self.gone.add(pid)

    def _flush(self):
        link = self.link
        if link is None or not link.usable:
            return
        run = []  # contiguous fresh pods of one function go out as one batch
        for pid in sorted(self.unsent) + [None]:
            rec = self.cache.pods.get(pid) if pid is not None else None
            fresh = rec is not None and rec.live and rec.node is None and rec.phase == LifecyclePhase.PENDING
            if run and not (fresh and pid == run[-1] + 1 and rec.function_id == self.cache.pods[run[0]].function_id):
                self._send_batch(link, run)
                run = []
            if fresh:
                run.append(pid)
            elif rec is not None and rec.live:
                self.send(link, FWD, FrameType.DELTA, record_message(rec))
        self.unsent.clear()
        for pid in sorted(self.cache.tombstones):
            if pid not in self.tomb_sent:
                self.replicate_tombstone(self.cache.tombstones[pid], link)

    def _send_batch(self, link, ids):
        # restamp so one version covers the whole batch
        version = self.clock.tick()
        fn = self.cache.pods[ids[0]].function_id
        for pid in ids:
            self.cache.pods[pid] = replace(self.cache.pods[pid], version=version)
        self.send(link, FWD, FrameType.DELTA, batch_message(ids[0] - 1, len(ids), fn, version))

    def replicate_tombstone(self, t, link=None):
        link = link or self.link
        if link is None or not link.usable:
            return False
        self.send(link, FWD, FrameType.TOMBSTONE, tombstone_message(t))
        self.tomb_sent.add(t.pod_id)
        return True

    def resolve_tombstone(self, t):
        pid = t.pod_id
        if pid not in self.cache.pods or pid in self.unsent:
            self._remove(pid)
            return TombstoneStatus.RESOLVED
        return TombstoneStatus.PENDING

    def on_invalidate(self, link, records):
        acks = []
        for rec in records:
            pid = rec.pod_id
            if rec.phase == LifecyclePhase.REMOVED:
                self._remove(pid)
                acks.append(pid)
            elif pid in self.cache.pods:
                merged = merge_record(self.cache.pods[pid], rec)
                self.cache.pods[pid] = replace(merged, marks=frozenset())
                self.observe(pid, merged.phase, merged.node)
            elif pid not in self.gone and rec.function_id != PRIORITY_FUNCTION:
                self.cache.pods[pid] = rec
                self.observe(pid, rec.phase, rec.node)
        if acks and link.usable:
            for m in ack_messages(acks):
                self.send(link, FWD, FrameType.ACK, m)

    def digest_for_upstream(self):
        return scalar_messages(ObjectKind.REPLICASET, self.desired)

    def handshake_diff(self, link, s):
        local = {pid: r for pid, r in self.cache.pods.items() if pid not in self.unsent}
        fetch, local_only = diff_digest(local, s.digest)
        s.local_only = local_only
        s.mode = handshake_mode(local)
        return fetch

    def apply_handshake_result(self, link, s):
        pods = self.cache.pods
        held = {pid: pods.pop(pid) for pid in list(self.unsent) if pid in pods}
        invalidate = self.env.flags.get("reset_invalidates", True)
        changes = apply_handshake(pods, [r for r in s.fetched if r.pod_id not in self.gone],
                                  s.local_only, s.mode, invalidate=invalidate)
        pods.update(held)
        for pid in changes.overwritten:
            pods[pid] = replace(pods[pid], marks=frozenset())
            self.observe(pid, pods[pid].phase, pods[pid].node)
        for pid in s.local_only:
            rec = pods.get(pid)
            if rec is None:
                continue
            if pid in changes.invalidated or rec.phase >= LifecyclePhase.TERMINATING:
                # no upstream holds pods, so invalid records are discarded at once
                self._remove(pid)
                self.env.monitor.discarded(self, pid)
            else:
                self.unsent.add(pid)
        self.last_changes = changes
        self.tomb_sent.clear()


class LeastLoaded:
    """Place on the feasible node with fewest pods; ties go to the lower id."""

    def choose(self, candidates):
        best = None
        for node_id, load, capacity in candidates:
            if load >= capacity:
                continue
            if best is None or (load, node_id) < best:
                best = (load, node_id)
        if best is None:
            raise NoFeasibleNode()
        return best[1]


class Scheduler(Controller):
    role = "scheduler"

    def __init__(self, name, env, policy=None):
        self.policy = policy or LeastLoaded()
        super().__init__(name, env)

    def reset_state(self):
        reg = self.env.registry
        self.nodes = {n: NodeState(n, info.capacity, info.valid, info.incarnation)
                      for n, info in reg.nodes.items()}
        self.cancelled = {n: (info.incarnation if not info.valid else -1) for n, info in reg.nodes.items()}
        for rec in reg.published():
            self.cache.pods[rec.pod_id] = replace(rec, marks=frozenset())
            self.observe(rec.pod_id, rec.phase, rec.node)
        self.awaiting_ack: dict = {}
        self.tomb_sent = {n: set() for n in self.nodes}
        self.redeliver = {n: set() for n in self.nodes}
        self.waiting: dict = {}      # victim pod_id -> (priority pod, node)
        self.down_since: dict = {}
        self.gone: set = set()
        self.unplaced = 0

    # -- views --

    def loads(self):
        counts = {n: 0 for n in self.nodes}
        for r in self.cache.pods.values():
            if r.node is not None:
                counts[r.node] += 1
        for _, m in self.waiting.values():
            counts[m] += 1
        return counts

    def load(self, node):
        return self.loads()[node]

    def feasible(self, node):
        link = self.down.get(node)
        st = self.nodes[node]
        return st.valid and link is not None and link.usable

    def candidates(self, loads=None):
        loads = loads if loads is not None else self.loads()
        return [(n, loads[n], self.nodes[n].capacity) for n in sorted(self.nodes) if self.feasible(n)]

    def downstream_settled(self):
        return all(l.usable or not self.nodes[n].valid for n, l in self.down.items())

    def may_handshake(self, link):
        n = self._node_of(link)
        return self.nodes[n].valid

    def _node_of(self, link):
        for n, l in self.down.items():
            if l is link:
                return n
        raise KeyError(link.name)

    # -- control loop --

    def step(self):
        if not self.alive:
            return
        held = {p.pod_id for p, _ in self.waiting.values()}
        unbound = sorted(pid for pid, r in self.cache.pods.items()
                         if r.node is None and r.live and pid not in held)
        if unbound:
            loads = self.loads()
            cands = self.candidates(loads)
            for pid in unbound:
                try:
                    node = self.policy.choose(cands)
                except NoFeasibleNode:
                    self.unplaced += 1
                    break
                self._bind(pid, node)
                cands = [(n, l + (n == node), c) for n, l, c in cands]
        for n, link in sorted(self.down.items()):
            if not link.usable:
                continue
            for pid in sorted(self.redeliver[n]):
                rec = self.cache.pods.get(pid)
                if rec is not None and rec.node == n and rec.live:
                    self.send(link, FWD, FrameType.DELTA, record_message(rec))
            self.redeliver[n].clear()
            for pid in sorted(self.cache.tombstones):
                rec = self.cache.pods.get(pid)
                if rec is not None and rec.node == n and pid not in self.tomb_sent[n]:
                    self.replicate_tombstone(self.cache.tombstones[pid], link)
        self.flush_up()

    def _bind(self, pid, node):
        rec = replace(self.cache.pods[pid], node=node, version=self.clock.tick())
        self.cache.pods[pid] = rec
        self.observe(pid, rec.phase, node)
        self.send(self.down[node], FWD, FrameType.DELTA, record_message(rec))
        self.report_up(pid, rec)

    def report_up(self, pid, record):
        rec = record or self.cache.pods.get(pid) or self.awaiting_ack.get(pid)
        if rec is not None and rec.function_id == PRIORITY_FUNCTION:
            return
        super().report_up(pid, record)

    def replicate_tombstone(self, t, link=None):
        rec = self.cache.pods.get(t.pod_id)
        if rec is None or rec.node is None:
            return False
        link = link or self.down.get(rec.node)
        if link is None or not link.usable:
            return False
        self.send(link, FWD, FrameType.TOMBSTONE, tombstone_message(t))
        self.tomb_sent[rec.node].add(t.pod_id)
        return True

    def resolve_tombstone(self, t):
        rec = self.cache.pods.get(t.pod_id)
        if rec is None:
            if self.cache.tombstones.pop(t.pod_id, None) is not None:
                self.env.monitor.tombstone_dropped(self, t.pod_id)
            self.report_up(t.pod_id, None)
            return TombstoneStatus.RESOLVED
        if rec.node is None:
            self._remove(t.pod_id)
            return TombstoneStatus.RESOLVED
        return TombstoneStatus.PENDING

    def _remove(self, pid):
        rec = self.cache.pods.pop(pid, None)
        if rec is None:
            return
        if rec.phase < LifecyclePhase.TERMINATING:
            self.observe(pid, LifecyclePhase.TERMINATING, rec.node)
        self.observe(pid, LifecyclePhase.REMOVED, rec.node)
        if self.cache.tombstones.pop(pid, None) is not None:
            self.env.monitor.tombstone_dropped(self, pid)
        if rec.node is not None:
            self.redeliver[rec.node].discard(pid)
            self.tomb_sent[rec.node].discard(pid)
        self.gone.add(pid)
        if rec.function_id != PRIORITY_FUNCTION:
            self.awaiting_ack[pid] = rec.with_marks(Mark.INVALID)
            self.report_up(pid, None)
        if pid in self.waiting:
            pod, node = self.waiting.pop(pid)
            self._place_priority(pod, node)

    # -- incoming traffic --

    def on_delta(self, link, msg):
        for rec in self.decode_records(msg):
            pid = rec.pod_id
            if pid in self.cache.pods or pid in self.awaiting_ack:
                continue
            if pid in self.gone:
                self.report_up(pid, None)
                continue
            self.cache.pods[pid] = replace(rec, node=None, marks=frozenset())
            self.observe(pid, rec.phase)

    def on_tombstone(self, t):
        pid = t.pod_id
        self.env.monitor.tombstone_held(self, pid)
        self.cache.tombstones[pid] = t
        rec = self.cache.pods.get(pid)
        if rec is None or rec.node is None:
            self.resolve_tombstone(t)
            return
        if rec.phase < LifecyclePhase.TERMINATING:
            rec = replace(rec, phase=lifecycle_transition(rec.phase, LifecycleEvent.MARK_TERMINATING),
                          version=self.clock.tick())
            self.cache.pods[pid] = rec
            self.observe(pid, rec.phase, rec.node)
        self.replicate_tombstone(t)

    def on_invalidate(self, link, records):
        node = self._node_of(link)
        acks = []
        for rec in records:
            pid = rec.pod_id
            if rec.phase == LifecyclePhase.REMOVED:
                acks.append(pid)
                self._remove(pid)
            elif pid in self.cache.pods:
                merged = replace(merge_record(self.cache.pods[pid], rec), marks=frozenset())
                self.cache.pods[pid] = merged
                self.observe(pid, merged.phase, merged.node)
                self.report_up(pid, merged)
            elif pid not in self.gone:
                self.cache.pods[pid] = replace(rec, node=rec.node or node)
                self.observe(pid, rec.phase, rec.node or node)
                self.report_up(pid, self.cache.pods[pid])
        if acks and link.usable:
            for m in ack_messages(acks):
                self.send(link, FWD, FrameType.ACK, m)

    def on_ack(self, ids):
        for pid in ids:
            if self.awaiting_ack.pop(pid, None) is not None:
                self.env.monitor.discarded(self, pid)

    # -- handshakes --

    def _upstream_view(self):
        return {pid: r for pid, r in self.cache.pods.items() if r.function_id != PRIORITY_FUNCTION}

    def digest_for_upstream(self):
        return digest_messages(pod_digest(self._upstream_view()))

    def state_for_upstream(self, ids):
        view = self._upstream_view()
        return [(pid, view.get(pid)) for pid in ids]

    def upstream_settled(self):
        # invalid records are dropped once the upstream has re-synchronised
        for pid in sorted(self.awaiting_ack):
            self.env.monitor.discarded(self, pid)
        self.awaiting_ack.clear()

    def handshake_diff(self, link, s):
        node = self._node_of(link)
        local = {pid: r for pid, r in self.cache.pods.items() if r.node == node}
        fetch, local_only = diff_digest(local, s.digest)
        s.local_only = local_only
        s.mode = handshake_mode(local)
        return fetch

    def apply_handshake_result(self, link, s):
        node = self._node_of(link)
        pods = self.cache.pods
        for rec in s.fetched:
            if rec.phase == LifecyclePhase.REMOVED:
                self._remove(rec.pod_id)
                continue
            if rec.pod_id in self.gone and rec.pod_id not in pods:
                continue
            merged = merge_record(pods.get(rec.pod_id), replace(rec, node=rec.node or node))
            pods[rec.pod_id] = replace(merged, marks=frozenset())
            self.observe(rec.pod_id, merged.phase, merged.node)
            self.report_up(rec.pod_id, pods[rec.pod_id])
        for pid in s.local_only:
            rec = pods.get(pid)
            if rec is None:
                continue
            if rec.phase >= LifecyclePhase.TERMINATING:
                # tombstoned and no longer at the node: termination is done
                self._remove(pid)
            else:
                self.redeliver[node].add(pid)
        self.tomb_sent[node].clear()

    def downstream_lost(self, link):
        node = self._node_of(link)
        self.tomb_sent[node].clear()
        self.redeliver[node].clear()
        since = self.env.now
        self.down_since[node] = since
        self.env.schedule(self.env.config["cancel_timeout"], self._cancel_check, node, since, self.session)

    def _cancel_check(self, node, since, session):
        if not self.alive or session != self.session or self.down_since.get(node) != since:
            return
        if self.down[node].usable or not self.nodes[node].valid:
            return
        self.cancel_node(node, self.env.registry)

    def cancel_node(self, node, registry):
        st = self.nodes[node]
        inc = registry.invalidate_node(node)
        st.valid = False
        self.cancelled[node] = inc
        self.sessions.pop(self.down[node].name, None)
        for pid in sorted(pid for pid, r in self.cache.pods.items() if r.node == node):
            self._remove(pid)
        for victim, (pod, m) in list(self.waiting.items()):
            if m == node:
                del self.waiting[victim]
        self.env.monitor.node_cancelled(self, node)
        self.try_reply()
        self.env.wake(self)

    def node_changed(self, node, valid, incarnation):
        """Registry notification about a Node object."""
        if not self.alive:
            return
        st = self.nodes[node]
        if valid and incarnation > self.cancelled.get(node, -1):
            st.valid = True
            st.incarnation = incarnation
            link = self.down[node]
            if link.connected and link.handshake_required:
                self.start_handshake(link)
        self.env.wake(self)

    # -- preemption --

    def preempt(self, victim, pod):
        rec = self.cache.pods.get(victim)
        pod = replace(pod, function_id=PRIORITY_FUNCTION, node=None)
        self.cache.pods[pod.pod_id] = pod
        self.observe(pod.pod_id, pod.phase)
        if rec is None or rec.node is None:
            if rec is not None:
                self._remove(victim)
            try:
                node = self.policy.choose(self.candidates())
            except NoFeasibleNode:
                return PlacementOutcome.TIMED_WAITING
            self._place_priority(pod, node)
            return PlacementOutcome.PLACED
        node = rec.node
        self.waiting[victim] = (pod, node)
        t = Tombstone(victim, self.name, self.session)
        self.on_tombstone(t)
        self.env.wake(self)
        if self.down[node].usable:
            return PlacementOutcome.PLACED
        return PlacementOutcome.TIMED_WAITING

    def _place_priority(self, pod, node):
        if pod.pod_id not in self.cache.pods:
            return
        link = self.down[node]
        if not (self.nodes[node].valid and link.usable):
            return  # stays unbound; the normal loop places it later
        self._bind(pod.pod_id, node)


class Kubelet(Controller):
    role = "kubelet"

    def __init__(self, name, env, node_id, capacity):
        self.node_id = node_id
        self.capacity = capacity
        super().__init__(name, env)

    def reset_state(self):
        reg = self.env.registry
        info = reg.nodes[self.node_id]
        self.incarnation = info.incarnation
        self.no_resurrect = set(reg.no_resurrect(self.node_id))
        for rec in reg.published(node=self.node_id):
            self.cache.pods[rec.pod_id] = replace(rec, marks=frozenset())
            self.observe(rec.pod_id, rec.phase, rec.node)
        self.rejected = 0
        if not info.valid:
            self.drain()

    @property
    def state(self) -> NodeState:
        return NodeState(self.node_id, self.capacity, self.env.registry.nodes[self.node_id].valid,
                         self.incarnation, frozenset(self.cache.pods))

    def live_count(self):
        return sum(1 for r in self.cache.pods.values() if r.live)

    def on_delta(self, link, msg):
        for rec in self.decode_records(msg):
            self.admit(rec)

    def admit(self, rec):
        pid = rec.pod_id
        if pid in self.no_resurrect and self.env.flags.get("no_resurrection", True):
            self.report_up(pid, None)
            return False
        if pid in self.cache.pods:
            return False
        if self.live_count() >= self.capacity:
            self.rejected += 1
            self._forbid(pid)
            self.report_up(pid, None)
            self.env.monitor.capacity_exceeded(self, pid)
            return False
        rec = replace(rec, node=self.node_id, phase=LifecyclePhase.PENDING, marks=frozenset())
        self.cache.pods[pid] = rec
        self.observe(pid, rec.phase, rec.node)
        self.env.schedule(self.env.config["startup_delay"], self._ready, pid, self.session)
        return True

    def _ready(self, pid, session):
        rec = self.cache.pods.get(pid)
        if not self.alive or session != self.session or rec is None or rec.phase != LifecyclePhase.PENDING:
            return
        phase = lifecycle_transition(rec.phase, LifecycleEvent.MARK_READY)
        rec = replace(rec, phase=phase, version=self.clock.tick())
        self.cache.pods[pid] = rec
        self.observe(pid, phase, rec.node)
        self.env.registry.publish(self, rec)
        self.env.monitor.cold_start(self, pid)
        self.report_up(pid, rec)
        self.env.wake(self)

    def _forbid(self, pid):
        self.no_resurrect.add(pid)
        self.env.registry.forbid(self.node_id, pid)

    def terminate(self, pid):
        rec = self.cache.pods.get(pid)
        if rec is None:
            raise UnknownPod(pid)
        if rec.phase < LifecyclePhase.TERMINATING:
            rec = replace(rec, phase=lifecycle_transition(rec.phase, LifecycleEvent.MARK_TERMINATING))
            self.observe(pid, rec.phase, rec.node)
        self._forbid(pid)
        self.env.registry.withdraw(self, pid)
        lifecycle_transition(rec.phase, LifecycleEvent.REMOVE)
        del self.cache.pods[pid]
        self.observe(pid, LifecyclePhase.REMOVED, rec.node)
        self.report_up(pid, None)
        self.env.wake(self)

    def evict(self, pid):
        """Local eviction, e.g. under resource contention."""
        self.terminate(pid)

    def on_tombstone(self, t):
        self.env.monitor.tombstone_held(self, t.pod_id)
        if t.pod_id in self.cache.pods:
            self.terminate(t.pod_id)
        else:
            self._forbid(t.pod_id)
            self.report_up(t.pod_id, None)
        self.env.monitor.tombstone_dropped(self, t.pod_id)

    def step(self):
        if self.alive:
            self.flush_up()

    def downstream_settled(self):
        return True

    def digest_for_upstream(self):
        return digest_messages(pod_digest(self.cache.pods))

    def node_changed(self, node, valid, incarnation):
        if self.alive and not valid and incarnation >= self.incarnation:
            self.drain()

    def drain(self):
        for pid in sorted(self.cache.pods):
            self.terminate(pid)
        self.incarnation = self.env.registry.register_node(self.node_id)
