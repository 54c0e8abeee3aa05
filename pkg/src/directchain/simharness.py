"""Deterministic discrete-event simulation of the controller chain.

Events run in (time, creation order).  Faults come from a scenario
script.  Online monitors record every invariant violation, and the run
stops at the first one.
"""

from __future__ import annotations

import enum
import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field, asdict

from .core import LifecyclePhase, ScalingCommand, is_legal_path
from .controllers import (
    PRIORITY_FUNCTION, Autoscaler, Deployment, Kubelet, ReplicaSet, Scheduler, UnknownPod,
)
from .materialization import (
    ENTRY_BUDGET, TEMPLATE_SIZE, DeltaMessage, FrameType, ObjectKind, TemplateStore, decode_frame,
    encode_frame_sized,
)
from .transport import Direction, Link, SendStatus


class Mode(enum.Enum):
    DIRECT = "direct"
    CENTRALIZED = "centralized"


class InvariantViolation(Exception):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


DEFAULTS = {
    "num_nodes": 2,
    "node_capacity": 8,
    "link_latency": 1,
    "call_latency": 20,
    "rate_calls": 20,          # per controller, per rate_window
    "rate_window": 1000,
    "burst": 20,
    "payload_bytes": TEMPLATE_SIZE,
    "serialize_per_kb": 0.1,   # time units per KB written through the registry
    "notify_latency": 1,
    "startup_delay": 0,
    "restart_delay": 10,
    "cancel_timeout": 60,
    "max_sim_time": 5000,
    "convergence_budget": 1500,
}

# performance comparisons use a sandbox startup cost; protocol runs do not
PERF_DEFAULTS = {"startup_delay": 2500, "max_sim_time": 10_000_000, "node_capacity": 1_000_000}


@dataclass(frozen=True)
class FaultEvent:
    at_time: int
    kind: str            # crash | disconnect | reconnect | partition | evict
    args: tuple = ()

    def describe(self) -> str:
        return f"{self.kind} {' '.join(str(a) for a in self.args)}".strip()


@dataclass
class Scenario:
    seed: int = 0
    num_nodes: int = 2
    node_capacity: int = 8
    scaling_commands: list = field(default_factory=list)
    fault_script: list = field(default_factory=list)
    mode: Mode = Mode.DIRECT
    params: dict = field(default_factory=dict)

    def param(self, key):
        return self.params.get(key, DEFAULTS[key])

    @property
    def functions(self):
        return sorted({c.function_id for c in self.scaling_commands})

    def final_desired(self) -> dict:
        out = {}
        for c in sorted(self.scaling_commands):
            out[c.function_id] = c.desired_replicas
        return out

    def faults_end(self) -> int:
        return max((f.at_time for f in self.fault_script), default=0)

    def with_mode(self, mode):
        return Scenario(self.seed, self.num_nodes, self.node_capacity, list(self.scaling_commands),
                        list(self.fault_script), mode, dict(self.params))


class TokenBucket:
    """Virtual-time rate limiter: ``rate`` calls per ``window`` with a burst allowance."""

    def __init__(self, rate, window, burst):
        self.interval = window / rate
        self.tolerance = (burst - 1) * self.interval
        self.tat = 0.0

    def acquire(self, now) -> float:
        start = max(now, self.tat - self.tolerance)
        self.tat = max(self.tat, now) + self.interval
        return start


@dataclass
class NodeInfo:
    capacity: int
    valid: bool = True
    incarnation: int = 0


class Registry:
    """Stand-in for the API server.

    Writes are durable when issued; they become visible (and count as
    published) after the rate limiter and call latency.
    """

    def __init__(self, sim, num_nodes, capacity):
        self.sim = sim
        self.nodes = {n: NodeInfo(capacity) for n in range(1, num_nodes + 1)}
        self.pods: dict = {}            # durable view
        self.visible: dict = {}         # applied view
        self._no_resurrect = {n: set() for n in self.nodes}
        self.terminated: set = set()    # withdrawn after termination
        self.buckets: dict = {}
        self.calls = 0
        self.changes: list = []          # (time, function_id) of visible changes

    def bucket(self, client):
        b = self.buckets.get(client)
        if b is None:
            p = self.sim.param
            b = self.buckets[client] = TokenBucket(p("rate_calls"), p("rate_window"), p("burst"))
        return b

    def call_done(self, client, count=1, payload=0) -> float:
        """Completion time of ``count`` rate-limited calls issued now."""
        p = self.sim.param
        b = self.bucket(client)
        start = self.sim.now
        for _ in range(count):
            start = b.acquire(self.sim.now)
        self.calls += count
        ser = p("serialize_per_kb") * payload / 1024
        return start + p("call_latency") + ser

    # -- pods --

    def published(self, node=None, exclude_function=None):
        return [r for pid, r in sorted(self.pods.items())
                if (node is None or r.node == node) and r.function_id != exclude_function]

    def publish(self, kubelet, rec):
        if rec.pod_id in self.terminated:
            self.sim.monitor.violation(f"no-resurrection: registry republish of terminated pod {rec.pod_id}")
        self.pods[rec.pod_id] = rec
        self._write(kubelet.name, ("publish", rec))

    def withdraw(self, kubelet, pid):
        if self.pods.pop(pid, None) is not None:
            self._write(kubelet.name, ("withdraw", pid))
        self.terminated.add(pid)

    def _write(self, client, op):
        due = self.call_done(client)
        self.sim.at(max(due, self.sim.now), self._apply, op)

    def _apply(self, op):
        kind, arg = op
        if kind == "publish":
            self.visible[arg.pod_id] = arg
            self.changes.append((self.sim.now, arg.function_id))
        else:
            rec = self.visible.pop(arg, None)
            if rec is not None:
                self.changes.append((self.sim.now, rec.function_id))

    # -- nodes --

    def no_resurrect(self, node):
        return self._no_resurrect[node]

    def forbid(self, node, pid):
        self._no_resurrect[node].add(pid)

    def invalidate_node(self, node) -> int:
        info = self.nodes[node]
        info.valid = False
        self._notify(node)
        return info.incarnation

    def register_node(self, node) -> int:
        info = self.nodes[node]
        info.incarnation += 1
        info.valid = True
        self._notify(node)
        return info.incarnation

    def _notify(self, node):
        info = self.nodes[node]
        valid, inc = info.valid, info.incarnation
        for ctrl in (self.sim.controllers["sc"], self.sim.controllers[f"k{node}"]):
            self.sim.after(self.sim.param("notify_latency"), ctrl.node_changed, node, valid, inc)


class Monitor:
    """Online invariant checks over everything controllers observe."""

    def __init__(self, sim):
        self.sim = sim
        self.violations: list = []
        self.history: dict = {}          # (controller, session, pod) -> last phase
        self.bindings: dict = {}         # pod -> node
        self.tail_terminated: set = set()
        self._discarded: set = set()     # (controller, session, pod)
        self.tomb_holders: dict = {}     # pod -> {controller: first hold time}
        self.tomb_current: dict = {}     # pod -> set of controllers holding now
        self.crash_times: dict = {}
        self.cold_starts = 0
        self.capacity_rejections = 0
        self.cancellations = 0
        self.max_footprint = 0

    def violation(self, text):
        self.violations.append(f"t={self.sim.now}: {text}")
        self.sim.stop = True

    def observe(self, ctrl, pid, phase, node):
        key = (ctrl.name, ctrl.session, pid)
        prev = self.history.get(key)
        if prev is not None and not is_legal_path(prev, phase):
            self.violation(f"lifecycle: {ctrl.name} saw pod {pid} go {prev.name} -> {phase.name}")
        self.history[key] = phase
        if node is not None:
            bound = self.bindings.setdefault(pid, node)
            if bound != node:
                self.violation(f"unique-binding: pod {pid} bound to node {bound} and node {node}")
        if ctrl.role == "kubelet":
            if phase >= LifecyclePhase.TERMINATING:
                self.tail_terminated.add(pid)
            elif pid in self.tail_terminated:
                self.violation(f"no-resurrection: {ctrl.name} runs terminated pod {pid} again")
        if phase != LifecyclePhase.REMOVED and key in self._discarded:
            self.violation(f"ack-safety: {ctrl.name} discarded pod {pid} and holds it again")

    def discarded(self, ctrl, pid):
        """``ctrl`` dropped ``pid`` after an acknowledgement (or re-sync)."""
        self._discarded.add((ctrl.name, ctrl.session, pid))

    def tombstone_held(self, ctrl, pid):
        self.tomb_holders.setdefault(pid, {}).setdefault(ctrl.name, self.sim.now)
        self.tomb_current.setdefault(pid, set()).add(ctrl.name)

    def tombstone_dropped(self, ctrl, pid):
        self.tomb_current.get(pid, set()).discard(ctrl.name)

    def crashed(self, ctrl):
        self.crash_times.setdefault(ctrl.name, []).append(self.sim.now)
        for holders in self.tomb_current.values():
            holders.discard(ctrl.name)

    def cold_start(self, ctrl, pid):
        self.cold_starts += 1

    def capacity_exceeded(self, ctrl, pid):
        self.capacity_rejections += 1

    def node_cancelled(self, ctrl, node):
        self.cancellations += 1

    def footprint(self, size):
        if size > self.max_footprint:
            self.max_footprint = size
        if size > ENTRY_BUDGET:
            self.violation(f"message-size: {size} bytes for one object")

    def audit_tombstones(self):
        """A tombstone may vanish with its pod alive only if every holder crashed after holding it."""
        sim = self.sim
        for pid, holders in sorted(self.tomb_holders.items()):
            if self.tomb_current.get(pid):
                continue
            alive = pid in sim.registry.pods or any(
                pid in k.cache.pods for k in sim.kubelets.values() if k.alive)
            if not alive:
                continue
            for name, held_at in holders.items():
                if not any(t >= held_at for t in self.crash_times.get(name, ())):
                    self.violation(f"tombstone-durability: tombstone for pod {pid} lost at {name}"
                                   " without a crash while the pod still runs")
                    break


@dataclass
class RunMetrics:
    mode: str
    end_time: float = 0
    converged: bool = False
    e2e_latency: float | None = None
    latency_by_function: dict = field(default_factory=dict)
    messages: int = 0
    message_bytes: int = 0
    messages_by_link: dict = field(default_factory=dict)
    bytes_by_link: dict = field(default_factory=dict)
    handshake_frames: int = 0
    handshakes: int = 0
    registry_calls: int = 0
    busy_time: dict = field(default_factory=dict)
    cold_starts: int = 0
    max_object_bytes: int = 0
    cancellations: int = 0
    events: int = 0
    published: dict = field(default_factory=dict)
    desired: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_kv(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                for k, v in sorted(value.items(), key=lambda kv: str(kv[0])):
                    lines.append(f"{key}.{k}={v}")
            elif isinstance(value, list):
                lines.append(f"{key}.count={len(value)}")
                for i, v in enumerate(value):
                    lines.append(f"{key}.{i}={v}")
            else:
                lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


CONTROL_FRAMES = (FrameType.DELTA, FrameType.TOMBSTONE)
SCALAR_KINDS = (ObjectKind.DEPLOYMENT, ObjectKind.REPLICASET)
HANDSHAKE_FRAMES = (FrameType.DIGEST, FrameType.FETCH, FrameType.STATE)


class Simulation:
    def __init__(self, scenario: Scenario, flags=None, keep_trace=False, trace_tail=64):
        self.scenario = scenario
        self.mode = scenario.mode
        self.flags = dict(flags or {})
        self.now = 0
        self.stop = False
        self._heap: list = []
        self._seq = 0
        self._busy_events = 0     # pending events that count against quiescence
        self._woken: set = set()
        self._quiet_checked = False
        self.keep_trace = keep_trace
        self.trace = [] if keep_trace else deque(maxlen=trace_tail)
        self.events = 0
        self.config = {"cancel_timeout": self.param("cancel_timeout"),
                       "startup_delay": self.param("startup_delay")}
        self.templates = TemplateStore.for_functions(set(scenario.functions) | {PRIORITY_FUNCTION})
        self.durable = {"max_pod_id": 0}
        self._next_session = 0
        self.partitioned: set = set()
        self.monitor = Monitor(self)
        self.registry = Registry(self, scenario.num_nodes, scenario.node_capacity)
        self.handshake_frames = 0
        self.handshakes = 0
        self.handshake_log: list = []
        self.busy: dict = {}
        self.commands = sorted(scenario.scaling_commands)
        self.instant_hook = None  # called with the simulation after each distinct timestamp
        self.link_stats: dict = {}
        self._build()

    def param(self, key):
        return self.scenario.param(key)

    # -- topology --

    def _build(self):
        n = self.scenario.num_nodes
        self.controllers = {}
        self.controllers["as"] = Autoscaler("as", self)
        self.controllers["dp"] = Deployment("dp", self)
        self.controllers["rs"] = ReplicaSet("rs", self)
        self.controllers["sc"] = Scheduler("sc", self)
        self.kubelets = {}
        for node in range(1, n + 1):
            k = Kubelet(f"k{node}", self, node, self.scenario.node_capacity)
            self.controllers[k.name] = k
            self.kubelets[node] = k
        self.links = {}
        self._wire("as", "dp", "dp")
        self._wire("dp", "rs", "rs")
        self._wire("rs", "sc", "sc")
        for node in range(1, n + 1):
            self._wire("sc", f"k{node}", node)

    def _wire(self, up, down, key):
        link = Link(f"{up}-{down}", up, down, latency=self.param("link_latency"))
        link.on_enqueue = lambda due, link=link: self.at(due, self._deliver, link)
        self.links[link.name] = link
        self.controllers[up].down[key] = link
        self.controllers[down].up = link

    def adjacent(self, name):
        return [l for l in self.links.values() if name in (l.upstream, l.downstream)]

    # -- env interface used by controllers --

    def new_session(self) -> int:
        self._next_session += 1
        return self._next_session

    def desired_replicas(self) -> dict:
        out = {}
        for c in self.commands:
            if c.issue_time > self.now:
                break
            out[c.function_id] = c.desired_replicas
        return out

    def at(self, time, fn, *args, background=False):
        self._seq += 1
        if not background:
            self._busy_events += 1
        heapq.heappush(self._heap, (time, self._seq, background, fn, args))

    def after(self, delay, fn, *args, background=False):
        self.at(self.now + delay, fn, *args, background=background)

    def schedule(self, delay, fn, *args):
        # cancellation checks are timers that may never matter; do not let them block quiescence
        self.after(delay, fn, *args, background=getattr(fn, "__name__", "") == "_cancel_check")

    def wake(self, ctrl):
        if ctrl.name not in self._woken:
            self._woken.add(ctrl.name)
            self.at(self.now, self._step, ctrl)

    def _step(self, ctrl):
        self._woken.discard(ctrl.name)
        if ctrl.alive:
            ctrl.step()

    def send(self, ctrl, link, direction, ftype, msg, more=False, handshake=False):
        if (self.mode == Mode.CENTRALIZED and direction == Direction.FORWARD
                and ftype in CONTROL_FRAMES and _object_count(msg) > 1):
            # one write per object; watchers see each as soon as it lands
            status = SendStatus.ACCEPTED
            for part in _per_object(msg):
                status = self._send_one(ctrl, link, direction, ftype, part, more, handshake)
            return status
        return self._send_one(ctrl, link, direction, ftype, msg, more, handshake)

    def _send_one(self, ctrl, link, direction, ftype, msg, more, handshake):
        payload, biggest = encode_frame_sized(ftype, msg, more)
        self.monitor.footprint(biggest)
        delay = self.param("link_latency")
        charged = len(payload)
        if self.mode == Mode.CENTRALIZED:
            if direction == Direction.FORWARD and ftype in CONTROL_FRAMES:
                count = _object_count(msg)
                charged = count * self.param("payload_bytes")
                done = self.registry.call_done(ctrl.name, count, charged)
                delay = done - self.now + self.param("notify_latency")
            else:
                delay = self.param("call_latency")
        status = link.send(direction, payload, self.now, handshake=handshake, delay=delay)
        if status == SendStatus.ACCEPTED:
            self.busy[ctrl.name] = self.busy.get(ctrl.name, 0) + delay
            stats = self.link_stats.setdefault(link.name, [0, 0, 0])
            stats[int(direction)] += 1
            stats[2] += charged
            if ftype in HANDSHAKE_FRAMES:
                self.handshake_frames += 1
            if self.keep_trace or self.trace.maxlen:
                self._log(f"send {link.name} {direction.name.lower()} {ftype.name.lower()}"
                          f"{'+' if more else ''} {len(payload)}B from {ctrl.name}")
        return status

    def handshake_completed(self, ctrl, link, s):
        self.handshakes += 1
        self.handshake_log.append((self.now, link.name, s.frames, len(s.digest), len(s.wanted)))
        self._log(f"handshake {link.name} done: {s.frames} frames, fetched {len(s.wanted)}")
        for name in (link.upstream, link.downstream):
            self.controllers[name].on_link_change(link)

    # -- faults --

    def _set_link(self, link, state):
        link.set_connected(state)
        self._log(f"link {link.name} {'up' if state else 'down'}")
        for name in (link.upstream, link.downstream):
            c = self.controllers[name]
            if c.alive:
                c.on_link_change(link)

    def _can_connect(self, link):
        return (link.name not in self.partitioned and self.controllers[link.upstream].alive
                and self.controllers[link.downstream].alive)

    def inject_fault(self, event: FaultEvent):
        kind, args = event.kind, event.args
        self._log(f"fault {event.describe()}")
        if kind == "crash":
            ctrl = self.controllers[args[0]]
            if not ctrl.alive:
                return
            ctrl.crash()
            self.monitor.crashed(ctrl)
            for link in self.adjacent(ctrl.name):
                if link.connected:
                    self._set_link(link, False)
            self.after(self.param("restart_delay"), self._restart, ctrl)
        elif kind in ("disconnect", "partition"):
            for name in args:
                link = self.links[name]
                self.partitioned.add(name)
                if link.connected:
                    self._set_link(link, False)
        elif kind == "reconnect":
            for name in args:
                self.partitioned.discard(name)
                link = self.links[name]
                if not link.connected and self._can_connect(link):
                    self._set_link(link, True)
        elif kind == "evict":
            node, pid = int(args[0]), int(args[1])
            k = self.kubelets[node]
            if k.alive:
                try:
                    k.evict(pid)
                except UnknownPod:
                    self._log(f"evict: pod {pid} unknown at {k.name}")
        else:
            raise ValueError(f"unknown fault kind {kind}")

    def _restart(self, ctrl):
        ctrl.start()
        self._log(f"restart {ctrl.name} session {ctrl.session}")
        for link in self.adjacent(ctrl.name):
            if not link.connected and self._can_connect(link):
                self._set_link(link, True)
            elif not link.connected:
                # still cut off: the fresh session must learn that too (e.g. to start cancel timers)
                ctrl.on_link_change(link)
        self.wake(ctrl)

    # -- delivery --

    def _deliver(self, link):
        for direction, payload in link.deliver_due(self.now):
            ftype, more, msg = decode_frame(payload)
            name = link.downstream if direction == Direction.FORWARD else link.upstream
            self._log(f"recv {link.name} {direction.name.lower()} {ftype.name.lower()} at {name}")
            if (self.mode == Mode.CENTRALIZED and direction == Direction.FORWARD
                    and ftype == FrameType.DELTA and not msg.batch_hint):
                # reconciling a Deployment or ReplicaSet ends with a status write
                scalars = {k.object_id for k, _ in msg.entries if k.object_kind in SCALAR_KINDS}
                if scalars:
                    self.registry.call_done(name, len(scalars))
            self.controllers[name].receive(link, direction, ftype, more, msg)

    def _command(self, cmd):
        self._log(f"cmd fn={cmd.function_id} replicas={cmd.desired_replicas}")
        self.wake(self.controllers["as"])

    def _log(self, text):
        if self.keep_trace or self.trace.maxlen:
            self.trace.append(f"{self.now} {text}")

    # -- quiescence --

    def quiescent(self) -> bool:
        if self._busy_events:
            return False
        if any(not c.alive for c in self.controllers.values()):
            return False
        for link in self.links.values():
            if not link.usable or link.pending():
                return False
        for c in self.controllers.values():
            if c.sessions or c.pending_up or c.reply_owed:
                return False
        if self.controllers["rs"].unsent:
            return False
        return True

    def check_agreement(self):
        """Agreement and completeness at a quiescent cut."""
        rs, sc = self.controllers["rs"], self.controllers["sc"]
        mon = self.monitor
        sc_view = sc._upstream_view()
        if set(rs.cache.pods) != set(sc_view):
            mon.violation(f"handshake-completeness: replicaset holds {sorted(rs.cache.pods)}"
                          f" but scheduler holds {sorted(sc_view)}")
            return
        for pid, r in rs.cache.pods.items():
            s = sc_view[pid]
            if r.node != s.node or r.phase < s.phase:
                mon.violation(f"agreement: pod {pid} replicaset {r.node}/{r.phase.name}"
                              f" vs scheduler {s.node}/{s.phase.name}")
                return
        for node, k in self.kubelets.items():
            if not sc.nodes[node].valid:
                continue
            at_sc = {pid: r for pid, r in sc.cache.pods.items() if r.node == node}
            if set(at_sc) != set(k.cache.pods):
                mon.violation(f"handshake-completeness: scheduler has {sorted(at_sc)} on node {node}"
                              f" but {k.name} holds {sorted(k.cache.pods)}")
                return
            for pid, r in at_sc.items():
                if r.phase < k.cache.pods[pid].phase:
                    mon.violation(f"agreement: pod {pid} scheduler {r.phase.name}"
                                  f" behind {k.name} {k.cache.pods[pid].phase.name}")
                    return
        for pid, rec in self.registry.pods.items():
            holders = [sc.cache.pods, self.kubelets[rec.node].cache.pods]
            if rec.function_id != PRIORITY_FUNCTION:
                holders.append(rs.cache.pods)
            if not all(pid in h for h in holders):
                mon.violation(f"completeness: published pod {pid} missing from a controller cache")
                return

    # -- main loop --

    def run(self) -> RunMetrics:
        for cmd in self.commands:
            self.at(cmd.issue_time, self._command, cmd, background=True)
        for f in sorted(self.scenario.fault_script, key=lambda f: f.at_time):
            self.at(f.at_time, self.inject_fault, f, background=True)
        for c in self.controllers.values():
            self.wake(c)
        limit = self.param("max_sim_time")
        while self._heap and not self.stop:
            time, _, background, fn, args = self._heap[0]
            if time > limit:
                break
            heapq.heappop(self._heap)
            if not background:
                self._busy_events -= 1
            self.now = time
            fn(*args)
            self.events += 1
            if not background:
                self._quiet_checked = False
            end_of_instant = not self._heap or self._heap[0][0] > time
            if end_of_instant and self.instant_hook is not None:
                self.instant_hook(self)
            if not self._quiet_checked and (not self._heap or self._heap[0][0] > time) and self.quiescent():
                self._quiet_checked = True
                self.check_agreement()
        if not self.stop:
            self.monitor.audit_tombstones()
        return self.metrics()

    def metrics(self) -> RunMetrics:
        sc = self.scenario
        m = RunMetrics(mode=self.mode.value)
        m.end_time = self.now
        desired = sc.final_desired()
        counts = {}
        for rec in self.registry.pods.values():
            if rec.function_id != PRIORITY_FUNCTION:
                counts[rec.function_id] = counts.get(rec.function_id, 0) + 1
        m.published = {fn: counts.get(fn, 0) for fn in sorted(desired)}
        m.desired = dict(sorted(desired.items()))
        m.converged = all(m.published[fn] == d for fn, d in desired.items()) and not self.monitor.violations
        last_cmd = {}
        for c in sorted(sc.scaling_commands):
            last_cmd[c.function_id] = c.issue_time
        last_change = {}
        for t, fn in self.registry.changes:
            last_change[fn] = t
        for fn in desired:
            if fn in last_change and last_change[fn] >= last_cmd[fn]:
                m.latency_by_function[fn] = round(last_change[fn] - last_cmd[fn], 3)
        if m.converged and m.latency_by_function:
            m.e2e_latency = max(m.latency_by_function.values())
        for name, (fwd, bwd, nbytes) in sorted(self.link_stats.items()):
            m.messages_by_link[name] = fwd + bwd
            m.bytes_by_link[name] = nbytes
        m.messages = sum(m.messages_by_link.values())
        m.message_bytes = sum(m.bytes_by_link.values())
        m.handshake_frames = self.handshake_frames
        m.handshakes = self.handshakes
        m.registry_calls = self.registry.calls
        m.busy_time = {k: round(v, 3) for k, v in sorted(self.busy.items())}
        m.cold_starts = self.monitor.cold_starts
        m.max_object_bytes = self.monitor.max_footprint
        m.cancellations = self.monitor.cancellations
        m.events = self.events
        m.violations = list(self.monitor.violations)
        m.params = {k: self.param(k) for k in sorted(DEFAULTS)} | {"mode": self.mode.value}
        return m


def _object_count(msg) -> int:
    if msg.batch_hint:
        return msg.batch_hint[1]
    return max(1, len({(k.object_kind, k.object_id) for k, _ in msg.entries}))


def _per_object(msg) -> list:
    """Split a message into single-object messages, batches into single pods."""
    if msg.batch_hint:
        batch_id, size = msg.batch_hint
        return [DeltaMessage(msg.entries, (batch_id + i, 1)) for i in range(size)]
    parts: dict = {}
    for key, value in msg.entries:
        parts.setdefault((key.object_kind, key.object_id), []).append((key, value))
    return [DeltaMessage(tuple(e)) for e in parts.values()]


def run(scenario: Scenario, flags=None, keep_trace=False, strict=False):
    """Run one scenario; returns (metrics, trace).

    With ``strict`` a monitor violation raises InvariantViolation carrying
    the trace suffix that led to it.
    """
    sim = Simulation(scenario, flags=flags, keep_trace=keep_trace)
    metrics = sim.run()
    if strict and metrics.violations:
        raise InvariantViolation(metrics.violations[0], list(sim.trace)[-64:])
    return metrics, list(sim.trace)


def run_baseline_comparison(scenario: Scenario):
    if scenario.fault_script:
        raise ValueError("baseline comparison takes fault-free scenarios only")
    direct, _ = run(scenario.with_mode(Mode.DIRECT))
    central, _ = run(scenario.with_mode(Mode.CENTRALIZED))
    return direct, central


def perf_scenario(pods: int, functions: int = 1, nodes: int = 80, **params) -> Scenario:
    """N pods spread evenly over K functions, all requested at t=0."""
    cmds = []
    base, extra = divmod(pods, functions)
    for fn in range(1, functions + 1):
        cmds.append(ScalingCommand(0, fn, base + (1 if fn <= extra else 0)))
    p = dict(PERF_DEFAULTS)
    p.update(params)
    return Scenario(seed=0, num_nodes=nodes, node_capacity=p.pop("node_capacity"),
                    scaling_commands=cmds, params=p)


# -- scenario files --

_FAULT_ARITY = {"crash": 1, "disconnect": 1, "reconnect": None, "partition": None, "evict": 2}


def handshake_cost(pods: int, stale: int | None = None) -> int:
    """Frames of one Scheduler<->Kubelet handshake over ``pods`` cached pods.

    The link is cut while ``stale`` pods (all of them when None) become
    ready on the Kubelet, so exactly those digests mismatch on reconnect.
    """
    stale = pods if stale is None else stale
    base = pods - stale
    cmds = [ScalingCommand(0, 1, base)] if base else []
    t0 = 300 if base else 0
    cmds.append(ScalingCommand(t0, 1, pods))
    faults = [FaultEvent(t0 + 10, "partition", ("sc-k1",)),
              FaultEvent(t0 + 300, "reconnect", ("sc-k1",))]
    sc = Scenario(seed=0, num_nodes=1, node_capacity=pods, scaling_commands=cmds,
                  fault_script=faults,
                  params={"startup_delay": 100, "cancel_timeout": 10**9,
                          "max_sim_time": t0 + 1000})
    sim = Simulation(sc)
    m = sim.run()
    if not m.converged:
        raise RuntimeError(f"handshake cost run did not converge: {m.violations}")
    runs = [(t, frames, wanted) for t, name, frames, _, wanted in sim.handshake_log
            if name == "sc-k1" and t > t0 + 300]
    if len(runs) != 1 or runs[0][2] != stale:
        raise RuntimeError(f"expected one handshake fetching {stale} pods, got {runs}")
    return runs[0][1]


class ScenarioError(ValueError):
    pass


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "config":
                for item in parts[1:]:
                    key, value = item.split("=", 1)
                    _apply_config(sc, key, value)
            elif parts[0] == "cmd":
                t, fn, replicas = (int(x) for x in parts[1:4])
                if len(parts) != 4 or fn <= 0:
                    raise ScenarioError("expected: cmd <time> <function> <replicas>")
                sc.scaling_commands.append(ScalingCommand(t, fn, replicas))
            elif parts[0] == "fault":
                t, kind, args = int(parts[1]), parts[2], parts[3:]
                if kind not in _FAULT_ARITY:
                    raise ScenarioError(f"unknown fault kind {kind!r}")
                if kind in ("partition", "reconnect"):
                    args = [a for arg in args for a in arg.split(",") if a]
                arity = _FAULT_ARITY[kind]
                if (arity is not None and len(args) != arity) or not args:
                    raise ScenarioError(f"wrong number of arguments for {kind}")
                sc.fault_script.append(FaultEvent(t, kind, tuple(args)))
            else:
                raise ScenarioError(f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as e:
            raise ScenarioError(f"line {lineno}: {e}") from None
    return sc


def _apply_config(sc, key, value):
    if key == "seed":
        sc.seed = int(value)
    elif key == "num_nodes":
        sc.num_nodes = int(value)
    elif key == "node_capacity":
        sc.node_capacity = int(value)
    elif key == "mode":
        sc.mode = Mode(value)
    elif key in DEFAULTS:
        sc.params[key] = float(value) if "." in value else int(value)
    else:
        raise ScenarioError(f"unknown config key {key!r}")


def format_scenario(sc: Scenario) -> str:
    lines = [f"config seed={sc.seed} num_nodes={sc.num_nodes} node_capacity={sc.node_capacity}"
             f" mode={sc.mode.value}"]
    for k, v in sorted(sc.params.items()):
        lines.append(f"config {k}={v}")
    for c in sorted(sc.scaling_commands):
        lines.append(f"cmd {c.issue_time} {c.function_id} {c.desired_replicas}")
    for f in sc.fault_script:
        lines.append(f"fault {f.at_time} {f.kind} {' '.join(str(a) for a in f.args)}")
    return "\n".join(lines) + "\n"


# -- randomized scenarios --

def random_scenario(seed: int, max_nodes=8, max_functions=3, max_pods=20, fault_horizon=600) -> Scenario:
    rng = random.Random(seed)
    nodes = rng.randint(1, max_nodes)
    nfn = rng.randint(1, max_functions)
    cmds = []
    peak = 0
    for fn in range(1, nfn + 1):
        t = 0
        steps = rng.randint(1, 3)
        fn_peak = 0
        for _ in range(steps):
            t += rng.randint(0, fault_horizon // 3)
            n = rng.randint(0, max(1, max_pods // nfn))
            cmds.append(ScalingCommand(t, fn, n))
            fn_peak = max(fn_peak, n)
        peak += fn_peak
    peak = min(peak, max_pods)
    capacity = -(-max(peak, 1) // nodes) + 2
    names = ["as", "dp", "rs", "sc"] + [f"k{i}" for i in range(1, nodes + 1)]
    links = ["as-dp", "dp-rs", "rs-sc"] + [f"sc-k{i}" for i in range(1, nodes + 1)]
    faults = []
    cmd_times = [c.issue_time for c in cmds]
    for _ in range(rng.randint(0, 6)):
        if rng.random() < 0.5:
            # strike while the chain is busy with a scaling command
            t = min(fault_horizon, rng.choice(cmd_times) + rng.randint(0, 8))
        else:
            t = rng.randint(0, fault_horizon)
        kind = rng.choice(("crash", "crash", "disconnect", "partition", "evict", "evict"))
        if kind == "crash":
            faults.append(FaultEvent(t, "crash", (rng.choice(names),)))
        elif kind == "disconnect":
            link = rng.choice(links)
            faults.append(FaultEvent(t, "disconnect", (link,)))
            faults.append(FaultEvent(min(fault_horizon, t + rng.randint(1, 200)), "reconnect", (link,)))
        elif kind == "partition":
            group = tuple(sorted(rng.sample(links, rng.randint(1, min(3, len(links))))))
            faults.append(FaultEvent(t, "partition", group))
            faults.append(FaultEvent(min(fault_horizon, t + rng.randint(1, 200)), "reconnect", group))
        else:
            faults.append(FaultEvent(t, "evict", (rng.randint(1, nodes), rng.randint(1, max_pods + 5))))
    faults.sort(key=lambda f: f.at_time)
    return Scenario(seed=seed, num_nodes=nodes, node_capacity=capacity, scaling_commands=cmds,
                    fault_script=faults,
                    params={"max_sim_time": fault_horizon + DEFAULTS["convergence_budget"]})


def metrics_json(m: RunMetrics) -> str:
    return json.dumps(m.to_dict(), indent=2, sort_keys=True, default=str)
