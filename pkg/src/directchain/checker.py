"""Explicit-state explorer for the five-controller scale-out model.

The transition system transcribes the reference TLA+ model action by
action: one scaling-command source, the Autoscaler, ReplicaSet
controller, Scheduler and an aggregated Kubelet, three FIFO connections,
and crash / disconnect / handshake actions.  States are immutable tuples
in canonical form so they can be hashed into a visited set.

Three known defects of the written model are handled explicitly:

* ``{RunningPods \\cup ScheduledPods}`` and ``ScheduledPods \\cup {newPods}``
  build a set containing a set; we take the unions themselves.
* ``CreatedPods`` holds pod ids while ``APIPods`` / ``ScheduledPods`` hold
  ``(pod, node)`` records; assignments between them project onto ids.
* ``CHOOSE p \\in pendingPods`` is undefined on an empty set; exposure is
  skipped when nothing is pending.

The ``*PodComplete`` predicates are checked only when the controller's
downstream path is connected (``ModelConfig.literal_invariants`` restores
the unconditional form, which a ReplicaSet crash falsifies).

Two behavioural fixes are on by default (``ModelConfig.liveness_fixes``):
the Autoscaler re-sends its last decision after a handshake, and the
ReplicaSet handshake no longer overwrites ``DesiredReplicas``.  Without
them a single disconnect at the last command strands the chain below
the desired count; ``explore`` finds that counterexample when the fixes
are turned off.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple


class ModelState(NamedTuple):
    cmd_index: int
    api_pods: frozenset  # {(pod, node)}
    as_rs: tuple  # (inflight: tuple[int], connected: bool)
    rs_sched: tuple  # (inflight: tuple[(batch_id, batch_size)], connected)
    sched_klet: tuple  # (inflight: tuple[(pod, node)], connected)
    last_desired: int
    desired: int
    created: frozenset  # {pod}
    max_pod_id: int
    scheduled: frozenset  # {(pod, node)}
    running: frozenset  # {(pod, node)}

    def describe(self) -> dict:
        return {
            "CmdIndex": self.cmd_index,
            "APIPods": sorted(self.api_pods),
            "AsRsConn": {"inflight": list(self.as_rs[0]), "connected": self.as_rs[1]},
            "RsSchedConn": {"inflight": [list(b) for b in self.rs_sched[0]], "connected": self.rs_sched[1]},
            "SchedKletConn": {"inflight": [list(p) for p in self.sched_klet[0]], "connected": self.sched_klet[1]},
            "LastDesiredReplicas": self.last_desired,
            "DesiredReplicas": self.desired,
            "CreatedPods": sorted(self.created),
            "MaxPodId": self.max_pod_id,
            "ScheduledPods": sorted(self.scheduled),
            "RunningPods": sorted(self.running),
        }


FAULT_ACTIONS = frozenset({
    "AsRsDisconnect", "RsSchedDisconnect", "SchedKletDisconnect",
    "AsCrash", "RsCrash", "SchedCrash", "KletCrash",
})
CRASH_ACTIONS = frozenset({"AsCrash", "RsCrash", "SchedCrash", "KletCrash"})
DISCONNECT_ACTIONS = FAULT_ACTIONS - CRASH_ACTIONS

ACTIONS = (
    "ScalingCmd", "AsNext", "RsNext", "SchedNext", "KletNext",
    "AsRsDisconnect", "RsSchedDisconnect", "SchedKletDisconnect",
    "AsCrash", "RsCrash", "SchedCrash", "KletCrash",
    "SchedKletHandshake", "RsSchedHandshake", "AsRsHandshake",
)


class BoundExceeded(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    scaling_cmds: tuple
    enable_crashes: bool = False
    enable_disconnects: bool = False
    # state constraint: states past these are checked but not expanded
    max_pod_id: int | None = None
    max_queue: int = 16
    max_states: int = 5_000_000
    liveness_fixes: bool = True
    # mutation: ReplicaSet handshake fast-forwards its pods instead of resetting
    fast_forward_reset: bool = False
    # per-node links in the simulator deliver in any interleaving; lets the
    # aggregated Kubelet take any inflight pod and expose any pending one
    relaxed_delivery: bool = False
    # check the Complete predicates unconditionally, as written
    literal_invariants: bool = False

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be positive")
        cmds = tuple(self.scaling_cmds)
        object.__setattr__(self, "scaling_cmds", cmds)
        if not cmds or any(c < 1 for c in cmds):
            raise ValueError("scaling_cmds must be a non-empty sequence of positive ints")
        if any(a >= b for a, b in zip(cmds, cmds[1:])):
            raise ValueError("scaling_cmds must be strictly increasing")
        if self.max_queue < 1 or self.max_states < 1:
            raise ValueError("bounds must be positive")

    @property
    def enabled_actions(self) -> frozenset:
        acts = set(ACTIONS) - FAULT_ACTIONS
        if self.enable_crashes:
            acts |= CRASH_ACTIONS
        if self.enable_disconnects:
            acts |= DISCONNECT_ACTIONS
        return frozenset(acts)

    @property
    def pod_id_bound(self) -> int:
        if self.max_pod_id is not None:
            return self.max_pod_id
        return 2 * self.scaling_cmds[-1] + 1


def initial_state(cfg: ModelConfig) -> ModelState:
    empty = frozenset()
    return ModelState(
        cmd_index=1, api_pods=empty,
        as_rs=((), True), rs_sched=((), True), sched_klet=((), True),
        last_desired=0, desired=0, created=empty, max_pod_id=0,
        scheduled=empty, running=empty,
    )


def _disconnected(conn):
    return ((), False) if conn[1] else conn


def _pod_ids(records) -> frozenset:
    return frozenset(p for p, _ in records)


def set_to_seq(s) -> tuple:
    # CHOOSE is deterministic but unspecified; ascending order is our pick
    return tuple(sorted(s))


# -- one function per KdNext disjunct; each returns a list of successors --

def do_scaling_cmd(s, cfg):
    if s.cmd_index < len(cfg.scaling_cmds):
        return [s._replace(cmd_index=s.cmd_index + 1)]
    return [s]


def do_as_next(s, cfg):
    target = cfg.scaling_cmds[s.cmd_index - 1]
    if s.last_desired != target and s.as_rs[1]:
        return [s._replace(as_rs=(s.as_rs[0] + (target,), True), last_desired=target)]
    return [s]


def do_rs_next(s, cfg):
    inflight, conn = s.as_rs
    if inflight:
        desired, as_rs = inflight[0], (inflight[1:], conn)
    else:
        desired, as_rs = s.desired, s.as_rs
    # tryLoopOnce reads the pre-state DesiredReplicas
    created, max_id, rs_sched = s.created, s.max_pod_id, s.rs_sched
    if s.desired > len(s.created):
        size = s.desired - len(s.created)
        batch = (s.max_pod_id, size)
        if rs_sched[1]:
            rs_sched = (rs_sched[0] + (batch,), True)
        created = s.created | frozenset(range(s.max_pod_id + 1, s.max_pod_id + size + 1))
        max_id = s.max_pod_id + size
    return [s._replace(as_rs=as_rs, desired=desired, created=created,
                       max_pod_id=max_id, rs_sched=rs_sched)]


def do_sched_next(s, cfg):
    inflight, conn = s.rs_sched
    if not inflight:
        return [s]
    batch_id, size = inflight[0]
    pods = [batch_id + i for i in range(1, size + 1)]
    out = []
    nodes = range(1, cfg.num_nodes + 1)
    for choice in itertools.product(nodes, repeat=size):
        new_pods = frozenset(zip(pods, choice))
        sk = s.sched_klet
        if sk[1]:
            sk = (sk[0] + set_to_seq(new_pods), True)
        out.append(s._replace(rs_sched=(inflight[1:], conn), sched_klet=sk,
                              scheduled=s.scheduled | new_pods))
    return out


def do_klet_next(s, cfg):
    inflight, conn = s.sched_klet
    receives = []
    if inflight:
        idxs = range(len(inflight)) if cfg.relaxed_delivery else (0,)
        for i in idxs:
            receives.append(((inflight[:i] + inflight[i + 1:], conn), s.running | {inflight[i]}))
    else:
        receives.append((s.sched_klet, s.running))
    pending = s.running - s.api_pods
    if not pending:
        exposes = [s.api_pods]
    elif cfg.relaxed_delivery:
        exposes = [s.api_pods | {p} for p in sorted(pending)]
    else:
        exposes = [s.api_pods | {min(pending)}]
    return [s._replace(sched_klet=sk, running=running, api_pods=api)
            for sk, running in receives for api in exposes]


def do_as_rs_disconnect(s, cfg):
    return [s._replace(as_rs=_disconnected(s.as_rs))]


def do_rs_sched_disconnect(s, cfg):
    return [s._replace(rs_sched=_disconnected(s.rs_sched))]


def do_sched_klet_disconnect(s, cfg):
    return [s._replace(sched_klet=_disconnected(s.sched_klet))]


def do_as_crash(s, cfg):
    return [s._replace(last_desired=0, as_rs=_disconnected(s.as_rs))]


def do_rs_crash(s, cfg):
    return [s._replace(created=_pod_ids(s.api_pods), desired=len(s.api_pods),
                       rs_sched=_disconnected(s.rs_sched), as_rs=_disconnected(s.as_rs))]


def do_sched_crash(s, cfg):
    return [s._replace(scheduled=s.api_pods, sched_klet=_disconnected(s.sched_klet),
                       rs_sched=_disconnected(s.rs_sched))]


def do_klet_crash(s, cfg):
    return [s._replace(running=s.api_pods, sched_klet=_disconnected(s.sched_klet))]


def do_sched_klet_handshake(s, cfg):
    if s.sched_klet[1]:
        return [s]
    all_pods = s.running | s.scheduled
    return [s._replace(scheduled=all_pods,
                       sched_klet=(set_to_seq(all_pods - s.running), True))]


def do_rs_sched_handshake(s, cfg):
    if s.rs_sched[1] or not s.sched_klet[1]:
        return [s]
    if cfg.fast_forward_reset:
        # broken variant: keep everything and replay it downstream
        batches = tuple((p - 1, 1) for p in sorted(s.created))
        return [s._replace(rs_sched=(batches, True))]
    desired = s.desired if cfg.liveness_fixes else len(s.scheduled)
    return [s._replace(created=_pod_ids(s.scheduled), desired=desired,
                       rs_sched=(s.rs_sched[0], True))]


def do_as_rs_handshake(s, cfg):
    if s.as_rs[1] or not s.rs_sched[1]:
        return [s]
    inflight = s.as_rs[0]
    if cfg.liveness_fixes and s.last_desired > 0:
        inflight = (s.last_desired,)
    return [s._replace(as_rs=(inflight, True))]


TRANSITIONS = {
    "ScalingCmd": do_scaling_cmd,
    "AsNext": do_as_next,
    "RsNext": do_rs_next,
    "SchedNext": do_sched_next,
    "KletNext": do_klet_next,
    "AsRsDisconnect": do_as_rs_disconnect,
    "RsSchedDisconnect": do_rs_sched_disconnect,
    "SchedKletDisconnect": do_sched_klet_disconnect,
    "AsCrash": do_as_crash,
    "RsCrash": do_rs_crash,
    "SchedCrash": do_sched_crash,
    "KletCrash": do_klet_crash,
    "SchedKletHandshake": do_sched_klet_handshake,
    "RsSchedHandshake": do_rs_sched_handshake,
    "AsRsHandshake": do_as_rs_handshake,
}


def labelled_successors(s: ModelState, cfg: ModelConfig, actions: Iterable[str] | None = None):
    """Yield ``(action, successor)`` for every enabled, non-stuttering step."""
    enabled = cfg.enabled_actions if actions is None else actions
    for name in ACTIONS:
        if name not in enabled:
            continue
        seen = set()
        for t in TRANSITIONS[name](s, cfg):
            if t != s and t not in seen:
                seen.add(t)
                yield name, t


def next_states(s: ModelState, cfg: ModelConfig) -> set:
    return {t for _, t in labelled_successors(s, cfg)}


# -- invariants --

def invariant_violations(s: ModelState, cfg: ModelConfig) -> list:
    bad = []
    n = cfg.num_nodes
    cmds = cfg.scaling_cmds

    def records_ok(recs):
        return all(p >= 1 and 1 <= node <= n for p, node in recs)

    def unique(recs):
        seen = {}
        for p, node in recs:
            if seen.setdefault(p, node) != node:
                return False
        return True

    if not 1 <= s.cmd_index <= len(cmds):
        bad.append("APITypeOK: CmdIndex out of range")
    if not records_ok(s.api_pods) or not unique(s.api_pods):
        bad.append("APITypeOK: APIPods malformed or not uniquely bound")
    if any(v < 1 for v in s.as_rs[0]):
        bad.append("ConnTypeOK: AsRsConn")
    if any(bid < 0 or size < 1 for bid, size in s.rs_sched[0]):
        bad.append("ConnTypeOK: RsSchedConn")
    if not records_ok(s.sched_klet[0]):
        bad.append("ConnTypeOK: SchedKletConn")
    if s.last_desired > cmds[s.cmd_index - 1]:
        bad.append("AsTypeOK: LastDesiredReplicas above current command")
    if s.desired > cmds[s.cmd_index - 1]:
        bad.append("RsTypeOK: DesiredReplicas above current command")
    if any(not 1 <= p <= s.max_pod_id for p in s.created):
        bad.append("RsTypeOK: CreatedPods outside 1..MaxPodId")
    # The Complete predicates only hold once the controller's path to the
    # tail is connected: a crash-restarted controller rebuilt from APIPods
    # misses pods the Kubelet exposes before the handshake repairs it.
    guarded = not cfg.literal_invariants
    rs_synced = s.rs_sched[1] and s.sched_klet[1]
    sched_synced = s.sched_klet[1]
    api_ids = _pod_ids(s.api_pods)
    if (rs_synced or not guarded) and not api_ids <= s.created:
        bad.append("RsPodComplete")
    if not records_ok(s.scheduled):
        bad.append("SchedTypeOK")
    if not unique(s.scheduled):
        bad.append("SchedPodUnique")
    if (sched_synced or not guarded) and not s.api_pods <= s.scheduled:
        bad.append("SchedPodComplete")
    if not unique(s.running):
        bad.append("KletPodUnique")
    if not s.api_pods <= s.running:
        bad.append("KletPodComplete")
    return bad


def converged(s: ModelState, cfg: ModelConfig) -> bool:
    """Final-command form of Cardinality(APIPods) = ScalingCmds[CmdIndex]."""
    return s.cmd_index == len(cfg.scaling_cmds) and len(s.api_pods) == cfg.scaling_cmds[-1]


def _within_constraint(s: ModelState, cfg: ModelConfig) -> bool:
    return (s.max_pod_id <= cfg.pod_id_bound
            and len(s.as_rs[0]) <= cfg.max_queue
            and len(s.rs_sched[0]) <= cfg.max_queue
            and len(s.sched_klet[0]) <= cfg.max_queue)


@dataclass
class Verdict:
    states_visited: int
    invariant_result: bool
    convergence_result: bool
    counterexample: list | None = None
    violated: list = field(default_factory=list)
    constrained_states: int = 0
    edges: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "states_visited": self.states_visited,
            "invariant_result": self.invariant_result,
            "convergence_result": self.convergence_result,
            "constrained_states": self.constrained_states,
            "violated": self.violated,
            "counterexample": self.counterexample,
        }, indent=2)


def _trace(parents, s):
    path = []
    while s is not None:
        prev, action = parents[s]
        path.append({"action": action, "state": s.describe()})
        s = prev
    path.reverse()
    return path


def explore(cfg: ModelConfig) -> Verdict:
    """Breadth-first search from the initial state.

    Invariants are checked on every reached state.  Afterwards every
    reached state must be able to reach a converged state using only
    non-fault actions (bounded stand-in for weak fairness).  Raises
    ``BoundExceeded`` when ``max_states`` is hit.
    """
    init = initial_state(cfg)
    parents = {init: (None, "Init")}
    frontier = deque([init])
    constrained = 0
    edges = 0
    while frontier:
        s = frontier.popleft()
        bad = invariant_violations(s, cfg)
        if bad:
            return Verdict(len(parents), False, False, _trace(parents, s), bad, constrained, edges)
        if not _within_constraint(s, cfg):
            constrained += 1
            continue
        for action, t in labelled_successors(s, cfg):
            edges += 1
            if t not in parents:
                if len(parents) >= cfg.max_states:
                    raise BoundExceeded(f"state bound {cfg.max_states} hit")
                parents[t] = (s, action)
                frontier.append(t)

    stuck = _first_non_converging(parents, cfg)
    if stuck is not None:
        trace = _trace(parents, stuck)
        return Verdict(len(parents), True, False, trace,
                       ["convergence unreachable without further faults"], constrained, edges)
    return Verdict(len(parents), True, True, None, [], constrained, edges)


def _first_non_converging(parents, cfg):
    """Return a shallowest reached state with no fault-free path to convergence."""
    progress = cfg.enabled_actions - FAULT_ACTIONS
    succ = {}
    pending = deque(parents)  # insertion order is BFS order
    order = list(parents)
    seen = set(parents)
    while pending:
        s = pending.popleft()
        out = [t for _, t in labelled_successors(s, cfg, progress)]
        succ[s] = out
        for t in out:
            if t not in seen:
                seen.add(t)
                pending.append(t)
    preds = {}
    for s, outs in succ.items():
        for t in outs:
            preds.setdefault(t, []).append(s)
    good = {s for s in succ if converged(s, cfg)}
    work = deque(good)
    while work:
        t = work.popleft()
        for s in preds.get(t, ()):
            if s not in good:
                good.add(s)
                work.append(s)
    for s in order:
        if s not in good:
            return s
    return None


def reachable_within(src: ModelState, dst: ModelState, cfg: ModelConfig,
                     depth: int, actions: Iterable[str] | None = None) -> list | None:
    """Shortest action list leading from ``src`` to ``dst`` in at most ``depth`` steps."""
    if src == dst:
        return []
    acts = cfg.enabled_actions if actions is None else frozenset(actions)
    parents = {src: None}
    layer = [src]
    for _ in range(depth):
        nxt = []
        for s in layer:
            for action, t in labelled_successors(s, cfg, acts):
                if t in parents:
                    continue
                parents[t] = (s, action)
                if t == dst:
                    path = []
                    while parents[t] is not None:
                        t, a = parents[t]
                        path.append(a)
                    return path[::-1]
                nxt.append(t)
        layer = nxt
        if not layer:
            break
    return None


def cross_validate(scenario, cfg: ModelConfig | None = None, **kwargs):
    """Check a simulator run against this model; see ``crossval``."""
    from .crossval import cross_validate as run_check
    return run_check(scenario, cfg, **kwargs)
