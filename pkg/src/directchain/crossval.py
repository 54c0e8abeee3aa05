"""Check simulator runs against the explicit-state model.

The simulator is run on a tiny scenario and, after every distinct
timestamp, its state is projected onto a ``ModelState``.  Each projected
state must be reachable from the previous one within a few model actions.

Abstraction function (simulator -> model):

* The Deployment controller is fused into the Autoscaler -> ReplicaSet
  connection.  Its inflight sequence is the values queued on dp-rs, then a
  value the Deployment holds but has not forwarded, then the values queued
  on as-dp.  The fused connection is up when dp-rs is usable and either
  as-dp is usable or dp-rs still carries values (the model drops the
  queue only once it is empty).
* ``LastDesiredReplicas`` is the Autoscaler's last sent value while the
  fused connection is up.  While it is down the value seen last stays, or
  drops to 0 if the Autoscaler crashes: in the model the Autoscaler cannot
  send on a cut connection.
* Pods the ReplicaSet created while cut off from the Scheduler count as not
  yet created: the model would create them, with the same ids, after the
  handshake.  ``MaxPodId`` is lowered to match.
* Pods the Scheduler holds unbound are still in the ReplicaSet ->
  Scheduler connection, at its head, in the batches they arrived in.
* The per-node Scheduler -> Kubelet links form one connection, up only when
  every link is usable.  ``RunningPods`` is the union of Kubelet caches.
* A crashed controller shows the state it will rebuild from the registry.
* Tombstones, acknowledgements, backward reports, digests and versions are
  dropped.

Two simulator behaviours have no model counterpart and make a run
Divergent even without a bug: a new desired count reaching the
ReplicaSet while it still holds pods it could not send (the model's
ReplicaSet re-creates them under fresh ids), and, with several nodes, the
Scheduler binding onto a node whose handshake finished before another
node's (the model reconnects all Kubelets at once).  The curated set
avoids both.

Only fault actions the simulator actually performed in an interval are
offered to the model (a crashed controller may "crash" again while down,
since the state it will rebuild keeps changing).  Disconnects are always
offered because the fused connection may drop after the fault instant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .checker import (
    ACTIONS, DISCONNECT_ACTIONS, ModelConfig, ModelState, initial_state, reachable_within,
)
from .controllers import _scalars
from .materialization import FrameType, ObjectKind, decode_frame, materialize
from .simharness import Scenario, ScenarioError, Simulation, parse_scenario
from .transport import Direction

CRASH_ACTION = {"as": "AsCrash", "rs": "RsCrash", "sc": "SchedCrash"}
PROGRESS_ACTIONS = frozenset(ACTIONS) - DISCONNECT_ACTIONS - {"AsCrash", "RsCrash", "SchedCrash", "KletCrash"}


@dataclass
class Consistent:
    steps: int            # projected simulator states checked
    model_actions: int    # model actions needed to cover them
    paths: list = field(default_factory=list)  # (time, [action, ...]) per checked step

    def __bool__(self):
        return True


@dataclass
class Divergent:
    step: int
    time: float
    before: dict
    after: dict
    trace: list = field(default_factory=list)  # simulator log leading up to the step

    def __bool__(self):
        return False

    def describe(self) -> str:
        diff = {k: (self.before[k], self.after[k]) for k in self.after if self.before[k] != self.after[k]}
        return f"step {self.step} at t={self.time}: no model path for {diff}"


def model_config(scenario: Scenario) -> ModelConfig:
    cmds = tuple(c.desired_replicas for c in sorted(scenario.scaling_commands))
    try:
        return ModelConfig(num_nodes=scenario.num_nodes, scaling_cmds=cmds,
                           enable_crashes=True, enable_disconnects=True,
                           relaxed_delivery=True, max_pod_id=10**6, max_queue=10**6)
    except ValueError as e:
        raise ScenarioError(f"no model configuration for this run: {e}") from None


def check_expressible(scenario: Scenario, cfg: ModelConfig) -> None:
    """Raise ScenarioError when the run has no counterpart in the model."""
    cmds = sorted(scenario.scaling_commands)
    if len(scenario.functions) != 1 or not cmds:
        raise ScenarioError("cross-validation takes exactly one function")
    if cmds[0].issue_time != 0:
        raise ScenarioError("the first command must be issued at t=0")
    if tuple(c.desired_replicas for c in cmds) != cfg.scaling_cmds:
        raise ScenarioError("scaling commands differ from the model configuration")
    if scenario.num_nodes != cfg.num_nodes:
        raise ScenarioError("node count differs from the model configuration")
    if scenario.node_capacity * scenario.num_nodes < cfg.scaling_cmds[-1]:
        raise ScenarioError("the model has no node capacity; give the simulator enough")
    if scenario.param("startup_delay") != 0:
        # the model's Kubelet exposes a received pod by its next step
        raise ScenarioError("cross-validation needs startup_delay=0")
    all_tails = {f"sc-k{n}" for n in range(1, scenario.num_nodes + 1)}
    for f in scenario.fault_script:
        if f.kind == "evict":
            raise ScenarioError("the model has no eviction")
        if f.kind == "crash" and f.args[0].startswith("k") and scenario.num_nodes > 1:
            raise ScenarioError("the model has one aggregated Kubelet: crash it only with one node")
        if f.kind in ("disconnect", "partition", "reconnect"):
            tails = set(f.args) & all_tails
            if tails and tails != all_tails:
                raise ScenarioError("Scheduler->Kubelet links form one model connection: cut all or none")
    if scenario.fault_script and scenario.param("cancel_timeout") <= _longest_outage(scenario):
        raise ScenarioError("node cancellation has no model counterpart")


def _longest_outage(scenario) -> float:
    down, longest = {}, 0
    for f in sorted(scenario.fault_script, key=lambda f: f.at_time):
        names = [f"crash:{f.args[0]}"] if f.kind == "crash" else list(f.args)
        for name in names:
            if f.kind in ("disconnect", "partition"):
                down.setdefault(name, f.at_time)
            elif f.kind == "reconnect" and name in down:
                longest = max(longest, f.at_time - down.pop(name))
        if f.kind == "crash":
            longest = max(longest, scenario.param("restart_delay"))
    if down:
        longest = float("inf")
    return longest


# -- projection --

def _queued(link, direction=Direction.FORWARD):
    for payload in link.queued(direction):
        yield decode_frame(payload)


def _runs(ids):
    """Sorted pod ids as (batch_id, size) runs of consecutive ids."""
    out = []
    for pid in sorted(ids):
        if out and out[-1][0] + out[-1][1] + 1 == pid:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((pid - 1, 1))
    return out


class Projector:
    """Abstraction function; remembers what one instant alone does not show."""

    def __init__(self, fn: int):
        self.fn = fn
        self.batch_of: dict = {}  # pod id -> (batch_id, size) it travelled in
        self.last = 0             # fused LastDesiredReplicas while the connection is down

    def _batches_of(self, ids) -> list:
        groups: dict = {}
        for pid in sorted(ids):
            groups.setdefault(self.batch_of.get(pid, (pid - 1, 1)), []).append(pid)
        out = []
        for (bid, size), pids in sorted(groups.items()):
            out += [(bid, size)] if pids == list(range(bid + 1, bid + size + 1)) else _runs(pids)
        return out

    def project(self, sim: Simulation) -> ModelState:
        fn = self.fn
        c, links, reg = sim.controllers, sim.links, sim.registry
        api = frozenset((pid, r.node) for pid, r in reg.pods.items())
        cmd_index = max(1, sum(1 for cmd in sim.commands if cmd.issue_time <= sim.now))

        # Autoscaler + Deployment -> ReplicaSet
        au, dp = c["as"], c["dp"]
        as_dp, dp_rs = links["as-dp"], links["dp-rs"]
        down_vals = [v for t, _, m in _queued(dp_rs) if t == FrameType.DELTA
                     for f, v in _scalars(m, ObjectKind.REPLICASET).items() if f == fn]
        up_vals = [v for t, _, m in _queued(as_dp) if t == FrameType.DELTA
                   for f, v in _scalars(m, ObjectKind.DEPLOYMENT).items() if f == fn]
        held = []
        if dp.alive and fn in dp.desired and dp.desired[fn] != dp.last_fwd.get(fn):
            held = [dp.desired[fn]]
        if dp_rs.usable and (as_dp.usable or down_vals):
            as_rs = (tuple(down_vals + held + up_vals), True)
            self.last = au.last.get(fn, 0)
        else:
            # values the Autoscaler sends while the chain is cut stay hidden
            as_rs = ((), False)
            if not au.alive:
                self.last = 0
        last = self.last

        # ReplicaSet
        rs = c["rs"]
        if rs.alive:
            unsent = {pid for pid in rs.unsent if pid in rs.cache.pods}
            created = frozenset(pid for pid in rs.cache.pods if pid not in unsent)
            desired = rs.desired.get(fn, 0)
            max_id = sim.durable["max_pod_id"] - len(unsent)
        else:
            created = frozenset(pid for pid, _ in api)
            desired = len(api)
            max_id = sim.durable["max_pod_id"]

        # ReplicaSet -> Scheduler
        sc = c["sc"]
        rs_sc = links["rs-sc"]
        queued = []
        for t, _, m in _queued(rs_sc):
            if t != FrameType.DELTA:
                continue
            if m.batch_hint:
                bid, size = m.batch_hint
                for pid in range(bid + 1, bid + size + 1):
                    self.batch_of[pid] = (bid, size)
                queued.append((bid, size))
            else:
                queued += _runs(r.pod_id for r in materialize(m, sc._bare()))
        unbound = []
        if sc.alive:
            unbound = self._batches_of(pid for pid, r in sc.cache.pods.items() if r.node is None and r.live)
        rs_sched = (tuple(unbound + queued), rs_sc.usable)
        if sc.alive:
            scheduled = frozenset((pid, r.node) for pid, r in sc.cache.pods.items() if r.node is not None)
        else:
            scheduled = api

        # Scheduler -> Kubelets
        inflight, running = [], set()
        tails = [links[f"sc-k{n}"] for n in sorted(sim.kubelets)]
        for link in tails:
            for t, _, m in _queued(link):
                if t == FrameType.DELTA:
                    inflight += [(r.pod_id, r.node) for r in materialize(m, sc._bare())]
        for n, k in sim.kubelets.items():
            if k.alive:
                running |= {(pid, n) for pid in k.cache.pods}
            else:
                running |= {(pid, node) for pid, node in api if node == n}
        sched_klet = (tuple(sorted(inflight)), all(l.usable for l in tails))

        return ModelState(
            cmd_index=cmd_index, api_pods=api, as_rs=as_rs, rs_sched=rs_sched,
            sched_klet=sched_klet, last_desired=last, desired=desired,
            created=created, max_pod_id=max_id, scheduled=scheduled,
            running=frozenset(running),
        )


def _crash_actions(sim) -> set:
    acts = set()
    for name, ctrl in sim.controllers.items():
        if not ctrl.alive:
            acts.add("KletCrash" if name.startswith("k") else CRASH_ACTION.get(name, ""))
    return acts - {""}


# -- driver --

def cross_validate(scenario: Scenario, cfg: ModelConfig | None = None, flags=None,
                   depth: int = 12):
    """Consistent when every projected simulator state extends a model path."""
    cfg = cfg or model_config(scenario)
    check_expressible(scenario, cfg)
    projector = Projector(scenario.functions[0])
    sim = Simulation(scenario, flags=flags, keep_trace=True)
    state = {"prev": initial_state(cfg), "steps": 0, "actions": 0, "crashed": set(), "bad": None,
             "paths": []}

    def at_instant(s):
        if state["bad"] is not None:
            return
        cur = projector.project(s)
        crashed = _crash_actions(s)
        # a crash that started and ended within one instant still happened
        crashed |= state["crashed"]
        state["crashed"] = _crash_actions(s)
        if cur == state["prev"]:
            return
        state["steps"] += 1
        acts = PROGRESS_ACTIONS | DISCONNECT_ACTIONS | crashed
        path = reachable_within(state["prev"], cur, cfg, depth, acts)
        if path is None:
            state["bad"] = Divergent(state["steps"], s.now, state["prev"].describe(),
                                     cur.describe(), list(s.trace)[-30:])
            s.stop = True
            return
        state["actions"] += len(path)
        state["paths"].append((s.now, path))
        state["prev"] = cur

    sim.instant_hook = at_instant
    sim.run()
    if state["bad"] is not None:
        return state["bad"]
    return Consistent(state["steps"], state["actions"], state["paths"])


# -- curated tiny scenarios --

def _scenario(nodes, cmds, faults=()):
    lines = [f"config seed=1 num_nodes={nodes} node_capacity=4"]
    lines += [f"cmd {at} 1 {n}" for at, n in cmds]
    lines += [f"fault {f}" for f in faults]
    return parse_scenario("\n".join(lines) + "\n")


def curated_scenarios() -> list:
    """(name, Scenario) pairs: ten fault-free runs and forty single-fault runs."""
    out = []
    for nodes, counts in [(1, [1]), (1, [3]), (2, [3]), (2, [1, 2]), (2, [2, 4]),
                          (3, [3]), (3, [1, 2, 3]), (1, [2, 3]), (2, [1, 4]), (3, [2, 4])]:
        cmds = [(20 * i, n) for i, n in enumerate(counts)]
        out.append((f"nofault-n{nodes}-" + "-".join(map(str, counts)), _scenario(nodes, cmds)))
    two_step = [(0, 1), (20, 3)]
    for ctrl in ("as", "dp", "rs", "sc"):
        for at in (1, 3, 22, 40):
            out.append((f"crash-{ctrl}-t{at}", _scenario(2, two_step, [f"{at} crash {ctrl}"])))
        for at in (2, 4):
            out.append((f"crash-{ctrl}-single-t{at}", _scenario(2, [(0, 2)], [f"{at} crash {ctrl}"])))
    for at in (3, 5, 22, 40):
        out.append((f"crash-k1-t{at}", _scenario(1, two_step, [f"{at} crash k1"])))
    for name, links in [("as-dp", "as-dp"), ("dp-rs", "dp-rs"), ("rs-sc", "rs-sc"),
                        ("tails", "sc-k1 sc-k2")]:
        for at in (2, 21, 40):
            faults = [f"{at} partition {links}", f"{at + 10} reconnect {links}"]
            out.append((f"cut-{name}-t{at}", _scenario(2, two_step, faults)))
    return out
