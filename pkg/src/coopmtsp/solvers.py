"""Planners over the joint-action state graph.

Four methods share the Plan interface: exhaustive branch-and-bound (exact),
one-step greedy, pair-then-sequence matching, and the learned policy (wrapped
elsewhere and executed through the same step-back machinery). Planners rank
actions with whatever matrix source they are given; executed costs always
come from the true oracle applied to the resulting action sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    EpisodeStatus,
    JointAction,
    TaskStateGraph,
    apply_joint_action,
    return_index,
)
from .costmodel import (
    CellCost,
    CostOracle,
    EpisodeEngine,
    FailureModel,
    KinematicParams,
    pair_cost,
    return_cost,
)

__all__ = [
    "Plan",
    "StepBackState",
    "Unsolvable",
    "exhaustive_search",
    "greedy_plan",
    "perfect_matching_plan",
    "step_back_replan",
    "greedy_chooser",
    "policy_chooser",
    "simulate_plan",
    "PLANNER_NAMES",
]

PLANNER_NAMES = ("exhaustive", "greedy", "matching", "policy")


class Unsolvable(RuntimeError):
    """No feasible complete action sequence exists (or the revert budget ran out)."""


@dataclass
class Plan:
    actions: list[JointAction]
    cost: float
    success: bool
    reverts: int = 0
    expanded: int = 0


@dataclass
class StepBackState:
    """One decision point on the replanner's stack."""

    graph: TaskStateGraph
    banned: set = field(default_factory=set)


def simulate_plan(graph: TaskStateGraph, actions: list[JointAction], params: KinematicParams) -> Plan:
    """Execute a fixed sequence under the exact oracle and price it."""
    engine = EpisodeEngine(graph, CostOracle(params))
    try:
        for act in actions:
            engine.step(act)
        if engine.graph.all_done and not engine.graph.returned[0]:
            ret = return_index(engine.graph.n)
            engine.step(JointAction(ret, ret))
    except Exception:
        return Plan(actions=actions, cost=float("inf"), success=False)
    if engine.log.status is not EpisodeStatus.SUCCESS:
        return Plan(actions=actions, cost=float("inf"), success=False)
    total = float(engine.log.return_time)
    for rec in engine.log.records:
        total += rec.move_time + rec.transfer_time
    return Plan(actions=actions, cost=total, success=True)


# -- exhaustive --------------------------------------------------------------


def exhaustive_search(graph: TaskStateGraph, params: KinematicParams) -> Plan:
    """Optimal plan by depth-first branch and bound.

    Children are explored cost-ascending (row-major on ties) and pruned
    against the incumbent (every remaining cost is nonnegative, so the
    accumulated cost is an admissible bound). States reached twice keep only
    their cheapest prefix. Raises Unsolvable when no sequence finishes.
    """
    oracle = CostOracle(params)
    best_cost = np.inf
    best_actions: list[JointAction] | None = None
    seen: dict = {}
    expanded = 0

    def dfs(g: TaskStateGraph, acc: float, prefix: list[JointAction]) -> None:
        nonlocal best_cost, best_actions, expanded
        if acc >= best_cost:
            return
        key = g.state_key()
        prior = seen.get(key)
        if prior is not None and prior <= acc:
            return
        seen[key] = acc
        expanded += 1
        if g.all_done:
            rc = return_cost(g, params)
            total = acc + rc
            if total < best_cost:
                best_cost = total
                best_actions = list(prefix)
            return
        M = oracle.matrix(g)
        n = g.n
        cells = []
        total_cost = M.move + M.transfer
        feas = np.argwhere(M.feasible)
        for i, j in feas:
            cells.append((float(total_cost[i, j]), int(i), int(j)))
        cells.sort()
        for c, i, j in cells:
            if acc + c >= best_cost:
                break  # cost-ascending: the rest only gets worse
            child = apply_joint_action(g, JointAction(i, j), M.cell(i, j))
            prefix.append(JointAction(i, j))
            dfs(child, acc + c, prefix)
            prefix.pop()

    dfs(graph, 0.0, [])
    if best_actions is None:
        raise Unsolvable("exhaustive search found no feasible complete sequence")
    plan = simulate_plan(graph, best_actions, params)
    plan.expanded = expanded
    return plan


# -- greedy ------------------------------------------------------------------


def _argmin_cell(matrix, banned: set | None = None) -> tuple[int, int] | None:
    """Lowest-total feasible cell, row-major on ties; None if nothing is left."""
    total = np.where(matrix.feasible, matrix.move + matrix.transfer, np.inf)
    if banned:
        for i, j in banned:
            total[i, j] = np.inf
    idx = int(np.argmin(total))
    m1 = total.shape[1]
    i, j = idx // m1, idx % m1
    if not np.isfinite(total[i, j]):
        return None
    return i, j


def greedy_plan(graph: TaskStateGraph, source, exec_params: KinematicParams) -> Plan:
    """Repeatedly take the cheapest feasible joint action under ``source``.

    Selection may run on estimated matrices; the returned cost is always the
    executed sequence re-priced by the exact oracle.
    """
    g = graph.clone()
    actions: list[JointAction] = []
    while not g.all_done:
        M = source.matrix(g)
        pick = _argmin_cell(M)
        if pick is None:
            return Plan(actions=actions, cost=float("inf"), success=False)
        act = JointAction(*pick)
        try:
            g = apply_joint_action(g, act, M.cell(*pick))
        except Exception:
            return Plan(actions=actions, cost=float("inf"), success=False)
        actions.append(act)
    return simulate_plan(graph, actions, exec_params)


# -- matching ----------------------------------------------------------------


def _transfer_weights(graph: TaskStateGraph, source) -> np.ndarray:
    """Pairwise carry-phase weights from the initial-state matrix."""
    M = source.matrix(graph)
    n = graph.n
    W = np.where(M.feasible[:n, :n], M.transfer[:n, :n], np.inf)
    # the carry phase is symmetric in the arm roles; enforce it exactly
    return np.minimum(W, W.T)


def _min_weight_pairing(W: np.ndarray) -> list[tuple[int, int]] | None:
    """Minimum-weight perfect pairing of task indices.

    Exact bitmask DP up to 16 tasks, greedy plus pair swaps beyond.
    """
    n = W.shape[0]
    if n <= 16:
        full = (1 << n) - 1
        dp = np.full(1 << n, np.inf)
        choice = np.full(1 << n, -1, dtype=np.int64)
        dp[0] = 0.0
        for mask in range(1 << n):
            if not np.isfinite(dp[mask]) or mask == full:
                continue
            i = 0
            while mask >> i & 1:
                i += 1
            for j in range(i + 1, n):
                if mask >> j & 1 or not np.isfinite(W[i, j]):
                    continue
                nxt = mask | 1 << i | 1 << j
                cand = dp[mask] + W[i, j]
                if cand < dp[nxt]:
                    dp[nxt] = cand
                    choice[nxt] = i * n + j
        if not np.isfinite(dp[full]):
            return None
        pairs = []
        mask = full
        while mask:
            i, j = divmod(int(choice[mask]), n)
            pairs.append((i, j))
            mask &= ~(1 << i | 1 << j)
        return sorted(pairs)
    # large n: greedy matching (most-constrained vertex first, promoting any
    # vertex that gets stranded) then first-improving partner swaps
    order = sorted(range(n), key=lambda i: (int(np.isfinite(W[i]).sum()), i))
    pairs = None
    for _ in range(n):
        attempt = []
        left = set(range(n))
        stuck = None
        for i in order:
            if i not in left:
                continue
            left.remove(i)
            costs = [(W[i, j], j) for j in left if np.isfinite(W[i, j])]
            if not costs:
                stuck = i
                break
            _, j = min(costs)
            left.remove(j)
            attempt.append((i, j))
        if stuck is None:
            pairs = attempt
            break
        order.remove(stuck)
        order.insert(0, stuck)
    if pairs is None:
        return None
    improved = True
    sweeps = 0
    while improved and sweeps < 20:
        improved = False
        sweeps += 1
        for a in range(len(pairs)):
            for b in range(a + 1, len(pairs)):
                i, j = pairs[a]
                k, l = pairs[b]
                now = W[i, j] + W[k, l]
                for cand in (((i, k), (j, l)), ((i, l), (j, k))):
                    w = W[cand[0]] + W[cand[1]]
                    if w < now - 1e-12:
                        pairs[a], pairs[b] = cand
                        improved = True
                        now = w
                        break
    return sorted(tuple(sorted(p)) for p in pairs)


class _PosedCosts:
    """pair_cost/return_cost with the arms teleported to explicit poses.

    Reuses one scratch graph; cloning per query dominates the matching
    planner's runtime at n = 40 otherwise.
    """

    def __init__(self, graph: TaskStateGraph, params: KinematicParams):
        self.g = graph.clone()
        self.params = params

    def _place(self, pose1, pose2) -> None:
        self.g.depots[0].current = pose1
        self.g.depots[1].current = pose2

    def cell(self, pose1, pose2, t1: int, t2: int) -> CellCost:
        self._place(pose1, pose2)
        return pair_cost(self.g, t1, t2, self.params)

    def home(self, pose1, pose2) -> float:
        self._place(pose1, pose2)
        return return_cost(self.g, self.params)


def _sequence_pairs(
    graph: TaskStateGraph,
    pairs: list[tuple[int, int]],
    params: KinematicParams,
) -> list[JointAction] | None:
    """Order the pairs and orient each one (which arm takes which task).

    Exact Held-Karp over pair subsets up to 12 pairs, nearest-neighbor with
    2-opt beyond. Transition costs come from a precomputed posed-cost table.
    """
    P = len(pairs)
    posed = _PosedCosts(graph, params)
    depot1 = graph.depots[0].current
    depot2 = graph.depots[1].current

    def oriented(p: int, o: int) -> tuple[int, int]:
        i, j = pairs[p]
        return (i, j) if o == 0 else (j, i)

    def poses_after(p: int, o: int):
        a, b = oriented(p, o)
        return graph.tasks[a].place, graph.tasks[b].place

    start = np.full((P, 2), np.inf)
    for p in range(P):
        for o in range(2):
            a, b = oriented(p, o)
            cell = posed.cell(depot1, depot2, a, b)
            if cell.feasible:
                start[p, o] = cell.total
    trans = np.full((P, 2, P, 2), np.inf)
    for p in range(P):
        for o in range(2):
            pose1, pose2 = poses_after(p, o)
            for q in range(P):
                if q == p:
                    continue
                for o2 in range(2):
                    a, b = oriented(q, o2)
                    cell = posed.cell(pose1, pose2, a, b)
                    if cell.feasible:
                        trans[p, o, q, o2] = cell.total
    ret = np.full((P, 2), np.inf)
    for p in range(P):
        for o in range(2):
            pose1, pose2 = poses_after(p, o)
            ret[p, o] = posed.home(pose1, pose2)

    if P <= 12:
        size = 1 << P
        dp = np.full((size, P, 2), np.inf)
        back = np.full((size, P, 2), -1, dtype=np.int64)
        for p in range(P):
            dp[1 << p, p, :] = start[p, :]
        for mask in range(size):
            active = np.nonzero(np.isfinite(dp[mask]))
            for p, o in zip(*active):
                base = dp[mask, p, o]
                rest = [q for q in range(P) if not mask >> q & 1]
                for q in rest:
                    for o2 in range(2):
                        c = trans[p, o, q, o2]
                        if not np.isfinite(c):
                            continue
                        nxt = mask | 1 << q
                        cand = base + c
                        if cand < dp[nxt, q, o2]:
                            dp[nxt, q, o2] = cand
                            back[nxt, q, o2] = (p << 1) | o
        full = size - 1
        final = dp[full] + ret
        if not np.isfinite(final).any():
            return None
        flat = int(np.argmin(final))
        p, o = flat // 2, flat % 2
        order = []
        mask = full
        while p >= 0:
            order.append((p, o))
            prev = back[mask, p, o]
            mask &= ~(1 << p)
            if prev < 0:
                break
            p, o = int(prev) >> 1, int(prev) & 1
        order.reverse()
        if len(order) != P:
            return None
        return [JointAction(*oriented(p, o)) for p, o in order]

    # nearest neighbor + 2-opt on the pair order, orientation greedy per step
    def route_cost(route: list[tuple[int, int]]) -> float:
        total = start[route[0]]
        if not np.isfinite(total):
            return np.inf
        for (p, o), (q, o2) in zip(route, route[1:]):
            c = trans[p, o, q, o2]
            if not np.isfinite(c):
                return np.inf
            total += c
        return total + ret[route[-1]]

    unvisited = set(range(P))
    route: list[tuple[int, int]] = []
    cur = None
    while unvisited:
        best = None
        for q in unvisited:
            for o2 in range(2):
                c = start[q, o2] if cur is None else trans[cur[0], cur[1], q, o2]
                if np.isfinite(c) and (best is None or c < best[0]):
                    best = (c, q, o2)
        if best is None:
            return None
        _, q, o2 = best
        unvisited.remove(q)
        cur = (q, o2)
        route.append(cur)
    improved = True
    while improved:
        improved = False
        for a in range(P - 1):
            for b in range(a + 1, P):
                cand = route[:a] + route[a : b + 1][::-1] + route[b + 1 :]
                if route_cost(cand) < route_cost(route) - 1e-12:
                    route = cand
                    improved = True
    if not np.isfinite(route_cost(route)):
        return None
    return [JointAction(*oriented(p, o)) for p, o in route]


def perfect_matching_plan(graph: TaskStateGraph, source, exec_params: KinematicParams) -> Plan:
    """Pair tasks by carry-phase weight, then order and orient the pairs.

    If the sequenced plan trips an infeasibility when simulated, bounded local
    reordering (adjacent swaps and orientation flips) tries to repair it.
    """
    W = _transfer_weights(graph, source)
    pairs = _min_weight_pairing(W)
    if pairs is None:
        return Plan(actions=[], cost=float("inf"), success=False)
    params = source.params if hasattr(source, "params") else exec_params
    actions = _sequence_pairs(graph, pairs, params)
    if actions is None:
        return Plan(actions=[], cost=float("inf"), success=False)
    plan = simulate_plan(graph, actions, exec_params)
    if plan.success:
        return plan
    for t in range(len(actions)):
        candidates = []
        fl = list(actions)
        fl[t] = JointAction(fl[t].a2, fl[t].a1)
        candidates.append(fl)
        if t + 1 < len(actions):
            sw = list(actions)
            sw[t], sw[t + 1] = sw[t + 1], sw[t]
            candidates.append(sw)
        for cand in candidates:
            trial = simulate_plan(graph, cand, exec_params)
            if trial.success:
                return trial
    return Plan(actions=actions, cost=float("inf"), success=False)


# -- step-back replanning ----------------------------------------------------


def greedy_chooser(source):
    """Chooser for step_back_replan: cheapest unbanned cell under ``source``."""

    def choose(graph: TaskStateGraph, banned: set) -> JointAction | None:
        M = source.matrix(graph)
        pick = _argmin_cell(M, banned)
        return JointAction(*pick) if pick is not None else None

    return choose


def policy_chooser(fast_policy, source):
    """Chooser that argmaxes the policy's joint map, skipping banned cells."""
    from .policy import build_observation

    def choose(graph: TaskStateGraph, banned: set) -> JointAction | None:
        M = source.matrix(graph)
        if not M.feasible.any():
            return None
        obs = build_observation(graph, M)
        joint = fast_policy.joint_map(obs)
        ret_red = obs.m
        ret_full = return_index(graph.n)
        for i, j in banned:
            ri = obs.task_map.index(i) if i != ret_full else ret_red
            rj = obs.task_map.index(j) if j != ret_full else ret_red
            joint[ri, rj] = 0.0
        if joint.sum() <= 0.0:
            return None
        flat = int(np.argmax(joint))
        return obs.to_env_action(flat // joint.shape[1], flat % joint.shape[1])

    return choose


def step_back_replan(
    graph: TaskStateGraph,
    chooser,
    exec_params: KinematicParams,
    failure: FailureModel | None = None,
    budget: int = 50,
) -> Plan:
    """Execute with deadlock recovery: back up one decision and ban it.

    A deadlock (no unbanned choice) pops the stack and bans the action that
    led here at its parent. A cell the true oracle rejects is banned where it
    stands (the chooser's cost source was wrong about it). A stochastic
    execution failure leaves the action legal and simply retries it. Every
    revert, rejection, or failed attempt burns budget; exhausting it gives up.
    """
    oracle = CostOracle(exec_params)
    stack: list[StepBackState] = [StepBackState(graph.clone())]
    taken: list[JointAction] = []
    reverts = 0
    while True:
        state = stack[-1]
        g = state.graph
        if g.all_done and g.returned[0] and g.returned[1]:
            plan = simulate_plan(graph, taken[:-1], exec_params)
            plan.reverts = reverts
            return plan
        if g.all_done:
            ret = return_index(g.n)
            act = None if (ret, ret) in state.banned else JointAction(ret, ret)
        else:
            act = chooser(g, state.banned)
        if act is None:
            # deadlock: revert the decision that produced this state
            if len(stack) == 1 or reverts >= budget:
                return Plan(actions=taken, cost=float("inf"), success=False, reverts=reverts)
            stack.pop()
            bad = taken.pop()
            stack[-1].banned.add(bad.as_tuple())
            reverts += 1
            continue
        true_cell = oracle.matrix(g).cell(act.a1, act.a2)
        if not true_cell.feasible:
            if reverts >= budget:
                return Plan(actions=taken, cost=float("inf"), success=False, reverts=reverts)
            state.banned.add(act.as_tuple())
            reverts += 1
            continue
        if failure is not None and failure.draw_failure():
            if reverts >= budget:
                return Plan(actions=taken, cost=float("inf"), success=False, reverts=reverts)
            reverts += 1
            continue
        nxt = apply_joint_action(g, act, true_cell)
        stack.append(StepBackState(nxt))
        taken.append(act)
