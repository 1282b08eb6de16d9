"""Reference solvers and heuristics used as training/evaluation baselines.

``exact_tsp`` is Held-Karp dynamic programming over subsets, so it is exact
but only sized for desk-scale tours.  ``exact_evrp`` runs best-first
branch and bound directly over the environment's transition system, so its
optimum is the optimum of the game the planner actually plays, station
visits, depot returns and energy accounting included.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from .env import DeadEndError, RoutingGame, initial_state, legal_actions, objective, rollout, step
from .instance import _KIND_CUSTOMER, EvrpInstance, Instance, TspInstance

EXACT_TSP_MAX_NODES = 16
EXACT_EVRP_MAX_CUSTOMERS = 8


class SizeLimitError(ValueError):
    """Instance too large for an exact solver."""


class SearchBudgetError(RuntimeError):
    """Branch and bound exceeded its expansion cap."""


@dataclass(frozen=True)
class SolveResult:
    route: tuple[int, ...]
    objective: float
    optimal: bool
    expansions: int
    wall_time_s: float


def gap(objective_value: float, best_value: float) -> float:
    """Percentage excess over the reference value."""
    if best_value <= 0:
        raise ValueError("reference objective must be positive")
    return 100.0 * (objective_value - best_value) / best_value


def exact_tsp(inst: TspInstance) -> SolveResult:
    """Optimal tour by Held-Karp over bitmask subsets, anchored at city 0."""
    n = inst.n_nodes
    if n > EXACT_TSP_MAX_NODES:
        raise SizeLimitError(f"exact_tsp handles up to {EXACT_TSP_MAX_NODES} cities, got {n}")
    start = time.perf_counter()
    d = inst.dist_km
    size = 1 << n
    cost = np.full((size, n), np.inf)
    parent = np.full((size, n), -1, dtype=np.int8)
    cost[1, 0] = 0.0
    expansions = 0
    for mask in range(1, size, 2):
        row = cost[mask]
        if not np.isfinite(row).any():
            continue
        candidate = row[:, None] + d
        best_cost = candidate.min(axis=0)
        best_from = candidate.argmin(axis=0)
        free = ~mask & (size - 1)
        nxt = 0
        while free:
            if free & 1 and best_cost[nxt] < cost[mask | (1 << nxt), nxt]:
                cost[mask | (1 << nxt), nxt] = best_cost[nxt]
                parent[mask | (1 << nxt), nxt] = best_from[nxt]
                expansions += 1
            free >>= 1
            nxt += 1
    full = size - 1
    closing = cost[full] + d[:, 0]
    closing[0] = np.inf
    last = int(np.argmin(closing))
    tour = []
    mask = full
    while last >= 0:
        tour.append(last)
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    tour.reverse()
    return SolveResult(tuple(tour), float(closing.min()), True, expansions, time.perf_counter() - start)


def _evrp_edge_bounds(inst: EvrpInstance) -> np.ndarray:
    """Per-edge lower bounds on the objective increment over any cargo."""
    if inst.objective_mode == "DM":
        return inst.dist_km.copy()
    veh = inst.vehicle
    lo = inst.energy_matrix_kwh(veh.curb_mass_kg)
    hi = inst.energy_matrix_kwh(veh.curb_mass_kg + veh.cargo_capacity_kg)
    return np.minimum(lo, hi)


def exact_evrp(inst: EvrpInstance, expansion_cap: int = 2_000_000) -> SolveResult:
    """Optimal route under the environment's exact rules.

    Best-first search over environment states.  The admissible cost-to-go
    bound sums, over customers still open, the cheapest edge entering each
    plus the cheapest edge home; with regenerative (negative-cost) edges a
    pessimistic slack keeps the bound admissible.  Dominance discards a
    state when an already-seen state at the same (position, served set,
    trip progress, cargo) is at least as good on cost, battery and clock.
    Children are pushed nearest-first so equal-cost pops are deterministic.
    """
    if inst.n_customers > EXACT_EVRP_MAX_CUSTOMERS:
        raise SizeLimitError(
            f"exact_evrp handles up to {EXACT_EVRP_MAX_CUSTOMERS} customers, got {inst.n_customers}"
        )
    start = time.perf_counter()
    edge_lb = _evrp_edge_bounds(inst)
    np.fill_diagonal(edge_lb, np.inf)
    min_into = edge_lb.min(axis=0)
    min_home = float(edge_lb[:, 0].min())
    slack = 0.0
    finite_min = float(min_into.min())
    if finite_min < 0.0 or min_home < 0.0:
        slack = 3.0 * (inst.n_nodes + 2) * (inst.n_customers + 1) * min(finite_min, min_home)

    def bound(state) -> float:
        if state.done:
            return 0.0
        open_ids = inst.customer_ids[~state.served]
        return float(min_into[open_ids].sum()) + min_home + slack

    root = initial_state(inst)
    counter = 0
    heap = [(bound(root), counter, 0.0, root)]
    seen: dict[tuple, list[tuple[float, float, float]]] = {}
    expansions = 0

    def dominated(state, cost: float) -> bool:
        bits = 0
        for k, flag in enumerate(state.served):
            if flag:
                bits |= 1 << k
        key = (state.position, bits, state.served_since_depot, round(state.load_kg, 9))
        entries = seen.setdefault(key, [])
        for c, b, t in entries:
            if c <= cost and b >= state.battery_kwh and t <= state.clock_h:
                return True
        entries[:] = [
            e for e in entries if not (cost <= e[0] and state.battery_kwh >= e[1] and state.clock_h <= e[2])
        ]
        entries.append((cost, state.battery_kwh, state.clock_h))
        return False

    while heap:
        _, _, cost, state = heapq.heappop(heap)
        if state.done:
            return SolveResult(state.route, float(cost), True, expansions, time.perf_counter() - start)
        expansions += 1
        if expansions > expansion_cap:
            raise SearchBudgetError(f"exceeded {expansion_cap} expansions")
        moves = np.flatnonzero(legal_actions(state))
        moves = moves[np.argsort(inst.dist_km[state.position, moves], kind="stable")]
        for action in moves:
            child = step(state, int(action))
            if inst.objective_mode == "DM":
                child_cost = cost + float(inst.dist_km[state.position, action])
            else:
                child_cost = cost + (child.energy_kwh - state.energy_kwh)
            if dominated(child, child_cost):
                continue
            counter += 1
            heapq.heappush(heap, (child_cost + bound(child), counter, child_cost, child))
    raise DeadEndError("no feasible route found")


def nearest_neighbor(inst: Instance) -> SolveResult:
    """Greedy nearest-feasible-customer heuristic with station fallback."""
    start = time.perf_counter()
    if isinstance(inst, TspInstance):
        n = inst.n_nodes
        visited = [0]
        left = set(range(1, n))
        while left:
            here = visited[-1]
            nxt = min(left, key=lambda j: (inst.dist_km[here, j], j))
            visited.append(nxt)
            left.remove(nxt)
        return SolveResult(tuple(visited), objective(inst, visited), False, 0, time.perf_counter() - start)

    state = initial_state(inst)
    steps = 0
    cap = 60 * inst.n_nodes + 200
    while not state.done:
        steps += 1
        if steps > cap:
            raise DeadEndError("nearest-neighbor failed to terminate")
        mask = legal_actions(state)
        here = state.position
        ids = np.flatnonzero(mask)
        customers = ids[inst.kinds[ids] == _KIND_CUSTOMER]
        if customers.size:
            nxt = int(min(customers, key=lambda j: (inst.dist_km[here, j], j)))
        elif mask[0] and bool(state.served.all()):
            nxt = 0
        else:
            # no customer in reach: recharge, avoiding an immediate bounce
            stations = [int(j) for j in ids if j != 0]
            prev = state.route[-2] if len(state.route) >= 2 else -1
            stations = [j for j in stations if j != prev] or stations
            if stations:
                nxt = min(stations, key=lambda j: (inst.dist_km[here, j], j))
            elif mask[0]:
                nxt = 0
            else:
                raise DeadEndError(f"nearest-neighbor stuck at {here}")
        state = step(state, nxt)
    return SolveResult(state.route, objective(inst, state.route), False, steps, time.perf_counter() - start)


def greedy_rollout(inst: Instance, net) -> SolveResult:
    """Roll the network's argmax policy to termination, no search."""
    from .net import featurize

    start = time.perf_counter()
    game = RoutingGame(inst)

    def policy(state, mask):
        logits = net.policy_logits(featurize(state), mask)
        return int(np.argmax(logits))

    final = rollout(game, policy)
    return SolveResult(final.route, objective(inst, final.route), False, len(final.route), time.perf_counter() - start)
