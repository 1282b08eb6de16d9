"""Single-vehicle routing environments over `instance` data.

A state tracks one vehicle's position, battery, clock, remaining cargo and
the set of customers already served.  Transitions are deterministic.  The
action mask is the rule set of the game: it forbids any move after which the
vehicle could not reach a recharge point, or could not return to the depot
inside the per-trip driver limit.

The EVRP battery model: traversing edge ``i -> j`` at total mass ``m`` draws

    P = (m * (g * sin(a) + c_r * cos(a)) + 0.5 * c_d * rho * A * v^2) * v

watts at constant speed ``v`` (m/s) on grade ``a``, and charges the battery
``eff * P * t`` watt-hours over the traversal time ``t``, where ``eff`` is
the discharge loss product for P >= 0 and the recovery product otherwise.
Arriving at a station or the depot resets the battery to full; the depot
additionally restocks cargo and starts a fresh driver clock.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .instance import (
    _KIND_CUSTOMER,
    _KIND_DEPOT,
    _KIND_STATION,
    EvrpInstance,
    Instance,
    TspInstance,
)


class TerminalStateError(RuntimeError):
    """An operation that needs a live state was given a finished one."""


class IllegalActionError(ValueError):
    """`step` was asked to take a move forbidden by the action mask."""


class DeadEndError(RuntimeError):
    """No legal action exists in a non-terminal state."""


class RouteError(ValueError):
    """A route sequence is structurally unusable for the given instance."""


@dataclass(frozen=True)
class PlayerState:
    """One player's immutable rollout state.

    For TSP, ``position`` is -1 before the first city is chosen and
    ``served`` marks visited cities; battery, clock and load stay zero.
    For EVRP, ``served`` is indexed over ``instance.customer_ids`` order and
    ``route`` always starts at the depot.
    """

    instance: Instance
    position: int
    served: np.ndarray
    battery_kwh: float
    clock_h: float
    load_kg: float
    route: tuple[int, ...]
    served_since_depot: bool
    done: bool
    distance_km: float = 0.0
    energy_kwh: float = 0.0


def initial_state(inst: Instance) -> PlayerState:
    """Fresh state: full battery and cargo at the depot, clock at zero."""
    if isinstance(inst, TspInstance):
        return PlayerState(
            instance=inst,
            position=-1,
            served=np.zeros(inst.n_nodes, dtype=bool),
            battery_kwh=0.0,
            clock_h=0.0,
            load_kg=0.0,
            route=(),
            served_since_depot=False,
            done=False,
        )
    return PlayerState(
        instance=inst,
        position=0,
        served=np.zeros(inst.n_customers, dtype=bool),
        battery_kwh=inst.vehicle.battery_capacity_kwh,
        clock_h=0.0,
        load_kg=inst.vehicle.cargo_capacity_kg,
        route=(0,),
        served_since_depot=False,
        done=False,
    )


def _served_full(state: PlayerState) -> np.ndarray:
    inst = state.instance
    full = np.zeros(inst.n_nodes, dtype=bool)
    full[inst.customer_ids] = state.served
    return full


def _homing_feasible(inst: EvrpInstance, battery_kwh, clock_h, mass_kg) -> np.ndarray:
    """Per-node test that a vehicle parked at ``j`` can still finish its trip.

    ``battery_kwh``/``clock_h``/``mass_kg`` describe the vehicle right after
    settling at each node ``j`` (post service or recharge).  Node ``j``
    passes when the depot is reachable directly, or via a single recharge
    stop, with the battery and the trip clock both covering the same path.
    Checking one path on both resources at once is what keeps the mask free
    of dead ends; independent per-resource bounds can certify two different
    escapes and admit a state that has none.
    """
    t_max = inst.t_max_h
    home_h = inst.travel_h[:, 0]
    escape = inst.escape_table_kwh(mass_kg)
    battery = np.asarray(battery_kwh, dtype=np.float64)
    ok = (battery >= np.maximum(escape[:, 0], 0.0)) & (clock_h + home_h <= t_max)
    if inst.station_ids.size:
        full = inst.vehicle.battery_capacity_kwh
        stations = inst.station_ids
        via_clock = (
            clock_h[:, None]
            + inst.travel_h[:, stations]
            + inst.recharge_dwell_h
            + home_h[stations][None, :]
        )
        station_home = inst.recharge_home_energy_kwh(mass_kg)[:, 1:]
        via = (
            (battery[:, None] >= np.maximum(escape[:, 1:], 0.0))
            & (full >= np.maximum(station_home, 0.0))
            & (via_clock <= t_max)
        )
        ok |= via.any(axis=1)
    return ok


def legal_actions(state: PlayerState) -> np.ndarray:
    """Boolean mask over node ids of the moves allowed from ``state``.

    EVRP rules, a move to ``j`` is legal when all of:
      * ``j`` differs from the current position;
      * customer ``j``: unserved, demand fits the remaining cargo, and after
        serving ``j`` the vehicle can still reach the depot, directly or via
        one recharge stop, on both the battery and the trip clock;
      * station ``j``: reachable on the current battery, and after a full
        recharge at ``j`` the drive home (directly or via another station)
        fits both resources the same way;
      * depot: reachable on battery and clock, and either some customer was
        served since the last depot visit, every customer is served, or no
        other move is legal (empty trips are a last resort, never a dead
        end).
    """
    if state.done:
        raise TerminalStateError("no legal actions in a terminal state")
    inst = state.instance
    if isinstance(inst, TspInstance):
        return ~state.served

    i = state.position
    veh = inst.vehicle
    mass_now = veh.curb_mass_kg + state.load_kg
    e_move = inst.energy_row_kwh(i, mass_now)
    e_after = state.battery_kwh - e_move
    arrive_h = state.clock_h + inst.travel_h[i]
    t_max = inst.t_max_h

    legal = np.zeros(inst.n_nodes, dtype=bool)

    is_customer = inst.kinds == _KIND_CUSTOMER
    open_customers = is_customer & ~_served_full(state) & (inst.demands <= state.load_kg)
    if open_customers.any():
        settled = _homing_feasible(
            inst, e_after, arrive_h + inst.service_time_h, mass_now - inst.demands
        )
        legal |= open_customers & settled

    is_station = inst.kinds == _KIND_STATION
    if is_station.any():
        recharged = _homing_feasible(
            inst,
            np.full(inst.n_nodes, veh.battery_capacity_kwh),
            arrive_h + inst.recharge_dwell_h,
            mass_now,
        )
        legal |= is_station & (e_after >= 0.0) & recharged

    legal[i] = False
    depot_reachable = e_after[0] >= 0.0 and arrive_h[0] <= t_max and i != 0
    if state.served_since_depot or bool(state.served.all()) or not legal.any():
        legal[0] = depot_reachable
    return legal


def _explain_illegal(state: PlayerState, j: int) -> str:
    inst = state.instance
    if isinstance(inst, TspInstance):
        return f"city {j} already visited" if state.served[j] else f"city {j} out of range"
    if j == state.position:
        return f"self-move at node {j}"
    kind = int(inst.kinds[j])
    i = state.position
    mass_now = inst.vehicle.curb_mass_kg + state.load_kg
    e_after = state.battery_kwh - float(inst.energy_row_kwh(i, mass_now, j))
    arrive = state.clock_h + inst.travel_h[i, j]
    if kind == _KIND_CUSTOMER:
        if _served_full(state)[j]:
            return f"customer {j} already served"
        if inst.demands[j] > state.load_kg:
            return f"customer {j} demand exceeds remaining cargo"
        escape = float(inst.escape_energy_kwh(mass_now - inst.demands)[j])
        if e_after < max(escape, 0.0):
            return f"move to customer {j} strands the battery"
        if arrive + inst.service_time_h + inst.travel_h[j, 0] > inst.t_max_h:
            return f"serving customer {j} breaks the trip time limit"
        return f"after customer {j} no single route home fits both battery and clock"
    if kind == _KIND_STATION:
        if e_after < 0.0:
            return f"station {j} unreachable on current battery"
        onward = float(inst.escape_energy_kwh(mass_now)[j])
        if inst.vehicle.battery_capacity_kwh < max(onward, 0.0):
            return f"station {j} has no onward recharge within a full battery"
        if arrive + inst.recharge_dwell_h + inst.travel_h[j, 0] > inst.t_max_h:
            return f"station {j} breaks the trip time limit"
        return f"after station {j} no single route home fits both battery and clock"
    if not (state.served_since_depot or bool(state.served.all())):
        return "depot return before serving any customer while other moves exist"
    if e_after < 0.0:
        return "depot unreachable on current battery"
    return "depot return breaks the trip time limit"


def step(state: PlayerState, action: int) -> PlayerState:
    """Apply one move and return the successor state.

    Raises ``IllegalActionError`` (with the violated rule spelled out) if
    the move is masked, and ``TerminalStateError`` on finished states.
    """
    inst = state.instance
    action = int(action)
    if not 0 <= action < inst.n_nodes:
        raise IllegalActionError(f"action {action} out of range")
    if not legal_actions(state)[action]:
        raise IllegalActionError(_explain_illegal(state, action))

    if isinstance(inst, TspInstance):
        served = state.served.copy()
        served[action] = True
        dist = 0.0 if state.position < 0 else float(inst.dist_km[state.position, action])
        return replace(
            state,
            position=action,
            served=served,
            route=state.route + (action,),
            done=bool(served.all()),
            distance_km=state.distance_km + dist,
        )

    i = state.position
    veh = inst.vehicle
    e_edge = float(inst.energy_row_kwh(i, veh.curb_mass_kg + state.load_kg, action))
    battery = state.battery_kwh - e_edge
    # regeneration cannot push the pack beyond capacity; surplus is lost
    battery = min(battery, veh.battery_capacity_kwh)
    clock = state.clock_h + float(inst.travel_h[i, action])
    load = state.load_kg
    served = state.served
    served_since_depot = state.served_since_depot
    kind = int(inst.kinds[action])
    if kind == _KIND_CUSTOMER:
        clock += inst.service_time_h
        load -= float(inst.demands[action])
        served = served.copy()
        served[np.searchsorted(inst.customer_ids, action)] = True
        served_since_depot = True
    elif kind == _KIND_STATION:
        clock += inst.recharge_dwell_h
        battery = veh.battery_capacity_kwh
    else:
        battery = veh.battery_capacity_kwh
        load = veh.cargo_capacity_kg
        clock = 0.0
        served_since_depot = False
    return PlayerState(
        instance=inst,
        position=action,
        served=served,
        battery_kwh=battery,
        clock_h=clock,
        load_kg=load,
        route=state.route + (action,),
        served_since_depot=served_since_depot,
        done=bool(served.all()) and action == 0,
        distance_km=state.distance_km + float(inst.dist_km[i, action]),
        energy_kwh=state.energy_kwh + e_edge,
    )


def mech_power(inst: EvrpInstance, mass_kg: float, slope_rad: float = 0.0) -> float:
    """Tractive power draw in watts for the instance's speed and vehicle."""
    veh = inst.vehicle
    rolling = veh.rolling_resistance * np.cos(slope_rad)
    if veh.physical_rolling_resistance:
        rolling = veh.gravity * rolling
    force = mass_kg * (veh.gravity * np.sin(slope_rad) + rolling) + inst.drag_w_per_kg0
    return float(force * inst.speed_ms)


def energy_consumed(inst: EvrpInstance, i: int, j: int, load_kg: float) -> float:
    """Signed battery charge in kWh for edge ``i -> j`` at cargo ``load_kg``.

    Positive values discharge the pack, negative values regenerate.  A
    zero-length edge costs nothing.
    """
    n = inst.n_nodes
    if not (0 <= i < n and 0 <= j < n):
        raise RouteError(f"node id out of range: ({i}, {j})")
    if load_kg < 0 or load_kg > inst.vehicle.cargo_capacity_kg:
        raise RouteError(f"load {load_kg} outside [0, capacity]")
    return float(inst.energy_row_kwh(i, inst.vehicle.curb_mass_kg + load_kg, j))


def objective(inst: Instance, route: Sequence[int]) -> float:
    """Scalar cost of a complete route (lower is better).

    TSP: closed tour length over a permutation of all cities.  EVRP with
    ``DM``: total distance of the depot-to-depot walk; with ``EM``: total
    signed battery charge, with the cargo profile implied by the walk.
    """
    route = [int(a) for a in route]
    if isinstance(inst, TspInstance):
        if sorted(route) != list(range(inst.n_nodes)):
            raise RouteError("TSP route must visit every city exactly once")
        hops = np.array(route + [route[0]])
        return float(inst.dist_km[hops[:-1], hops[1:]].sum())

    if len(route) < 2 or route[0] != 0 or route[-1] != 0:
        raise RouteError("EVRP route must start and end at the depot")
    if inst.objective_mode == "DM":
        hops = np.array(route)
        return float(inst.dist_km[hops[:-1], hops[1:]].sum())
    total = 0.0
    load = inst.vehicle.cargo_capacity_kg
    for i, j in zip(route[:-1], route[1:]):
        total += float(inst.energy_row_kwh(i, inst.vehicle.curb_mass_kg + load, j))
        if inst.kinds[j] == _KIND_CUSTOMER:
            load -= float(inst.demands[j])
        elif j == 0:
            load = inst.vehicle.cargo_capacity_kg
    return total


VIOLATION_ENDPOINTS = "route-endpoints"
VIOLATION_SELF_LOOP = "self-loop"
VIOLATION_SERVICE_COUNT = "customer-service-count"
VIOLATION_CARGO = "cargo-capacity"
VIOLATION_BATTERY = "battery-range"
VIOLATION_TIME = "trip-time-limit"
VIOLATION_NODE_ID = "node-id"


@dataclass(frozen=True)
class RouteViolation:
    code: str
    position: int
    message: str


def validate_route(inst: EvrpInstance, route: Sequence[int]) -> list[RouteViolation]:
    """Re-simulate a route independently and report every broken rule.

    Returns an empty list for feasible routes.  Checks: depot endpoints,
    no consecutive repeats, each customer served exactly once, cargo never
    negative, battery within [0, capacity] at every arrival, and every
    depot-to-depot trip inside the driver time limit.
    """
    route = [int(a) for a in route]
    violations: list[RouteViolation] = []
    for idx, a in enumerate(route):
        if not 0 <= a < inst.n_nodes:
            violations.append(RouteViolation(VIOLATION_NODE_ID, idx, f"unknown node {a}"))
            return violations
    if not route or route[0] != 0 or route[-1] != 0:
        violations.append(RouteViolation(VIOLATION_ENDPOINTS, 0, "route must start and end at the depot"))
        if not route:
            return violations

    counts = np.zeros(inst.n_nodes, dtype=int)
    for idx in range(1, len(route)):
        if route[idx] == route[idx - 1]:
            violations.append(RouteViolation(VIOLATION_SELF_LOOP, idx, f"consecutive repeat of node {route[idx]}"))
    for a in route:
        counts[a] += 1
    for c in inst.customer_ids:
        if counts[c] != 1:
            violations.append(
                RouteViolation(VIOLATION_SERVICE_COUNT, int(c), f"customer {c} served {counts[c]} times")
            )

    veh = inst.vehicle
    battery = veh.battery_capacity_kwh
    load = veh.cargo_capacity_kg
    clock = 0.0
    for idx in range(1, len(route)):
        i, j = route[idx - 1], route[idx]
        battery -= float(inst.energy_row_kwh(i, veh.curb_mass_kg + load, j))
        battery = min(battery, veh.battery_capacity_kwh)
        clock += float(inst.travel_h[i, j])
        if battery < 0.0:
            violations.append(
                RouteViolation(VIOLATION_BATTERY, idx, f"battery {battery:.6f} kWh below zero arriving at {j}")
            )
        if clock > inst.t_max_h:
            violations.append(
                RouteViolation(VIOLATION_TIME, idx, f"trip clock {clock:.6f} h over the {inst.t_max_h} h limit")
            )
        kind = int(inst.kinds[j])
        if kind == _KIND_CUSTOMER:
            clock += inst.service_time_h
            load -= float(inst.demands[j])
            if load < 0.0:
                violations.append(RouteViolation(VIOLATION_CARGO, idx, f"cargo {load} kg below zero at {j}"))
            if clock > inst.t_max_h:
                violations.append(
                    RouteViolation(VIOLATION_TIME, idx, f"service at {j} ends {clock:.6f} h over the limit")
                )
        elif kind == _KIND_STATION:
            clock += inst.recharge_dwell_h
            battery = veh.battery_capacity_kwh
        else:
            battery = veh.battery_capacity_kwh
            load = veh.cargo_capacity_kg
            clock = 0.0
    return violations


def game_outcome(reward_first: float, reward_second: float) -> int:
    """+1 if the first player's reward is at least the second's, else -1."""
    return 1 if reward_first >= reward_second else -1


class RoutingGame:
    """Bundles the transition functions for one instance behind one object.

    The search and training code only touches this interface, so test
    doubles with the same four methods can stand in for a real instance.
    """

    def __init__(self, inst: Instance):
        self.instance = inst

    def initial_state(self) -> PlayerState:
        return initial_state(self.instance)

    def legal_actions(self, state: PlayerState) -> np.ndarray:
        return legal_actions(state)

    def step(self, state: PlayerState, action: int) -> PlayerState:
        return step(state, action)

    def is_terminal(self, state: PlayerState) -> bool:
        return state.done

    def terminal_reward(self, state: PlayerState) -> float:
        if not state.done:
            raise TerminalStateError("reward of a live state is undefined")
        return -objective(self.instance, state.route)


def rollout(
    game: RoutingGame,
    policy: Callable[[PlayerState, np.ndarray], int],
    state: PlayerState | None = None,
    step_cap: int | None = None,
) -> PlayerState:
    """Drive ``policy(state, legal_mask) -> action`` to termination."""
    state = game.initial_state() if state is None else state
    inst = game.instance
    if step_cap is None:
        step_cap = 60 * inst.n_nodes + 200
    for _ in range(step_cap):
        if state.done:
            return state
        mask = game.legal_actions(state)
        if not mask.any():
            raise DeadEndError(f"no legal action at node {state.position}, route so far {state.route}")
        state = game.step(state, policy(state, mask))
    raise DeadEndError(f"rollout exceeded {step_cap} steps without terminating")
