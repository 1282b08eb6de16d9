"""Problem instances: data model, random generation and text serialization.

Two problem families are supported.  ``TspInstance`` is a plain Euclidean
tour problem on the unit square.  ``EvrpInstance`` is a capacitated
electric-vehicle routing problem on a 100 km square map with one depot,
recharging stations and customers, a physical energy model and per-trip
driver time limits.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

COORD_RANGE_KM = 100.0
DEPOT_RANGE_KM = (25.0, 75.0)
DEMAND_CHOICES = (0.25, 0.5, 0.75, 1.0)

KM_PER_H_TO_M_PER_S = 1000.0 / 3600.0
W_H_TO_KWH = 1e-3


class InstanceError(ValueError):
    """Invalid instance data (bad counts, ranges or parameters)."""


class InstanceFormatError(InstanceError):
    """Instance file cannot be parsed or is missing required fields."""


class NodeKind(str, Enum):
    DEPOT = "depot"
    STATION = "station"
    CUSTOMER = "customer"


@dataclass(frozen=True)
class Node:
    """A single map node.  ``demand`` is zero unless ``kind`` is customer."""

    id: int
    kind: NodeKind
    x: float
    y: float
    demand: float = 0.0


@dataclass(frozen=True)
class VehicleParams:
    """Physical vehicle constants.

    Defaults describe a 4.1 t delivery truck with a 4 t cargo capacity and
    an 80 kWh battery.  Efficiency factors above 1 are loss multipliers on
    discharge, below 1 are recovery multipliers on regeneration.

    ``physical_rolling_resistance`` switches the rolling-resistance term
    from the plain ``c_r * cos(slope)`` form (default) to the gravity-scaled
    ``c_r * g * cos(slope)`` form.
    """

    cargo_capacity_kg: float = 4000.0
    curb_mass_kg: float = 4100.0
    battery_capacity_kwh: float = 80.0
    frontal_area_m2: float = 3.912
    air_density: float = 1.2
    gravity: float = 9.81
    rolling_resistance: float = 0.01
    drag_coefficient: float = 0.7
    motor_discharge_factor: float = 1.18
    motor_recovery_factor: float = 0.85
    battery_discharge_factor: float = 1.11
    battery_recovery_factor: float = 0.93
    physical_rolling_resistance: bool = False

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "physical_rolling_resistance":
                continue
            value = getattr(self, f.name)
            if not value > 0.0:
                raise InstanceError(f"vehicle parameter {f.name} must be > 0, got {value}")


_KIND_DEPOT = 0
_KIND_STATION = 1
_KIND_CUSTOMER = 2

_KIND_CODE = {
    NodeKind.DEPOT: _KIND_DEPOT,
    NodeKind.STATION: _KIND_STATION,
    NodeKind.CUSTOMER: _KIND_CUSTOMER,
}


@dataclass(eq=False)
class EvrpInstance:
    """Immutable EVRP instance plus cached geometry/energy tables.

    Node ids are positional: id 0 is the depot, ids ``1..n_stations`` are
    stations, the remaining ids are customers.  ``slope`` is an optional
    antisymmetric matrix of road grades in radians; ``None`` means flat.
    """

    nodes: tuple[Node, ...]
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    speed_kmh: float = 60.0
    t_max_h: float = 8.0
    service_time_h: float = 0.1
    recharge_dwell_h: float = 0.0
    slope: np.ndarray | None = None
    objective_mode: str = "EM"
    seed: int | None = None

    def __post_init__(self) -> None:
        self.nodes = tuple(self.nodes)
        if self.speed_kmh <= 0:
            raise InstanceError("speed must be > 0")
        if self.t_max_h <= 0:
            raise InstanceError("t_max must be > 0")
        if self.service_time_h < 0 or self.recharge_dwell_h < 0:
            raise InstanceError("service and dwell times must be >= 0")
        if self.objective_mode not in ("DM", "EM"):
            raise InstanceError(f"objective_mode must be DM or EM, got {self.objective_mode!r}")
        n = len(self.nodes)
        if n < 2:
            raise InstanceError("instance needs a depot and at least one customer")
        kinds = np.array([_KIND_CODE[node.kind] for node in self.nodes], dtype=np.int8)
        if kinds[0] != _KIND_DEPOT or np.count_nonzero(kinds == _KIND_DEPOT) != 1:
            raise InstanceError("exactly one depot required, at node id 0")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise InstanceError(f"node ids must be positional, found id {node.id} at index {i}")
            if node.kind is not NodeKind.CUSTOMER and node.demand != 0.0:
                raise InstanceError(f"non-customer node {i} carries demand {node.demand}")
            if node.kind is NodeKind.CUSTOMER and node.demand <= 0.0:
                raise InstanceError(f"customer node {i} needs positive demand")
        demands = np.array([node.demand for node in self.nodes], dtype=np.float64)
        if demands.max() > self.vehicle.cargo_capacity_kg:
            raise InstanceError("customer demand exceeds cargo capacity")

        self.kinds = kinds
        self.coords = np.array([(node.x, node.y) for node in self.nodes], dtype=np.float64)
        self.demands = demands
        self.customer_ids = np.flatnonzero(kinds == _KIND_CUSTOMER)
        self.station_ids = np.flatnonzero(kinds == _KIND_STATION)
        if self.customer_ids.size == 0:
            raise InstanceError("instance needs at least one customer")
        self.recharge_ids = np.concatenate(([0], self.station_ids))

        diff = self.coords[:, None, :] - self.coords[None, :, :]
        self.dist_km = np.sqrt((diff**2).sum(axis=-1))
        self.travel_h = self.dist_km / self.speed_kmh

        if self.slope is not None:
            self.slope = np.asarray(self.slope, dtype=np.float64)
            if self.slope.shape != (n, n):
                raise InstanceError("slope matrix shape must be (n_nodes, n_nodes)")
            if not np.allclose(self.slope, -self.slope.T, atol=1e-12):
                raise InstanceError("slope matrix must be antisymmetric")
        slope_mat = self.slope if self.slope is not None else np.zeros((n, n))

        veh = self.vehicle
        rolling = veh.rolling_resistance * np.cos(slope_mat)
        if veh.physical_rolling_resistance:
            rolling = veh.gravity * rolling
        # per-edge mass coefficient of the tractive power model; newtons per kg
        self.mass_coef = veh.gravity * np.sin(slope_mat) + rolling
        self.speed_ms = self.speed_kmh * KM_PER_H_TO_M_PER_S
        self.drag_w_per_kg0 = 0.5 * veh.drag_coefficient * veh.air_density * veh.frontal_area_m2 * self.speed_ms**2
        self.discharge_factor = veh.motor_discharge_factor * veh.battery_discharge_factor
        self.recovery_factor = veh.motor_recovery_factor * veh.battery_recovery_factor

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_customers(self) -> int:
        return int(self.customer_ids.size)

    @property
    def n_stations(self) -> int:
        return int(self.station_ids.size)

    def _edge_energy_kwh(self, coef, travel, mass_kg):
        power_w = (mass_kg * coef + self.drag_w_per_kg0) * self.speed_ms
        eff = np.where(power_w >= 0.0, self.discharge_factor, self.recovery_factor)
        return eff * power_w * travel * W_H_TO_KWH

    def energy_row_kwh(self, i: int, mass_kg, j=None) -> np.ndarray:
        """Signed battery charge (kWh) for edges ``i -> j`` at total mass.

        ``mass_kg`` may be a scalar or a per-destination vector.  Negative
        values mean net regeneration on the edge.
        """
        coef = self.mass_coef[i] if j is None else self.mass_coef[i, j]
        travel = self.travel_h[i] if j is None else self.travel_h[i, j]
        return self._edge_energy_kwh(coef, travel, mass_kg)

    def energy_matrix_kwh(self, mass_kg: float) -> np.ndarray:
        """Full signed edge-energy table at one total mass."""
        return self._edge_energy_kwh(self.mass_coef, self.travel_h, mass_kg)

    def escape_table_kwh(self, mass_kg) -> np.ndarray:
        """Edge energies from every node to every recharge point.

        Column ``p`` follows ``recharge_ids`` (depot first, then stations);
        row ``j`` uses ``mass_kg`` (scalar or per-origin vector).  A recharge
        point's own column is ``inf`` so it never counts as its own escape.
        """
        mass = np.asarray(mass_kg, dtype=np.float64)
        coef = self.mass_coef[:, self.recharge_ids]
        travel = self.travel_h[:, self.recharge_ids]
        energy = self._edge_energy_kwh(coef, travel, mass.reshape(-1, 1))
        energy[self.recharge_ids, np.arange(self.recharge_ids.size)] = np.inf
        return energy

    def escape_energy_kwh(self, mass_kg) -> np.ndarray:
        """Cheapest battery charge to reach a recharge point from each node.

        Entry ``j`` is the minimum over stations and the depot (excluding
        ``j`` itself) of the edge energy ``j -> p`` at mass ``mass_kg``
        (scalar or per-origin vector).  Used by the feasibility mask as a
        one-hop strand-avoidance bound.
        """
        return self.escape_table_kwh(mass_kg).min(axis=1)

    def recharge_home_energy_kwh(self, mass_kg) -> np.ndarray:
        """Charge for each recharge point's direct drive to the depot.

        Rows follow ``mass_kg`` (scalar or per-origin vector), columns follow
        ``recharge_ids``; the depot's own column is zero by construction.
        """
        mass = np.asarray(mass_kg, dtype=np.float64)
        coef = self.mass_coef[self.recharge_ids, 0]
        travel = self.travel_h[self.recharge_ids, 0]
        return self._edge_energy_kwh(coef, travel, mass.reshape(-1, 1))


@dataclass(eq=False)
class TspInstance:
    """Euclidean TSP on the unit square; node ids are coordinate indices."""

    coords: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InstanceError("coords must have shape (n, 2)")
        if self.coords.shape[0] < 3:
            raise InstanceError("TSP needs at least 3 cities")
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        self.dist_km = np.sqrt((diff**2).sum(axis=-1))

    @property
    def n_nodes(self) -> int:
        return int(self.coords.shape[0])


Instance = EvrpInstance | TspInstance


def distance(inst: Instance, i: int, j: int) -> float:
    """Euclidean edge length between valid node ids."""
    n = inst.n_nodes
    if not (0 <= i < n and 0 <= j < n):
        raise InstanceError(f"node id out of range: ({i}, {j}) for {n} nodes")
    return float(inst.dist_km[i, j])


def travel_time(inst: EvrpInstance, i: int, j: int) -> float:
    """Edge traversal time in hours at the instance's constant speed."""
    n = inst.n_nodes
    if not (0 <= i < n and 0 <= j < n):
        raise InstanceError(f"node id out of range: ({i}, {j}) for {n} nodes")
    return float(inst.travel_h[i, j])


def generate_evrp(
    n_customers: int,
    n_stations: int,
    seed: int,
    objective_mode: str = "EM",
    vehicle: VehicleParams | None = None,
    speed_kmh: float = 60.0,
    t_max_h: float = 8.0,
    service_time_h: float = 0.1,
) -> EvrpInstance:
    """Sample a random EVRP instance.

    The depot is uniform on the central [25, 75]^2 km square, stations and
    customers are uniform on [0, 100]^2, demands are uniform over
    {0.25, 0.5, 0.75, 1.0} kg.  Identical seeds give identical instances.
    """
    if n_customers < 1 or n_stations < 1:
        raise InstanceError("need at least one customer and one station")
    rng = np.random.default_rng(seed)
    lo, hi = DEPOT_RANGE_KM
    depot_xy = lo + (hi - lo) * rng.random(2)
    station_xy = COORD_RANGE_KM * rng.random((n_stations, 2))
    customer_xy = COORD_RANGE_KM * rng.random((n_customers, 2))
    demands = rng.choice(np.array(DEMAND_CHOICES), size=n_customers)

    nodes = [Node(0, NodeKind.DEPOT, float(depot_xy[0]), float(depot_xy[1]))]
    for k in range(n_stations):
        nodes.append(Node(1 + k, NodeKind.STATION, float(station_xy[k, 0]), float(station_xy[k, 1])))
    base = 1 + n_stations
    for k in range(n_customers):
        nodes.append(
            Node(base + k, NodeKind.CUSTOMER, float(customer_xy[k, 0]), float(customer_xy[k, 1]), float(demands[k]))
        )
    return EvrpInstance(
        nodes=tuple(nodes),
        vehicle=vehicle if vehicle is not None else VehicleParams(),
        speed_kmh=speed_kmh,
        t_max_h=t_max_h,
        service_time_h=service_time_h,
        objective_mode=objective_mode,
        seed=seed,
    )


def generate_tsp(n: int, seed: int) -> TspInstance:
    """Sample ``n`` cities uniformly on the unit square."""
    if n < 3:
        raise InstanceError("TSP needs at least 3 cities")
    rng = np.random.default_rng(seed)
    return TspInstance(coords=rng.random((n, 2)), seed=seed)


def _node_to_dict(node: Node) -> dict:
    return {
        "id": node.id,
        "kind": node.kind.value,
        "x": float(node.x),
        "y": float(node.y),
        "demand": float(node.demand),
    }


def instance_to_dict(inst: Instance) -> dict:
    """Plain-JSON form with a fixed key order (round-trips exactly)."""
    if isinstance(inst, TspInstance):
        return {
            "problem": "tsp",
            "coords": [[float(x), float(y)] for x, y in inst.coords],
            "seed": inst.seed,
        }
    veh = {f.name: getattr(inst.vehicle, f.name) for f in fields(VehicleParams)}
    veh = {k: (v if isinstance(v, bool) else float(v)) for k, v in veh.items()}
    return {
        "problem": "evrp",
        "nodes": [_node_to_dict(node) for node in inst.nodes],
        "vehicle": veh,
        "speed": float(inst.speed_kmh),
        "t_max": float(inst.t_max_h),
        "service_time": float(inst.service_time_h),
        "recharge_dwell": float(inst.recharge_dwell_h),
        "objective_mode": inst.objective_mode,
        "seed": inst.seed,
        "slope": None if inst.slope is None else [[float(v) for v in row] for row in inst.slope],
    }


def instance_from_dict(data: dict, source: str = "<dict>") -> Instance:
    try:
        problem = data["problem"]
        if problem == "tsp":
            return TspInstance(coords=np.array(data["coords"], dtype=np.float64), seed=data.get("seed"))
        if problem != "evrp":
            raise InstanceFormatError(f"{source}: unknown problem kind {problem!r}")
        nodes = tuple(
            Node(int(n["id"]), NodeKind(n["kind"]), float(n["x"]), float(n["y"]), float(n.get("demand", 0.0)))
            for n in data["nodes"]
        )
        vehicle = VehicleParams(**data["vehicle"])
        slope = data.get("slope")
        return EvrpInstance(
            nodes=nodes,
            vehicle=vehicle,
            speed_kmh=float(data["speed"]),
            t_max_h=float(data["t_max"]),
            service_time_h=float(data["service_time"]),
            recharge_dwell_h=float(data.get("recharge_dwell", 0.0)),
            slope=None if slope is None else np.array(slope, dtype=np.float64),
            objective_mode=data["objective_mode"],
            seed=data.get("seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InstanceError):
            raise
        raise InstanceFormatError(f"{source}: bad instance data: {exc}") from exc


def save_instance(inst: Instance, path: str | Path) -> None:
    """Write an instance as JSON, atomically (write then rename)."""
    path = Path(path)
    text = json.dumps(instance_to_dict(inst), indent=2) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_instance(path: str | Path) -> Instance:
    """Read an instance file; raises ``InstanceFormatError`` on bad input."""
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise InstanceFormatError(f"{path}: expected a JSON object")
    return instance_from_dict(data, source=str(path))
