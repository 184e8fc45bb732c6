"""Vehicle placement and mobility for the static and dynamic experiments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from fabricsim.channel import ChannelModel, max_range
from fabricsim.model import ConfigError, SimParams, VehicleState

KINDS = ("all_in_range", "multihop_line", "jam_clusters", "single_approach", "bridge", "queue", "custom")

# gap kept behind the last stopped vehicle when joining a queue
QUEUE_GAP = 5.0


@dataclass(frozen=True)
class ScenarioSpec:
    """Geometry of one experiment.  Fields irrelevant to ``kind`` are ignored.

    ``n_vehicles`` conditions a Poisson placement on its count (positions
    uniform); leave it unset for a genuine Poisson count.
    """

    kind: str = "multihop_line"
    road_length: float = 1500.0
    density: float = 0.14
    n_vehicles: int | None = None
    spacing: float = 5.0
    speed: float = 32.0
    rng_seed: int = 0
    # jam_clusters
    jam_size: int = 150
    cluster_a_size: int = 20
    cluster_b_size: int = 3
    cluster_separation: float = 900.0
    jam_heard_by_b: int = 14
    # single_approach
    approach_distance: float = 1320.0
    # bridge
    moving_count: int = 100
    moving_length: float = 600.0
    bridge_distance: float = 1500.0
    # queue
    queue_size: int = 76
    batch_size: int = 3
    batch_interval: float = 5.0
    n_batches: int = 12
    spawn_distance: float = 700.0
    # custom: explicit positions [[x, y], ...] and velocities
    positions: tuple = ()
    velocities: tuple = ()

    def __post_init__(self):
        errors = []
        if self.kind not in KINDS:
            errors.append(f"unknown scenario kind {self.kind!r}")
        if not self.density > 0:
            errors.append("density must be positive")
        if not self.road_length > 0:
            errors.append("road_length must be positive")
        if not self.spacing > 0:
            errors.append("spacing must be positive")
        if not np.isfinite(self.speed):
            errors.append("speed must be finite")
        if errors:
            raise ConfigError(errors)

    def replace(self, **changes: Any) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["positions"] = [list(p) for p in self.positions]
        d["velocities"] = [list(v) for v in self.velocities]
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = [k for k in data if k not in known]
        if unknown:
            raise ConfigError([f"unknown scenario field '{k}'" for k in unknown])
        d = dict(data)
        for key in ("positions", "velocities"):
            if key in d:
                d[key] = tuple(tuple(float(c) for c in row) for row in d[key])
        return cls(**d)


@dataclass
class MobilityEvent:
    time: float
    action: str = "spawn"
    vehicle_ids: tuple[int, ...] = ()


@dataclass
class Scenario:
    """Every vehicle that will ever exist, plus the events that bring the late ones in."""

    spec: ScenarioSpec
    vehicles: list[VehicleState]
    events: list[MobilityEvent] = field(default_factory=list)
    groups: dict[str, list[int]] = field(default_factory=dict)
    suggested_steps: int = 100

    def initially_present(self) -> np.ndarray:
        late = {i for e in self.events if e.time > 0 for i in e.vehicle_ids}
        return np.array([v.id not in late for v in self.vehicles], dtype=bool)


def place_deterministic(n: int, spacing: float) -> np.ndarray:
    """x positions 0, d, 2d, ..., (n-1)d."""
    if n < 1 or spacing <= 0:
        raise ValueError("need n >= 1 and spacing > 0")
    return np.arange(n, dtype=float) * spacing


def place_poisson(length: float, rho: float, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Sorted homogeneous Poisson points on [0, length] with intensity ``rho``.

    With ``n`` given the count is fixed and only the positions are random.
    """
    if length <= 0 or rho <= 0:
        raise ValueError("need length > 0 and rho > 0")
    count = rng.poisson(rho * length) if n is None else n
    return np.sort(rng.uniform(0.0, length, count))


def _line(xs, y=0.0, vx=0.0, start_id=0, **kw) -> list[VehicleState]:
    return [
        VehicleState(start_id + i, (float(x), float(y)), (float(vx), 0.0), **kw)
        for i, x in enumerate(xs)
    ]


def _build_jam_clusters(spec: ScenarioSpec, p: SimParams):
    # everything hinges on who hears whom, so positions derive from the radio range
    reach = max_range(ChannelModel.from_params(p), p.tx_power_mw, p.sensitivity_dbm)
    d = spec.spacing
    jam_span = (spec.jam_size - 1) * d
    if jam_span > reach:
        raise ConfigError([f"jam of {spec.jam_size} vehicles spans {jam_span} m, beyond range {reach:.1f} m"])
    a_x = np.arange(spec.cluster_a_size) * d
    b_rear = min(spec.cluster_separation, reach - (spec.cluster_b_size - 1) * d - 1.0)
    b_x = b_rear + np.arange(spec.cluster_b_size) * d
    # rear of cluster B hears exactly the first `jam_heard_by_b` jam vehicles
    jam_front = b_rear + reach - (spec.jam_heard_by_b - 0.5) * d
    jam_x = jam_front + np.arange(spec.jam_size) * d
    if jam_front - a_x[-1] <= reach:
        raise ConfigError(["cluster A would hear the jam; increase separation"])
    vehicles = _line(a_x) + _line(b_x, start_id=len(a_x)) + _line(jam_x, start_id=len(a_x) + len(b_x))
    na, nb = len(a_x), len(b_x)
    groups = {
        "A": list(range(na)),
        "B": list(range(na, na + nb)),
        "jam": list(range(na + nb, na + nb + spec.jam_size)),
    }
    return vehicles, groups


def build_scenario(spec: ScenarioSpec, p: SimParams) -> Scenario:
    """Initial vehicles and mobility events for ``spec``."""
    rng = np.random.default_rng(spec.rng_seed)
    kind = spec.kind
    groups: dict[str, list[int]] = {}
    events: list[MobilityEvent] = []
    steps = 100

    if kind == "all_in_range":
        n = spec.n_vehicles if spec.n_vehicles is not None else int(round(spec.density * spec.road_length))
        vehicles = _line(place_poisson(spec.road_length, spec.density, rng, n))
    elif kind == "multihop_line":
        vehicles = _line(place_poisson(spec.road_length, spec.density, rng, spec.n_vehicles))
    elif kind == "jam_clusters":
        vehicles, groups = _build_jam_clusters(spec, p)
        steps = 300
    elif kind == "single_approach":
        xs = place_poisson(spec.road_length, spec.density, rng, spec.n_vehicles)
        vehicles = _line(xs)
        mover = VehicleState(len(vehicles), (float(xs[0] - spec.approach_distance), 0.0), (spec.speed, 0.0))
        vehicles.append(mover)
        groups = {"cluster": list(range(len(xs))), "mover": [mover.id]}
        travel = 2 * spec.approach_distance + (xs[-1] - xs[0])
        steps = int(np.ceil(travel / spec.speed / p.sample_period_Ts))
    elif kind == "bridge":
        n_static = spec.n_vehicles
        ys = place_poisson(spec.road_length, spec.density, rng, n_static) - spec.road_length / 2
        static = [VehicleState(i, (0.0, float(y))) for i, y in enumerate(ys)]
        xs = place_poisson(spec.moving_length, spec.density, rng, spec.moving_count)
        xs = xs - xs.max() - spec.bridge_distance
        moving = _line(xs, vx=spec.speed, start_id=len(static))
        vehicles = static + moving
        groups = {"static": [v.id for v in static], "moving": [v.id for v in moving]}
        travel = 2 * spec.bridge_distance + spec.moving_length
        steps = int(np.ceil(travel / spec.speed / p.sample_period_Ts))
    elif kind == "queue":
        # head of the queue at x = 0, tail toward negative x
        qx = -place_deterministic(spec.queue_size, spec.spacing)
        vehicles = _line(qx)
        groups = {"queue": list(range(len(vehicles))), "batches": []}
        origin = qx.min() - spec.spawn_distance
        for b in range(spec.n_batches):
            ids = []
            for j in range(spec.batch_size):
                vid = len(vehicles)
                vehicles.append(
                    VehicleState(vid, (origin - j * spec.spacing, 0.0), (spec.speed, 0.0), joins_queue=True)
                )
                ids.append(vid)
            groups["batches"].append(ids)
            events.append(MobilityEvent(b * spec.batch_interval, "spawn", tuple(ids)))
        last_arrival = spec.n_batches * spec.batch_interval + (
            spec.spawn_distance + spec.n_batches * spec.batch_size * QUEUE_GAP
        ) / spec.speed
        steps = int(np.ceil((last_arrival + 10.0) / p.sample_period_Ts))
    elif kind == "custom":
        pos = np.asarray(spec.positions, dtype=float).reshape(-1, 2)
        vel = np.zeros_like(pos) if not spec.velocities else np.asarray(spec.velocities, dtype=float).reshape(-1, 2)
        vehicles = [VehicleState(i, tuple(pos[i]), tuple(vel[i])) for i in range(len(pos))]
    else:  # pragma: no cover - guarded by ScenarioSpec
        raise ConfigError([f"unknown scenario kind {kind!r}"])

    for v in vehicles:
        v.rate_r = p.r_max
        v.price_pi = p.price_init
    return Scenario(spec, vehicles, events, groups, steps)


@dataclass
class MobilityState:
    """Array view of vehicle kinematics used by the engine."""

    position: np.ndarray
    velocity: np.ndarray
    present: np.ndarray
    joins_queue: np.ndarray

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "MobilityState":
        return cls(
            np.array([v.position for v in sc.vehicles], dtype=float).reshape(-1, 2),
            np.array([v.velocity for v in sc.vehicles], dtype=float).reshape(-1, 2),
            sc.initially_present(),
            np.array([v.joins_queue for v in sc.vehicles], dtype=bool),
        )

    def copy(self) -> "MobilityState":
        return MobilityState(self.position.copy(), self.velocity.copy(), self.present.copy(),
                             self.joins_queue.copy())


def fire_events(state: MobilityState, events: list[MobilityEvent], t_from: float, t_to: float) -> list[int]:
    """Apply events with t_from < time <= t_to; returns ids of spawned vehicles."""
    spawned = []
    for e in events:
        if t_from < e.time <= t_to and e.action == "spawn":
            for i in e.vehicle_ids:
                if not state.present[i]:
                    state.present[i] = True
                    spawned.append(i)
    return spawned


def step_mobility(state: MobilityState, events: list[MobilityEvent], t: float, dt: float) -> MobilityState:
    """Advance present vehicles by ``dt`` from time ``t``, then spawn vehicles due by ``t + dt``.

    Vehicles flagged ``joins_queue`` stop ``QUEUE_GAP`` metres behind the last
    stopped vehicle ahead of them (toward +x).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = state.copy()
    moving = s.present & np.any(s.velocity != 0, axis=1)
    new_pos = s.position.copy()
    new_pos[moving] += s.velocity[moving] * dt

    queuers = np.flatnonzero(moving & s.joins_queue)
    if queuers.size:
        stopped = s.present & ~moving
        on_road = stopped & (np.abs(s.position[:, 1]) < 1e-9)
        tail = s.position[on_road, 0].min() if on_road.any() else np.inf
        # front-most first so followers stop behind the ones ahead
        for i in queuers[np.argsort(-s.position[queuers, 0])]:
            limit = tail - QUEUE_GAP
            if s.position[i, 0] <= limit <= new_pos[i, 0] or new_pos[i, 0] > limit:
                new_pos[i, 0] = limit
                s.velocity[i] = 0.0
                tail = limit
    s.position = new_pos
    fire_events(s, events, t, t + dt)
    return s
