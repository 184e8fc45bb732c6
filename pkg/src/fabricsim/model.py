"""Core domain types and parameter validation."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

CONTROLLER_KINDS = ("dual_gradient", "fabric", "limeric", "limeric_pulsar", "fixed")


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``errors`` holds one message per violated field.
    """

    def __init__(self, errors: Iterable[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class SimParams:
    """All simulation constants.  Defaults reproduce the common parameter table."""

    data_rate_bps: float = 6e6
    beacon_payload_bytes: int = 500
    header_bytes: int = 76
    mbl_fraction: float = 0.6

    alpha: float = 1.0
    weights_default: float = 1.0
    beta: float = 2.8e-5
    price_init: float = 1.252e-3
    anti_flap_f: float = 0.22
    sample_period_Ts: float = 0.2
    neighbor_expiry: float = 1.0
    r_min: float = 1.0
    r_max: float = 10.0

    tx_power_mw: float = 251.0
    sensitivity_dbm: float = -92.0
    freq_hz: float = 5.9e9
    path_loss_exp: float = 2.5
    nakagami_m: float | None = None
    p_min_link: float = 0.05

    limeric_alpha: float = 0.1
    limeric_beta: float = 1.0 / 150.0

    # |C - load| at or below this many beacons/s counts as a zero gradient sign
    sign_atol: float = 1e-9
    # "reported": gradient from piggybacked neighbor rates; "measured": from measured CBT
    fabric_gradient: str = "reported"

    @property
    def airtime(self) -> float:
        """Seconds of channel time per beacon."""
        return 8.0 * (self.beacon_payload_bytes + self.header_bytes) / self.data_rate_bps

    @property
    def capacity_C(self) -> float:
        """Maximum beaconing load in beacons/s."""
        return self.mbl_fraction / self.airtime

    @property
    def mbl_bps(self) -> float:
        return self.mbl_fraction * self.data_rate_bps

    def replace(self, **changes: Any) -> "SimParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["capacity_C"] = self.capacity_C
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimParams":
        known = {f.name for f in dataclasses.fields(cls)}
        errors = [f"unknown parameter '{k}'" for k in data if k not in known and k != "capacity_C"]
        if errors:
            raise ConfigError(errors)
        p = cls(**{k: v for k, v in data.items() if k in known})
        if "capacity_C" in data and not math.isclose(float(data["capacity_C"]), p.capacity_C, rel_tol=1e-12):
            raise ConfigError(
                [f"capacity_C={data['capacity_C']} inconsistent with derived value {p.capacity_C}"]
            )
        return p

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimParams":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "SimParams":
        """Read the ``params`` section of a JSON config (or a bare params document)."""
        doc = json.loads(Path(path).read_text())
        return cls.from_dict(doc.get("params", doc))

    def validated(self) -> "SimParams":
        errors = validate_params(self)
        if errors:
            raise ConfigError(errors)
        return self


def validate_params(p: SimParams) -> list[str]:
    """Return a list of violated invariants; an empty list means ``p`` is usable."""
    errors = []
    if not p.data_rate_bps > 0:
        errors.append("data_rate_bps must be positive")
    if p.beacon_payload_bytes + p.header_bytes <= 0:
        errors.append("beacon size must be positive")
    if not 0 < p.mbl_fraction <= 1:
        errors.append("mbl_fraction must lie in (0, 1]")
    if not p.alpha >= 0:
        errors.append("alpha must be non-negative")
    if not p.weights_default > 0:
        errors.append("weights_default must be positive")
    if not p.beta > 0:
        errors.append("beta (price step) must be positive")
    if not p.price_init >= 0:
        errors.append("price_init must be non-negative")
    if not 0 <= p.anti_flap_f < 1:
        errors.append("anti_flap_f must lie in [0, 1)")
    if not p.sample_period_Ts > 0:
        errors.append("sample_period_Ts must be positive")
    if not p.neighbor_expiry > 0:
        errors.append("neighbor_expiry must be positive")
    if not p.r_min > 0:
        errors.append("r_min must be positive")
    if p.r_min > p.r_max:
        errors.append("rate bounds inverted (r_min > r_max)")
    if not p.tx_power_mw > 0:
        errors.append("tx_power_mw must be positive")
    if not p.freq_hz > 0:
        errors.append("freq_hz must be positive")
    if not p.path_loss_exp >= 2:
        errors.append("path_loss_exp must be >= 2")
    if p.nakagami_m is not None and not p.nakagami_m >= 0.5:
        errors.append("nakagami_m must be >= 0.5")
    if not 0 <= p.p_min_link < 1:
        errors.append("p_min_link must lie in [0, 1)")
    if not 0 < p.limeric_alpha < 1:
        errors.append("limeric_alpha must lie in (0, 1)")
    if not p.limeric_beta > 0:
        errors.append("limeric_beta must be positive")
    if not p.sign_atol >= 0:
        errors.append("sign_atol must be non-negative")
    if p.fabric_gradient not in ("reported", "measured"):
        errors.append("fabric_gradient must be 'reported' or 'measured'")
    return errors


@dataclass
class NeighborEntry:
    last_rate: float
    last_price: float
    last_heard_time: float


@dataclass
class VehicleState:
    """One vehicle.  ``weight``, ``r_min`` and ``r_max`` override the globals when set."""

    id: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    rate_r: float = 10.0
    price_pi: float = 0.0
    phase_offset: float = 0.0
    neighbor_table: dict[int, NeighborEntry] = field(default_factory=dict)
    weight: float | None = None
    r_min: float | None = None
    r_max: float | None = None
    joins_queue: bool = False

    def bounds(self, p: SimParams) -> tuple[float, float]:
        lo = p.r_min if self.r_min is None else self.r_min
        hi = p.r_max if self.r_max is None else self.r_max
        return lo, hi

    def expire(self, now: float, expiry: float) -> None:
        stale = [k for k, e in self.neighbor_table.items() if now - e.last_heard_time > expiry]
        for k in stale:
            del self.neighbor_table[k]


@dataclass
class RateAllocation:
    """Per-vehicle rates keyed by vehicle id."""

    ids: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        self.rates = np.asarray(self.rates, dtype=float)
        if self.ids.shape != self.rates.shape:
            raise ValueError("ids and rates must have the same length")

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.rates.tolist()))

    def within(self, lo, hi, tol: float = 1e-9) -> bool:
        return bool(np.all(self.rates >= np.asarray(lo) - tol) and np.all(self.rates <= np.asarray(hi) + tol))


@dataclass
class NeighborGraph:
    """Self-inclusive neighbor sets over vehicles ``ids``.

    ``adjacency[i, j]`` is True when vehicle ``ids[j]`` belongs to n(ids[i]), i.e.
    vehicle i hears vehicle j.  ``delivery[i, j]`` is the per-beacon delivery
    probability of the link j -> i (1 on the diagonal).
    """

    ids: np.ndarray
    adjacency: np.ndarray
    delivery: np.ndarray

    @property
    def link_loss(self) -> np.ndarray:
        return 1.0 - self.delivery

    @property
    def neighbor_sets(self) -> list[set[int]]:
        return [set(self.ids[row].tolist()) for row in self.adjacency]

    def degree(self) -> np.ndarray:
        """Size of each n(v), self included."""
        return self.adjacency.sum(axis=1)

    @classmethod
    def from_sets(cls, sets: list[Iterable[int]]) -> "NeighborGraph":
        """Graph over ids 0..N-1 from explicit neighbor sets (self is always added)."""
        n = len(sets)
        adj = np.zeros((n, n), dtype=bool)
        for v, s in enumerate(sets):
            adj[v, list(s)] = True
            adj[v, v] = True
        return cls(np.arange(n), adj, adj.astype(float))
