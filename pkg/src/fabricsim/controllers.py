"""Per-vehicle beaconing-rate controllers.

Every controller sees only a :class:`LocalView`: its own state plus what its
neighbors piggybacked on their last received beacons.

* ``dual_gradient``   price follows the dual gradient with constant step
* ``fabric``          price moves by a constant step in the gradient's sign,
                      with a dead band of ``f * C`` around zero
* ``limeric``         linear rate control on the locally measured load
* ``limeric_pulsar``  the same driven by the worst load within two hops
* ``fixed``           always ``r_max``
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from fabricsim.model import CONTROLLER_KINDS, SimParams
from fabricsim.oracle import rates_from_price_sums

PAYLOAD_FORMAT = "<Ifff"


def rate_from_prices(sum_pi, alpha: float, r_min, r_max, weight=1.0):
    """Rate maximizing U(r) - r * sum_pi inside [r_min, r_max]; ``r_max`` when sum_pi = 0."""
    if isinstance(sum_pi, float) and isinstance(weight, (int, float)) and alpha > 0:
        # scalar fast path, same result as the vectorized form
        s = float(sum_pi)
        try:
            raw = (weight / s) ** (1.0 / alpha) if s > 0 else math.inf
        except OverflowError:
            raw = math.inf
        return float(min(max(raw, r_min), r_max))
    out = rates_from_price_sums(sum_pi, alpha, weight, r_min, r_max)
    return float(out) if np.ndim(out) == 0 else out


def dual_gradient_price_update(pi, beta: float, C: float, sum_rates):
    return np.maximum(0.0, pi - beta * (C - sum_rates))


def gradient_sign(g, C: float, f: float, atol: float = 0.0):
    """sign(g), forced to 0 inside the dead band |g| < f*C (and |g| <= atol)."""
    if isinstance(g, (int, float)):
        g = float(g)
        return 0.0 if (abs(g) < f * C or abs(g) <= atol) else math.copysign(1.0, g)
    g = np.asarray(g, dtype=float)
    dead = (np.abs(g) < f * C) | (np.abs(g) <= atol)
    out = np.where(dead, 0.0, np.sign(g))
    return float(out) if out.ndim == 0 else out


def fabric_price_update(pi, beta: float, C: float, sum_rates, f: float, atol: float = 0.0):
    if isinstance(pi, float) and isinstance(sum_rates, float):
        return max(0.0, pi - beta * gradient_sign(C - sum_rates, C, f, atol))
    return np.maximum(0.0, pi - beta * gradient_sign(C - sum_rates, C, f, atol))


def limeric_rate_update(r, alpha_L: float, beta_L: float, goal_total: float, measured_total,
                        r_min=-np.inf, r_max=np.inf):
    if isinstance(r, float) and isinstance(measured_total, float):
        return min(max((1.0 - alpha_L) * r + beta_L * (goal_total - measured_total), r_min), r_max)
    return np.clip((1.0 - alpha_L) * r + beta_L * (goal_total - measured_total), r_min, r_max)


@dataclass
class BeaconPayload:
    """Fields piggybacked on a beacon.

    FABRIC and the dual-gradient controller fill ``price``; LIMERIC+PULSAR
    fills ``measured_cbt`` and ``max_cbt`` (the largest CBT among the sender
    and its one-hop neighbors).  On the wire this is (id:u32, rate:f32,
    price_or_cbt:f32, aux:f32).
    """

    sender: int
    rate: float
    price: float = 0.0
    measured_cbt: float = 0.0
    max_cbt: float = 0.0
    kind: str = "fabric"

    def fields(self) -> tuple[int, float, float, float]:
        if self.kind in ("limeric", "limeric_pulsar"):
            return self.sender, self.rate, self.measured_cbt, self.max_cbt
        return self.sender, self.rate, self.price, 0.0

    def pack(self) -> bytes:
        return struct.pack(PAYLOAD_FORMAT, *self.fields())

    @classmethod
    def unpack(cls, data: bytes, kind: str = "fabric") -> "BeaconPayload":
        sender, rate, a, b = struct.unpack(PAYLOAD_FORMAT, data)
        if kind in ("limeric", "limeric_pulsar"):
            return cls(sender, rate, measured_cbt=a, max_cbt=b, kind=kind)
        return cls(sender, rate, price=a, kind=kind)

    def csv_row(self) -> list:
        return list(self.fields())


@dataclass
class LocalView:
    """What one vehicle knows at its update instant.

    The ``nbr_*`` arrays are aligned and hold unexpired neighbor-table
    entries (self excluded).  ``measured_load`` is the load the vehicle senses
    on air, in beacons/s, own transmissions included.
    """

    vehicle: int
    rate: float
    price: float
    r_min: float
    r_max: float
    weight: float = 1.0
    measured_load: float = 0.0
    nbr_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    nbr_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nbr_prices: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nbr_cbt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nbr_max_cbt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nbr_last_heard: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.nbr_rates = np.asarray(self.nbr_rates, dtype=float)
        self.nbr_prices = np.asarray(self.nbr_prices, dtype=float)
        self.nbr_cbt = np.asarray(self.nbr_cbt, dtype=float)
        self.nbr_max_cbt = np.asarray(self.nbr_max_cbt, dtype=float)

    def reported_load(self) -> float:
        return self.rate + float(self.nbr_rates.sum())

    def price_sum(self, own_price: float | None = None) -> float:
        own = self.price if own_price is None else own_price
        return own + float(self.nbr_prices.sum())


def pulsar_feedback(view: LocalView, airtime: float) -> float:
    """Largest CBT within two hops: own, neighbors' measured, neighbors' one-hop maxima."""
    own = view.measured_load * airtime
    if view.nbr_cbt.size == 0:
        return float(own)
    return float(max(own, view.nbr_cbt.max(), view.nbr_max_cbt.max()))


@dataclass
class ControllerOutput:
    rate: float
    price: float
    payload: BeaconPayload


def price_step(kind: str, view: LocalView, p: SimParams) -> float:
    """New own price (controllers without prices return 0)."""
    if kind not in ("dual_gradient", "fabric"):
        return 0.0
    C = p.capacity_C
    load = view.reported_load() if p.fabric_gradient == "reported" else view.measured_load
    if kind == "fabric":
        return float(fabric_price_update(view.price, p.beta, C, load, p.anti_flap_f, p.sign_atol))
    return float(dual_gradient_price_update(view.price, p.beta, C, load))


def rate_step(kind: str, view: LocalView, p: SimParams, new_price: float) -> ControllerOutput:
    """New rate and the payload announced with it."""
    if kind in ("dual_gradient", "fabric"):
        rate = rate_from_prices(view.price_sum(new_price), p.alpha, view.r_min, view.r_max, view.weight)
        return ControllerOutput(rate, new_price, BeaconPayload(view.vehicle, rate, price=new_price, kind=kind))
    if kind == "fixed":
        return ControllerOutput(view.r_max, 0.0, BeaconPayload(view.vehicle, view.r_max, kind=kind))
    if kind in ("limeric", "limeric_pulsar"):
        own_cbt = view.measured_load * p.airtime
        if kind == "limeric_pulsar":
            measured_total = pulsar_feedback(view, p.airtime) / p.airtime
        else:
            measured_total = view.measured_load
        rate = float(limeric_rate_update(view.rate, p.limeric_alpha, p.limeric_beta, p.capacity_C,
                                         measured_total, view.r_min, view.r_max))
        one_hop_max = max(own_cbt, float(view.nbr_cbt.max())) if view.nbr_cbt.size else own_cbt
        payload = BeaconPayload(view.vehicle, rate, measured_cbt=own_cbt, max_cbt=one_hop_max, kind=kind)
        return ControllerOutput(rate, 0.0, payload)
    raise ValueError(f"unknown controller kind {kind!r}")


def controller_step(kind: str, view: LocalView, p: SimParams) -> ControllerOutput:
    """One update of a single vehicle: price from the sensed load, then rate from the price sum."""
    if kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {kind!r}")
    return rate_step(kind, view, p, price_step(kind, view, p))
