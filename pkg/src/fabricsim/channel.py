"""Simplified radio layer.

Mean received power follows a log-distance law anchored at the 1 m Friis
loss; Nakagami-m fading turns the mean into a per-beacon delivery
probability.  MAC contention, SINR and capture are not modeled: each beacon
on a link is delivered independently with the link's probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from fabricsim.model import NeighborGraph, SimParams

SPEED_OF_LIGHT = 299_792_458.0
# distances below this are treated as this (co-located vehicles on a bridge)
MIN_DISTANCE = 1.0


def mw_to_dbm(p_mw):
    return 10.0 * np.log10(p_mw)


def dbm_to_mw(p_dbm):
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0)


@dataclass(frozen=True)
class ChannelModel:
    kind: str = "free_space"
    path_loss_exp: float = 2.5
    freq_hz: float = 5.9e9
    nakagami_m: float | None = None

    def __post_init__(self):
        if self.kind not in ("free_space", "nakagami"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.path_loss_exp < 2:
            raise ValueError("path loss exponent must be >= 2")
        if self.kind == "nakagami" and (self.nakagami_m is None or self.nakagami_m < 0.5):
            raise ValueError("nakagami channel needs m >= 0.5")

    @property
    def reference_loss(self) -> float:
        """Free-space loss at 1 m, in dB."""
        wavelength = SPEED_OF_LIGHT / self.freq_hz
        return 20.0 * math.log10(4.0 * math.pi / wavelength)

    @classmethod
    def from_params(cls, p: SimParams) -> "ChannelModel":
        kind = "free_space" if p.nakagami_m is None else "nakagami"
        return cls(kind, p.path_loss_exp, p.freq_hz, p.nakagami_m)


def received_power(model: ChannelModel, tx_power_mw: float, distance):
    """Mean received power in dBm at ``distance`` metres (array-friendly)."""
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = mw_to_dbm(tx_power_mw) - model.reference_loss - 10.0 * model.path_loss_exp * np.log10(d)
    return float(out) if out.ndim == 0 else out


def max_range(model: ChannelModel, tx_power_mw: float, sensitivity_dbm: float) -> float:
    """Distance at which the mean received power equals the sensitivity."""
    budget = mw_to_dbm(tx_power_mw) - model.reference_loss - sensitivity_dbm
    return float(10.0 ** (budget / (10.0 * model.path_loss_exp)))


def reception_probability(model: ChannelModel, tx_power_mw: float, distance, sensitivity_dbm: float):
    """Probability that a single beacon arrives above the sensitivity.

    Free space is a step at the range.  Under Nakagami-m the received power is
    Gamma(m, mean/m) distributed, so P(power >= S) = Q(m, m S / mean), the
    regularized upper incomplete gamma function.
    """
    p_mean = received_power(model, tx_power_mw, distance)
    if model.kind == "free_space":
        out = (np.asarray(p_mean) >= sensitivity_dbm).astype(float)
    else:
        m = model.nakagami_m
        x = m * dbm_to_mw(sensitivity_dbm) / dbm_to_mw(p_mean)
        out = gammaincc(m, x)
    return float(out) if np.ndim(out) == 0 else out


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    pos = np.asarray(positions, dtype=float).reshape(len(positions), -1)
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def build_neighbor_graph(positions, model: ChannelModel, p: SimParams, ids=None) -> NeighborGraph:
    """Neighbor sets from geometry.

    Free space: u in n(v) iff the distance is within range.  Nakagami: iff the
    per-beacon delivery probability exceeds ``p.p_min_link``.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
    if n == 0:
        empty = np.zeros((0, 0))
        return NeighborGraph(ids, empty.astype(bool), empty)
    dist = np.maximum(pairwise_distances(pos), MIN_DISTANCE)
    prob = np.asarray(reception_probability(model, p.tx_power_mw, dist, p.sensitivity_dbm), dtype=float)
    if model.kind == "free_space":
        adj = prob >= 1.0
    else:
        adj = prob > p.p_min_link
    np.fill_diagonal(adj, True)
    delivery = np.where(adj, prob, 0.0)
    np.fill_diagonal(delivery, 1.0)
    return NeighborGraph(ids, adj, delivery)


def beacons_per_period(rates, p: SimParams) -> np.ndarray:
    """Beacons each vehicle sends in one sample period: max(1, round(r * Ts))."""
    k = np.floor(np.asarray(rates, dtype=float) * p.sample_period_Ts + 0.5)
    return np.maximum(1, k).astype(int)


@dataclass
class DeliveryReport:
    """Outcome of one sample period.

    ``received[v, u]`` counts beacons of sender u that reached receiver v;
    ``sent[u]`` is the number sender u transmitted.
    """

    sent: np.ndarray
    received: np.ndarray
    heard: np.ndarray = field(init=False)

    def __post_init__(self):
        self.heard = self.received >= 1
        np.fill_diagonal(self.heard, False)

    def rx_count(self) -> np.ndarray:
        """Beacons received by each vehicle from others this period."""
        r = self.received.copy()
        np.fill_diagonal(r, 0)
        return r.sum(axis=1)


def deliver_beacons(graph: NeighborGraph, rates, rng: np.random.Generator, p: SimParams,
                    active=None) -> DeliveryReport:
    """Sample beacon receptions for one period.

    Lossless and dead links are resolved without touching ``rng`` so an ideal
    channel consumes no randomness.  ``active`` masks out vehicles that are
    not present (they neither send nor receive).
    """
    n = len(graph.ids)
    sent = beacons_per_period(rates, p)
    link = graph.adjacency.copy()
    np.fill_diagonal(link, False)
    if active is not None:
        active = np.asarray(active, dtype=bool)
        link &= active[:, None] & active[None, :]
        sent = np.where(active, sent, 0)
    prob = np.where(link, graph.delivery, 0.0)
    k = np.broadcast_to(sent[None, :], (n, n))
    received = np.where(prob >= 1.0, k, 0)
    lossy = (prob > 0.0) & (prob < 1.0)
    if lossy.any():
        received = received.copy()
        received[lossy] = rng.binomial(k[lossy], prob[lossy])
    np.fill_diagonal(received, sent)
    return DeliveryReport(sent, received)


def offered_cbt(graph: NeighborGraph, rates, p: SimParams) -> np.ndarray:
    """Ground-truth channel busy time per vehicle: airtime * sum of rates in n(v)."""
    return p.airtime * (graph.adjacency.astype(float) @ np.asarray(rates, dtype=float))
