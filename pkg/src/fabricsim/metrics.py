"""Post-run analysis of simulation traces."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fabricsim.channel import ChannelModel, pairwise_distances, received_power
from fabricsim.model import RateAllocation, SimParams

# relative slack when comparing a CBT against the MBL (float round-off only)
CBT_RTOL = 1e-9


def _as_mapping(alloc) -> dict[int, float]:
    if isinstance(alloc, RateAllocation):
        return alloc.as_dict()
    if isinstance(alloc, Mapping):
        return {int(k): float(v) for k, v in alloc.items()}
    raise TypeError("oracle rates must be a RateAllocation or a mapping id -> rate")


def rmse_vs_oracle(trace_step, oracle_rates) -> float:
    """Root-mean-square gap between a step's rates and the optimum, matched by vehicle id."""
    ref = _as_mapping(oracle_rates)
    ids = [int(i) for i in trace_step.ids]
    if sorted(ids) != sorted(ref):
        missing = sorted(set(ref) - set(ids))[:5]
        extra = sorted(set(ids) - set(ref))[:5]
        raise ValueError(f"vehicle sets differ (missing {missing}, extra {extra})")
    if not ids:
        return 0.0
    gap = np.asarray(trace_step.rate, dtype=float) - np.array([ref[i] for i in ids])
    return float(np.sqrt(np.mean(gap**2)))


def fraction_below_mbl(trace_step, p: SimParams) -> float:
    """Share of vehicles whose offered CBT does not exceed the MBL fraction."""
    cbt = np.asarray(trace_step.cbt, dtype=float)
    if cbt.size == 0:
        return 1.0
    return float(np.mean(cbt <= p.mbl_fraction * (1.0 + CBT_RTOL)))


def effective_delivery_ratio(history, d: float, p: SimParams) -> dict[int, float | None]:
    """D_v(d) per transmitter v over the whole run.

    Numerator: copies of v's beacons received within ``d`` of v.  Denominator:
    copies sent toward receivers within ``d`` whose mean received power reaches
    the sensitivity.  Transmitters with an empty denominator map to None.
    """
    if d <= 0:
        raise ValueError("d must be positive")
    model = ChannelModel.from_params(p)
    got: dict[int, float] = {}
    due: dict[int, float] = {}
    for rec in history:
        ids = np.asarray(rec.ids)
        if ids.size == 0:
            continue
        dist = pairwise_distances(rec.positions)
        near = dist <= d
        np.fill_diagonal(near, False)
        mean_dbm = received_power(model, p.tx_power_mw, np.maximum(dist, 1.0))
        audible = near & (np.asarray(mean_dbm) >= p.sensitivity_dbm)
        c = np.where(near, rec.received, 0).sum(axis=0)
        n_s = audible.sum(axis=0) * np.asarray(rec.sent)
        for j, vid in enumerate(ids):
            got[int(vid)] = got.get(int(vid), 0.0) + float(c[j])
            due[int(vid)] = due.get(int(vid), 0.0) + float(n_s[j])
    return {v: (got[v] / due[v] if due[v] > 0 else None) for v in sorted(due)}


def effective_rate(rate, delivery_ratio):
    """r_v * D_v(d); ratios must lie in [0, 1]."""
    dr = np.asarray(delivery_ratio, dtype=float)
    if np.any((dr < 0) | (dr > 1)):
        raise ValueError("delivery ratio outside [0, 1]")
    out = np.asarray(rate, dtype=float) * dr
    return float(out) if out.ndim == 0 else out


def mean_irt(history, period: float) -> dict[int, float | None]:
    """Mean inter-beacon reception time per receiver.

    Estimated from per-period counts as (time present) / (beacons received
    from others); receivers that never heard anybody map to None.
    """
    time_on: dict[int, float] = {}
    rx: dict[int, float] = {}
    for rec in history:
        r = np.array(rec.received, dtype=float)
        np.fill_diagonal(r, 0.0)
        per_rx = r.sum(axis=1)
        for j, vid in enumerate(rec.ids):
            time_on[int(vid)] = time_on.get(int(vid), 0.0) + period
            rx[int(vid)] = rx.get(int(vid), 0.0) + float(per_rx[j])
    return {v: (time_on[v] / rx[v] if rx[v] > 0 else None) for v in sorted(time_on)}


@dataclass
class Convergence:
    seconds: float | None
    residual: float
    departed_at: float | None = None


def convergence_time(times: Sequence[float], rates: Sequence[float], r_max: float = 10.0,
                     band: float = 0.05, dwell: int = 10, reference=None) -> Convergence:
    """Time from the start of a rate reduction until the rate settles.

    The reduction starts at the first sample below ``r_max``; the clock runs
    from the last sample before it.  Settled means within ``band`` (relative)
    of ``reference`` for ``dwell`` consecutive samples.  ``reference`` is a
    scalar, a series aligned with ``times``, or None for the final rate.
    A vehicle that never leaves ``r_max`` converges in 0 s.
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(rates, dtype=float)
    if t.shape != r.shape or t.size == 0:
        raise ValueError("times and rates must be non-empty and aligned")
    ref = np.full_like(r, r[-1]) if reference is None else np.broadcast_to(np.asarray(reference, float), r.shape)
    dev = np.abs(r - ref) / np.maximum(np.abs(ref), 1e-12)
    below = np.flatnonzero(r < r_max - 1e-9)
    if below.size == 0:
        return Convergence(0.0, float(dev[-1]), None)
    dep = int(below[0])
    t0 = t[dep - 1] if dep > 0 else t[0]
    inside = dev <= band
    w = max(1, int(dwell))
    for i in range(dep, len(r) - w + 1):
        if inside[i:i + w].all():
            return Convergence(float(t[i] - t0), float(dev[i:i + w].max()), float(t0))
    tail = dev[-w:]
    return Convergence(None, float(tail.max()), float(t0))


@dataclass
class MetricReport:
    """Per-step aggregates, per-vehicle finals and convergence times of one run."""

    steps: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    mean_rate: list[float] = field(default_factory=list)
    min_rate: list[float] = field(default_factory=list)
    max_rate: list[float] = field(default_factory=list)
    std_rate: list[float] = field(default_factory=list)
    fraction_below_mbl: list[float] = field(default_factory=list)
    rmse_vs_oracle: list[float] | None = None
    final_rates: dict[int, float] = field(default_factory=dict)
    convergence_s: dict[int, float | None] = field(default_factory=dict)
    convergence_band: float = 0.05
    convergence_dwell: int = 10
    effective: dict[str, dict] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    STEP_COLUMNS = ("step", "time", "mean_rate", "min_rate", "max_rate", "std_rate", "fraction_below_mbl",
                    "rmse_vs_oracle")

    def __post_init__(self):
        for frac in self.fraction_below_mbl:
            if not 0.0 <= frac <= 1.0:
                raise ValueError("fraction outside [0, 1]")

    def summary(self) -> dict[str, float | None]:
        conv = [c for c in self.convergence_s.values() if c is not None]
        out = {
            "final_mean_rate": self.mean_rate[-1] if self.mean_rate else None,
            "final_fraction_below_mbl": self.fraction_below_mbl[-1] if self.fraction_below_mbl else None,
            "final_rmse_vs_oracle": self.rmse_vs_oracle[-1] if self.rmse_vs_oracle else None,
            "mean_convergence_s": float(np.mean(conv)) if conv else None,
            "unconverged": sum(c is None for c in self.convergence_s.values()),
        }
        out.update(self.extra)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_rates"] = {str(k): v for k, v in self.final_rates.items()}
        d["convergence_s"] = {str(k): v for k, v in self.convergence_s.items()}
        d["summary"] = self.summary()
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.STEP_COLUMNS)
        for i, step in enumerate(self.steps):
            rmse = "" if self.rmse_vs_oracle is None else repr(self.rmse_vs_oracle[i])
            w.writerow([step, repr(self.times[i]), repr(self.mean_rate[i]), repr(self.min_rate[i]),
                        repr(self.max_rate[i]), repr(self.std_rate[i]), repr(self.fraction_below_mbl[i]), rmse])
        return buf.getvalue()


def queue_reference(result, members: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Median rate of ``members`` at every step: the 'value of the queue'."""
    times, med = [], []
    pick = set(int(m) for m in members)
    for tr in result.traces:
        mask = np.array([int(i) in pick for i in tr.ids], dtype=bool)
        times.append(tr.time)
        med.append(float(np.median(tr.rate[mask])) if mask.any() else np.nan)
    return np.array(times), np.array(med)


def convergence_times(result, vehicles: Sequence[int], p: SimParams, band: float = 0.05, dwell: int = 10,
                      reference_group: Sequence[int] | None = None) -> dict[int, Convergence]:
    """Convergence of each vehicle, against the group median series or its own final rate."""
    ref_t = ref_r = None
    if reference_group is not None:
        ref_t, ref_r = queue_reference(result, reference_group)
    out = {}
    for v in vehicles:
        t, r = result.rate_series(int(v))
        if t.size == 0:
            raise ValueError(f"vehicle {v} never present")
        ref = None
        if ref_t is not None:
            ref = ref_r[np.searchsorted(ref_t, t)]
        hi = p.r_max
        out[int(v)] = convergence_time(t, r, hi, band, dwell, ref)
    return out


def summarize(result, p: SimParams, oracle=None, band: float = 0.05, dwell: int = 10,
              convergence_of: Sequence[int] | None = None, reference_group: Sequence[int] | None = None,
              distances: Sequence[float] = ()) -> MetricReport:
    """Build a :class:`MetricReport` for one run."""
    rep = MetricReport(convergence_band=band, convergence_dwell=dwell)
    rmse = [] if oracle is not None else None
    for tr in result.traces:
        rep.steps.append(tr.step)
        rep.times.append(tr.time)
        rates = np.asarray(tr.rate)
        rep.mean_rate.append(float(rates.mean()) if rates.size else 0.0)
        rep.min_rate.append(float(rates.min()) if rates.size else 0.0)
        rep.max_rate.append(float(rates.max()) if rates.size else 0.0)
        rep.std_rate.append(float(rates.std()) if rates.size else 0.0)
        rep.fraction_below_mbl.append(fraction_below_mbl(tr, p))
        if rmse is not None:
            rmse.append(rmse_vs_oracle(tr, oracle))
    rep.rmse_vs_oracle = rmse
    last = result.traces[-1]
    rep.final_rates = {int(i): float(r) for i, r in zip(last.ids, last.rate)}
    if convergence_of is not None:
        conv = convergence_times(result, convergence_of, p, band, dwell, reference_group)
        rep.convergence_s = {v: c.seconds for v, c in conv.items()}
    if distances and result.deliveries:
        for d in distances:
            ratio = effective_delivery_ratio(result.deliveries, d, p)
            vals = [x for x in ratio.values() if x is not None]
            rep.effective[str(d)] = {
                "mean_delivery_ratio": float(np.mean(vals)) if vals else None,
                "per_vehicle": {str(k): v for k, v in ratio.items()},
            }
        irt = [x for x in mean_irt(result.deliveries, p.sample_period_Ts).values() if x is not None]
        rep.extra["mean_irt_s"] = float(np.mean(irt)) if irt else None
    return rep
