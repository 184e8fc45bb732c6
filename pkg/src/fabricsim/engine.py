"""Discrete-time simulation loop.

One step lasts one sample period ``Ts``: vehicles move, the neighbor graph is
rebuilt, every vehicle broadcasts ``max(1, round(r Ts))`` beacons, and then
each vehicle updates its rate (and price) from its neighbor table.

Synchronous mode: all vehicles update at the same instant.  Prices are
refreshed first and exchanged over the links that delivered this period, so
rates are computed from the new prices (the dual iteration proper).

Asynchronous mode: vehicle v updates at its phase offset inside the period
and sees the state its neighbors held at that instant, provided a beacon
from them got through this period.  Updates made later in the period reach
v only in the next one.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fabricsim.channel import ChannelModel, build_neighbor_graph, deliver_beacons
from fabricsim.controllers import LocalView, price_step, rate_step
from fabricsim.model import CONTROLLER_KINDS, ConfigError, SimParams
from fabricsim.scenario import MobilityState, Scenario, ScenarioSpec, build_scenario, step_mobility

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    controller: str = "fabric"
    sync: bool = True
    steps: int | None = None
    seed: int = 0
    replications: int = 1
    record_deliveries: bool = False

    def __post_init__(self):
        errors = []
        if self.controller not in CONTROLLER_KINDS:
            errors.append(f"unknown controller {self.controller!r}")
        if self.steps is not None and self.steps < 1:
            errors.append("steps must be >= 1")
        if self.replications < 1:
            errors.append("replications must be >= 1")
        if errors:
            raise ConfigError(errors)


@dataclass
class StepTrace:
    """State of every present vehicle after step ``step`` (step 0 is the initial state)."""

    step: int
    time: float
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    rate: np.ndarray
    price: np.ndarray
    cbt: np.ndarray
    rx_count: np.ndarray
    n_neighbors: np.ndarray

    def rate_of(self, vid: int) -> float | None:
        hit = np.flatnonzero(self.ids == vid)
        return float(self.rate[hit[0]]) if hit.size else None

    def rows(self):
        for i in range(len(self.ids)):
            yield (self.step, self.time, int(self.ids[i]), self.x[i], self.y[i], self.rate[i],
                   self.price[i], self.cbt[i], int(self.rx_count[i]))


@dataclass
class DeliveryRecord:
    """Raw per-period deliveries among the vehicles ``ids``."""

    step: int
    ids: np.ndarray
    positions: np.ndarray
    rates: np.ndarray
    sent: np.ndarray
    received: np.ndarray


@dataclass
class RunResult:
    config: RunConfig
    scenario: Scenario
    traces: list[StepTrace]
    deliveries: list[DeliveryRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.traces)

    def __getitem__(self, k):
        return self.traces[k]

    def __iter__(self):
        return iter(self.traces)

    def rate_series(self, vid: int) -> tuple[np.ndarray, np.ndarray]:
        """(times, rates) of one vehicle over the steps it was present."""
        t, r = [], []
        for tr in self.traces:
            val = tr.rate_of(vid)
            if val is not None:
                t.append(tr.time)
                r.append(val)
        return np.array(t), np.array(r)


# columns of the live state and of every neighbor-table entry
RATE, PRICE, CBT, MAX_CBT = range(4)


class _World:
    def __init__(self, sc: Scenario, p: SimParams, sync: bool, rng_phase: np.random.Generator):
        self.p = p
        n = len(sc.vehicles)
        self.n = n
        self.mob = MobilityState.from_scenario(sc)
        self.lo = np.array([v.bounds(p)[0] for v in sc.vehicles])
        self.hi = np.array([v.bounds(p)[1] for v in sc.vehicles])
        self.weight = np.array([p.weights_default if v.weight is None else v.weight for v in sc.vehicles])
        self.state = np.zeros((n, 4))
        self.state[:, RATE] = [v.rate_r for v in sc.vehicles]
        self.state[:, PRICE] = [v.price_pi for v in sc.vehicles]
        self.phase = np.zeros(n) if sync else rng_phase.uniform(0.0, p.sample_period_Ts, n)
        self.table = np.zeros((n, n, 4))
        self.t_heard = np.full((n, n), -np.inf)

    @property
    def rate(self):
        return self.state[:, RATE]

    @property
    def price(self):
        return self.state[:, PRICE]

    def reset(self, ids):
        for i in ids:
            self.state[i] = (self.hi[i], self.p.price_init, 0.0, 0.0)
            self.t_heard[i, :] = -np.inf
            self.t_heard[:, i] = -np.inf

    def table_rows(self, heard, now):
        """Stamp this period's links and return each vehicle's unexpired neighbor ids."""
        self.t_heard[heard] = now
        live = (now - self.t_heard) <= self.p.neighbor_expiry + 1e-9
        live &= self.mob.present[None, :] & self.mob.present[:, None]
        np.fill_diagonal(live, False)
        return _row_indices(live)

    def view(self, v, nbrs, measured_load, price=None) -> LocalView:
        entries = self.table[v, nbrs]
        return LocalView(
            vehicle=v,
            rate=float(self.state[v, RATE]),
            price=float(self.state[v, PRICE] if price is None else price),
            r_min=float(self.lo[v]),
            r_max=float(self.hi[v]),
            weight=float(self.weight[v]),
            measured_load=measured_load,
            nbr_ids=nbrs,
            nbr_rates=entries[:, RATE],
            nbr_prices=entries[:, PRICE],
            nbr_cbt=entries[:, CBT],
            nbr_max_cbt=entries[:, MAX_CBT],
            nbr_last_heard=self.t_heard[v, nbrs],
        )

    def commit(self, v, out):
        self.state[v] = (out.rate, out.price, out.payload.measured_cbt, out.payload.max_cbt)


def _row_indices(mask):
    """Column indices of the True entries, one array per row."""
    rows, cols = np.nonzero(mask)
    return np.split(cols, np.cumsum(np.bincount(rows, minlength=mask.shape[0]))[:-1])


def _offered(adjacency, rates, p):
    return p.airtime * (adjacency.astype(float) @ rates)


def run(cfg: RunConfig, p: SimParams) -> RunResult:
    """Simulate ``cfg`` with parameters ``p``; deterministic given ``cfg.seed``.

    Placement comes from ``cfg.scenario.rng_seed``; asynchronous phases and
    channel losses from ``cfg.seed``.
    """
    p.validated()
    sc = build_scenario(cfg.scenario, p)
    rng_phase, rng_chan = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    w = _World(sc, p, cfg.sync, rng_phase)
    model = ChannelModel.from_params(p)
    steps = sc.suggested_steps if cfg.steps is None else cfg.steps
    Ts = p.sample_period_Ts
    kind = cfg.controller
    if kind == "fixed":
        w.rate[:] = w.hi

    def snapshot(step, t, P, adj, rx):
        sub = adj[np.ix_(P, P)]
        return StepTrace(
            step, t, P.copy(), w.mob.position[P, 0].copy(), w.mob.position[P, 1].copy(),
            w.rate[P].copy(), w.price[P].copy(), _offered(sub, w.rate[P], p), rx, sub.sum(axis=1) - 1,
        )

    P = np.flatnonzero(w.mob.present)
    g0 = build_neighbor_graph(w.mob.position[P], model, p, ids=P)
    adj0 = np.zeros((w.n, w.n), dtype=bool)
    adj0[np.ix_(P, P)] = g0.adjacency
    traces = [snapshot(0, 0.0, P, adj0, np.zeros(len(P), dtype=int))]
    deliveries: list[DeliveryRecord] = []

    for k in range(1, steps + 1):
        t = k * Ts
        before = w.mob.present.copy()
        w.mob = step_mobility(w.mob, sc.events, t - Ts, Ts)
        w.reset(np.flatnonzero(w.mob.present & ~before))
        P = np.flatnonzero(w.mob.present)

        graph = build_neighbor_graph(w.mob.position[P], model, p, ids=P)
        report = deliver_beacons(graph, w.rate[P], rng_chan, p)
        heard = np.zeros((w.n, w.n), dtype=bool)
        heard[np.ix_(P, P)] = report.heard
        frac = np.zeros((w.n, w.n))
        sub = report.received / report.sent[None, :]
        np.fill_diagonal(sub, 0.0)
        frac[np.ix_(P, P)] = sub
        if cfg.record_deliveries:
            deliveries.append(DeliveryRecord(k, P.copy(), w.mob.position[P].copy(), w.rate[P].copy(),
                                             report.sent.copy(), report.received.copy()))

        heard_src = _row_indices(heard)
        nbrs = w.table_rows(heard, t)
        # load sensed over the period, from the rates the beacons were sent at
        load = w.rate + frac @ w.rate
        if cfg.sync:
            w.table[heard] = np.broadcast_to(w.state[None, :, :], w.table.shape)[heard]
            new_price = w.price.copy()
            for v in P:
                new_price[v] = price_step(kind, w.view(v, nbrs[v], float(load[v])), p)
            # synchronized instant: fresh prices travel over this period's links
            w.table[:, :, PRICE][heard] = np.broadcast_to(new_price[None, :], heard.shape)[heard]
            outs = [(v, rate_step(kind, w.view(v, nbrs[v], float(load[v]), new_price[v]), p, new_price[v]))
                    for v in P]
            for v, out in outs:
                w.commit(v, out)
        else:
            for v in P[np.argsort(w.phase[P], kind="stable")]:
                src = heard_src[v]
                w.table[v, src] = w.state[src]
                view = w.view(v, nbrs[v], float(load[v]))
                w.commit(v, rate_step(kind, view, p, price_step(kind, view, p)))

        adj = np.zeros((w.n, w.n), dtype=bool)
        adj[np.ix_(P, P)] = graph.adjacency
        traces.append(snapshot(k, t, P, adj, report.rx_count()))

    return RunResult(cfg, sc, traces, deliveries)


def replication_seeds(master_seed: int, n: int) -> list[int]:
    """Seeds of ``n`` replications; the first is the master seed itself."""
    return [master_seed + i for i in range(n)]


def _run_one(args):
    cfg, p = args
    return run(cfg, p)


def replicate(cfg: RunConfig, p: SimParams, n_replications: int | None = None,
              jobs: int = 1) -> tuple[list[RunResult], list[int]]:
    """Independent runs differing only in their seed."""
    n = cfg.replications if n_replications is None else n_replications
    if n < 1:
        raise ConfigError(["need at least one replication"])
    seeds = replication_seeds(cfg.seed, n)
    cfgs = [RunConfig(cfg.scenario, cfg.controller, cfg.sync, cfg.steps, s, 1, cfg.record_deliveries)
            for s in seeds]
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [(c, p) for c in cfgs]))
    else:
        results = [run(c, p) for c in cfgs]
    return results, seeds
