"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line (also collected in the
"acceptance criteria" section of the pytest summary).  Tolerances are the
contractual ones; failures are reported, not relaxed.
"""

import time

import numpy as np
import pytest

from conftest import chain_problem, random_instance
from fabricsim.channel import ChannelModel, build_neighbor_graph, max_range, reception_probability
from fabricsim.controllers import dual_gradient_price_update, fabric_price_update
from fabricsim.engine import RunConfig, replicate, run
from fabricsim.metrics import convergence_times, fraction_below_mbl, rmse_vs_oracle
from fabricsim.model import SimParams
from fabricsim.oracle import NumProblem, check_alpha_fair, solve_num, utility
from fabricsim.scenario import ScenarioSpec, build_scenario

pytestmark = pytest.mark.acceptance

C = 781.25


def in_range(**kw):
    # one-hop experiment: every vehicle hears every other, one update per second
    return SimParams(tx_power_mw=1000.0, path_loss_exp=2.0, sample_period_Ts=1.0, **kw)


def all_in_range(n):
    return ScenarioSpec("all_in_range", road_length=1000.0, density=n / 1000.0)


def initial_problem(spec, p):
    sc = build_scenario(spec, p)
    pos = np.array([v.position for v in sc.vehicles], dtype=float)
    return NumProblem.from_graph(build_neighbor_graph(pos, ChannelModel.from_params(p), p), p)


def group_means(result, groups, last):
    """Per-group mean rate averaged over the final ``last`` steps."""
    out = {}
    for name, ids in groups.items():
        idx = np.asarray(ids)
        out[name] = float(np.mean([tr.rate[np.isin(tr.ids, idx)].mean() for tr in result.traces[-last:]]))
    return out


def test_c01_symmetric_optimum(verdict):
    p = in_range()
    ok, parts = True, []
    for n, target in ((100, 7.8125), (200, 3.90625)):
        oracle = solve_num(initial_problem(all_in_range(n), p)).rates.rates
        fab = run(RunConfig(all_in_range(n), "fabric", sync=True, steps=100), p)[-1].rate
        err_o = np.max(np.abs(oracle / target - 1))
        err_f = np.max(np.abs(fab / target - 1))
        ok &= len(fab) == n and err_o <= 0.01 and err_f <= 0.01
        parts.append(f"N={n} oracle {oracle.mean():.5f} fabric {fab.mean():.5f} (target {target})")
    verdict("1", ok, "; ".join(parts))


def test_c02_limeric_gap(verdict):
    p = in_range()
    ok, parts = True, []
    for n, band in ((100, (0.13, 0.16)), (200, (0.06, 0.08))):
        r = run(RunConfig(all_in_range(n), "limeric", sync=True, steps=300), p)[-1].rate
        common = float(r.mean())
        gap = 1.0 - common / (C / n)
        ok &= bool(np.ptp(r) <= 1e-9 * common) and band[0] <= gap <= band[1]
        parts.append(f"N={n} rate {common:.4f}, {100 * gap:.2f}% below optimum (band {band})")
    verdict("2", ok, "; ".join(parts))


def test_c03_fairness_certificate(verdict):
    p = SimParams()
    ok, parts = True, []
    for alpha in (1.0, 2.0, 6.0):
        prob = initial_problem(ScenarioSpec("multihop_line"), p.replace(alpha=alpha))
        sol = solve_num(prob)
        cert = check_alpha_fair(prob, sol.rates, trials=1000, rng=np.random.default_rng(7))
        ok &= sol.converged and cert.worst_margin <= 1e-6
        parts.append(f"alpha={alpha:g} worst margin {cert.worst_margin:.2e}")
    verdict("3", ok, "; ".join(parts))


def _symmetric_chain_grid(alpha, step=1e-3):
    # chain optimum is symmetric (a, b, b, a); a + b <= 3 and a + 2b <= 3
    a = np.arange(0.01, 3.0, step)[:, None]
    b = np.arange(0.01, 1.5, step)[None, :]
    feasible = (a + b <= 3 + 1e-12) & (a + 2 * b <= 3 + 1e-12)
    obj = np.where(feasible, utility(a, alpha) + utility(b, alpha), -np.inf)
    i, j = np.unravel_index(np.argmax(obj), obj.shape)
    return float(a[i, 0]), float(b[0, j])


def test_c04a_chain_alpha1(verdict):
    r = solve_num(chain_problem(1.0)).rates.rates
    grid = _symmetric_chain_grid(1.0)
    ok = np.allclose(r, [1.5, 0.75, 0.75, 1.5], atol=1e-4) and np.allclose(grid, (1.5, 0.75), atol=2e-3)
    verdict("4a", ok, f"alpha=1 rates {np.round(r, 6).tolist()}, grid {grid}")


def test_c04b_chain_alpha6(verdict):
    r = solve_num(chain_problem(6.0)).rates.rates
    grid = _symmetric_chain_grid(6.0)
    exact_a = 3.0 / (1.0 + 2.0 * 2.0 ** (-1 / 6))
    ok = bool(np.all(np.abs(r - 1.0) <= 0.02))
    verdict("4b", ok, f"alpha=6 rates {np.round(r, 4).tolist()}, grid {grid}, "
                      f"closed form ({exact_a:.4f}, {exact_a * 2 ** (-1 / 6):.4f}); need all within 2% of 1.0")


def test_c05_mbl_compliance(verdict):
    p = SimParams()
    spec = ScenarioSpec("multihop_line")
    oracle = solve_num(initial_problem(spec, p))
    res = run(RunConfig(spec, "fabric", sync=True, steps=100), p)
    ref = dict(zip(res[0].ids.tolist(), oracle.rates.rates))
    f20, f100 = fraction_below_mbl(res[20], p), fraction_below_mbl(res[100], p)
    rmse = rmse_vs_oracle(res[20], ref)
    ok = f20 >= 0.7 and f100 >= 0.95 and rmse <= 2.5
    verdict("5", ok, f"fraction below MBL {f20:.3f} @20 (>=0.7), {f100:.3f} @100 (>=0.95), "
                     f"rmse {rmse:.3f} @20 (<=2.5); max CBT @100 {res[100].cbt.max():.3f} "
                     f"vs dead-band edge {(1 + p.anti_flap_f) * p.mbl_fraction:.3f}")


def test_c06_jam_clusters(verdict):
    p = SimParams(tx_power_mw=1000.0)
    spec = ScenarioSpec("jam_clusters")
    last = 50
    fab = {}
    for alpha in (1.0, 2.0, 6.0):
        res = run(RunConfig(spec, "fabric", sync=False, steps=300), p.replace(alpha=alpha))
        groups = res.scenario.groups
        fab[alpha] = group_means(res, groups, last)
        a_min = min(tr.rate[np.isin(tr.ids, groups["A"])].min() for tr in res.traces[-last:])
        fab[alpha]["A_min"] = float(a_min)
    lp_res = run(RunConfig(spec, "limeric_pulsar", sync=False, steps=300), p)
    lp = group_means(lp_res, lp_res.scenario.groups, last)
    a_ok = all(fab[a]["A_min"] >= 10.0 - 1e-9 for a in fab)
    bs = [fab[a]["B"] for a in (1.0, 2.0, 6.0)]
    b_monotone = all(x >= y - 1e-9 for x, y in zip(bs, bs[1:]))
    gap = {a: abs(fab[a]["B"] - fab[a]["jam"]) / fab[a]["jam"] for a in fab}
    approaches = gap[6.0] < gap[1.0]
    lp_ok = abs(lp["A"] - lp["jam"]) / lp["jam"] <= 0.05
    ok = a_ok and b_monotone and approaches and lp_ok
    verdict("6", ok, "FABRIC B/jam " + ", ".join(f"a={a:g}: {fab[a]['B']:.2f}/{fab[a]['jam']:.2f}" for a in fab)
            + f", A min {min(fab[a]['A_min'] for a in fab):.2f}; LIMERIC+PULSAR A {lp['A']:.2f} jam {lp['jam']:.2f}")


def test_c07_anti_flapping(verdict):
    amp = {}
    for f in (0.22, 0.0):
        res = run(RunConfig(all_in_range(100), "fabric", sync=False, steps=200), in_range(anti_flap_f=f))
        rates = np.array([tr.rate for tr in res.traces[-100:]])
        amp[f] = float(np.mean(rates.max(axis=0) - rates.min(axis=0)))
    verdict("7", amp[0.22] < amp[0.0], f"mean peak-to-peak over last 100 steps: f=0.22 {amp[0.22]:.4f}, "
                                       f"f=0 {amp[0.0]:.4f}")


def _reduce_recover(res, vid, r_max):
    t, r = res.rate_series(vid)
    below = np.flatnonzero(r < r_max - 1e-9)
    if below.size == 0:
        return None, None, None
    i_red = int(below[0])
    after = np.flatnonzero(r[i_red:] >= r_max - 1e-9)
    back = [i_red + int(k) for k in after if np.all(r[i_red + int(k):] >= r_max - 1e-9)]
    i_rec = back[0] if back else None
    return i_red, (t[i_red], None if i_rec is None else t[i_rec]), i_rec


def test_c08_single_approach(verdict):
    p = SimParams()
    spec = ScenarioSpec("single_approach")
    out = {}
    for kind in ("fabric", "limeric_pulsar"):
        res = run(RunConfig(spec, kind, sync=False), p)
        mover = res.scenario.groups["mover"][0]
        i_red, (t_red, t_rec), i_rec = _reduce_recover(res, mover, p.r_max)
        step = res.traces[i_red]
        nbrs = int(step.n_neighbors[np.flatnonzero(step.ids == mover)[0]])
        x_rec = None if i_rec is None else float(res.traces[i_rec].x[np.flatnonzero(res.traces[i_rec].ids == mover)[0]])
        xs = [v.position[0] for v in res.scenario.vehicles if v.id != mover]
        out[kind] = dict(t_red=t_red, t_rec=t_rec, nbrs=nbrs, x_rec=x_rec, centre=float(np.mean(xs)))
    f, lp = out["fabric"], out["limeric_pulsar"]
    ok = (58.5 <= f["nbrs"] <= 97.5 and f["t_rec"] is not None and f["x_rec"] > f["centre"]
          and lp["t_rec"] is not None and lp["t_red"] < f["t_red"] and lp["t_rec"] > f["t_rec"])
    verdict("8", ok, f"FABRIC reduces at {f['t_red']:.1f} s with {f['nbrs']} neighbors (78 +-25%), recovers at "
                     f"{f['t_rec']:.1f} s; LIMERIC+PULSAR reduces at {lp['t_red']:.1f} s, recovers at "
                     f"{lp['t_rec'] if lp['t_rec'] is None else round(lp['t_rec'], 1)} s")


def _mean_batch_convergence(results, p):
    vals, unconverged = [], 0
    for res in results:
        batch = [v for b in res.scenario.groups["batches"] for v in b]
        conv = convergence_times(res, batch, p, reference_group=res.scenario.groups["queue"])
        for c in conv.values():
            if c.seconds is None:
                unconverged += 1
            else:
                vals.append(c.seconds)
    return float(np.mean(vals)), unconverged


def test_c09_queue_convergence(verdict):
    p = SimParams()
    start = time.perf_counter()
    means = {}
    for kind in ("fabric", "limeric_pulsar"):
        results, _ = replicate(RunConfig(ScenarioSpec("queue"), kind, sync=False), p, 10)
        means[kind] = _mean_batch_convergence(results, p)
    (tf, uf), (tl, ul) = means["fabric"], means["limeric_pulsar"]
    ratio = tf / tl
    verdict("9", tf < tl and ratio <= 0.6,
            f"mean batch convergence FABRIC {tf:.2f} s ({uf} unconverged), LIMERIC+PULSAR {tl:.2f} s "
            f"({ul} unconverged), ratio {ratio:.2f} (<=0.6), 20 runs in {time.perf_counter() - start:.0f} s")


def _price_heard_property():
    """Two vehicles over a Rayleigh link: one delivered beacon per period suffices for a fresh price."""
    p = SimParams(nakagami_m=1.0, price_init=0.06)  # rate ~8.3: two beacons per period
    model = ChannelModel.from_params(p)
    lo, hi = 1.0, 2000.0
    for _ in range(60):  # distance where a single beacon gets through half the time
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if reception_probability(model, p.tx_power_mw, mid, p.sensitivity_dbm) > 0.5 else (lo, mid)
    spec = ScenarioSpec("custom", positions=((0.0, 0.0), (lo, 0.0)))
    res = run(RunConfig(spec, "fabric", sync=True, steps=150, seed=3, record_deliveries=True), p)
    fresh = stale = partial = 0
    for rec, tr in zip(res.deliveries, res.traces[1:]):
        got, sent = int(rec.received[0, 1]), int(rec.sent[1])
        expect = min(max(1.0 / (tr.price[0] + tr.price[1]), p.r_min), p.r_max)
        if got >= 1:
            fresh += tr.rate[0] == expect
            partial += got < sent
            if tr.rate[0] != expect:
                return False, "rate used a stale price despite a delivery"
        else:
            stale += tr.rate[0] != expect
    return partial > 0 and stale > 0, f"{fresh} fresh updates ({partial} with partial delivery), {stale} stale"


def test_c10_robust_to_loss(verdict):
    p = SimParams(nakagami_m=3.0)
    res = run(RunConfig(ScenarioSpec("multihop_line"), "fabric", sync=True, steps=100), p)
    frac = fraction_below_mbl(res[100], p)
    prop_ok, prop_detail = _price_heard_property()
    verdict("10", frac >= 0.9 and prop_ok,
            f"Nakagami m=3 fraction below MBL {frac:.3f} @100 (>=0.9); price-heard property "
            f"{'holds' if prop_ok else 'violated'} ({prop_detail})")


def test_c11_numerical_cross_checks(verdict):
    rng = np.random.default_rng(11)
    beta, f = 2.8e-5, 0.22
    pi = rng.uniform(0, 5e-3, 20_000)
    load = rng.uniform(0, 3 * C, 20_000)
    g = C - load
    outside = np.abs(g) >= f * C
    lhs = fabric_price_update(pi[outside], beta, C, load[outside], f)
    rhs = dual_gradient_price_update(pi[outside], beta, g[outside] / np.abs(g[outside]), 0.0)
    exact = int(np.sum(lhs != rhs))
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        prob = random_instance(r, n=5, alpha=float(r.choice([0.7, 1.0, 2.0])))
        x = r.uniform(0.2, 1.5, prob.n)
        grad = prob.dual_gradient(x)
        h = 1e-6
        fd = np.array([(prob.dual_value(x + h * e) - prob.dual_value(x - h * e)) / (2 * h) for e in np.eye(prob.n)])
        worst = max(worst, float(np.max(np.abs(fd - grad) / np.maximum(np.abs(grad), 1e-12))))
    verdict("11", exact == 0 and worst <= 1e-6,
            f"{exact} mismatches in {int(outside.sum())} FABRIC vs scaled dual updates; "
            f"dual gradient vs finite differences worst relative error {worst:.1e}")


def test_c12_channel_calibration(verdict):
    p = SimParams()
    reach = max_range(ChannelModel.from_params(p), 251.0, -92.0)
    verdict("12", abs(reach / 531.5 - 1) <= 0.01, f"max range {reach:.2f} m (531.5 m +-1%)")
