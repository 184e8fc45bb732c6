import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fabricsim.engine import DeliveryRecord, RunConfig, run
from fabricsim.metrics import (
    MetricReport,
    convergence_time,
    effective_delivery_ratio,
    effective_rate,
    fraction_below_mbl,
    mean_irt,
    rmse_vs_oracle,
    summarize,
)
from fabricsim.model import RateAllocation, SimParams
from fabricsim.scenario import ScenarioSpec


def step(ids, rate, cbt=None):
    ids = np.asarray(ids)
    return SimpleNamespace(ids=ids, rate=np.asarray(rate, float),
                           cbt=np.zeros(len(ids)) if cbt is None else np.asarray(cbt, float))


def test_rmse_examples():
    assert rmse_vs_oracle(step([0, 1], [3.0, 4.0]), {0: 3.0, 1: 4.0}) == 0.0
    assert rmse_vs_oracle(step([0, 1], [4.0, 3.0]), {0: 3.0, 1: 4.0}) == pytest.approx(1.0)
    alloc = RateAllocation(np.array([0, 1]), np.array([3.0, 4.0]))
    assert rmse_vs_oracle(step([1, 0], [4.0, 3.0]), alloc) == 0.0


def test_rmse_vehicle_mismatch():
    with pytest.raises(ValueError):
        rmse_vs_oracle(step([0, 1], [1, 1]), {0: 1.0, 2: 1.0})


@given(st.permutations(list(range(6))))
def test_rmse_permutation_invariant(perm):
    rates = np.arange(6, dtype=float)
    ref = {i: 2.0 for i in range(6)}
    a = rmse_vs_oracle(step(range(6), rates), ref)
    b = rmse_vs_oracle(step(perm, rates[list(perm)]), ref)
    assert a == pytest.approx(b, rel=1e-15)
    assert a >= 0


def test_fraction_below_mbl_examples():
    p = SimParams()
    assert fraction_below_mbl(step([0, 1], [1, 1], [0.5, 0.5]), p) == 1.0
    assert fraction_below_mbl(step([0, 1], [1, 1], [0.7, 0.9]), p) == 0.0
    assert fraction_below_mbl(step([0, 1], [1, 1], [0.6, 0.61]), p) == 0.5


def test_fraction_monotone_in_load():
    p = SimParams()
    rng = np.random.default_rng(0)
    A = rng.random((30, 30)) < 0.3
    A = A | A.T
    np.fill_diagonal(A, True)
    r = rng.uniform(1, 10, 30)
    prev = 1.0
    for scale in np.linspace(0.1, 3, 15):
        cbt = p.airtime * A @ (r * scale)
        frac = fraction_below_mbl(step(range(30), r * scale, cbt), p)
        assert frac <= prev
        prev = frac


def _record(ids, positions, sent, received):
    pos = np.column_stack([positions, np.zeros(len(positions))])
    return DeliveryRecord(0, np.asarray(ids), pos, np.asarray(sent, float), np.asarray(sent),
                          np.asarray(received))


def test_delivery_ratio_lossless_and_partial():
    p = SimParams()
    full = _record([0, 1], [0.0, 100.0], [2, 2], [[2, 2], [2, 2]])
    assert effective_delivery_ratio([full], 250, p) == {0: 1.0, 1: 1.0}
    # 100 copies due, 80 received
    recs = [_record([0, 1], [0.0, 100.0], [10, 10], [[10, 8], [8, 10]]) for _ in range(10)]
    assert effective_delivery_ratio(recs, 250, p)[0] == pytest.approx(0.8)
    # nobody within d: absent
    far = _record([0, 1], [0.0, 400.0], [2, 2], [[2, 1], [1, 2]])
    assert effective_delivery_ratio([far], 250, p) == {0: None, 1: None}
    with pytest.raises(ValueError):
        effective_delivery_ratio([full], 0, p)


def test_effective_rate():
    assert effective_rate(10, 0.8) == pytest.approx(8)
    assert effective_rate(7.5, 1.0) == 7.5
    r = np.array([3.0, 9.0])
    assert np.all(effective_rate(r, [0.2, 0.9]) <= r)
    with pytest.raises(ValueError):
        effective_rate(10, 1.2)


def test_mean_irt_examples():
    # one neighbor at 10/s over a 0.2 s period: 2 beacons each period
    one = [_record([0, 1], [0.0, 50.0], [2, 2], [[2, 2], [2, 2]]) for _ in range(10)]
    assert mean_irt(one, 0.2)[0] == pytest.approx(0.1)
    half = [_record([0, 1], [0.0, 50.0], [2, 2], [[2, 1], [1, 2]]) for _ in range(10)]
    assert mean_irt(half, 0.2)[0] == pytest.approx(0.2)
    two = [_record([0, 1, 2], [0.0, 50.0, 60.0], [1, 1, 1], np.ones((3, 3), int)) for _ in range(10)]
    assert mean_irt(two, 0.2)[0] == pytest.approx(0.1)
    silent = [_record([0], [0.0], [2], [[2]])]
    assert mean_irt(silent, 0.2) == {0: None}


def test_convergence_examples():
    t = np.arange(30) * 0.2
    assert convergence_time(t, np.full(30, 10.0)).seconds == 0.0
    r = np.where(t < 1.0, 10.0, 5.0)
    c = convergence_time(t, r)
    assert c.seconds == pytest.approx(0.2) and c.departed_at == pytest.approx(0.8)
    ramp = np.where(t < 1.0, 10.0, np.maximum(5.0, 10 - (t - 0.8) * 5))
    assert convergence_time(t, ramp).seconds == pytest.approx(1.0)


def test_convergence_never():
    t = np.arange(30) * 0.2
    r = np.where(np.arange(30) % 2 == 0, 4.0, 6.0)
    c = convergence_time(t, r, reference=5.0)
    assert c.seconds is None and c.residual == pytest.approx(0.2)
    with pytest.raises(ValueError):
        convergence_time(t, r[:-1])


def test_summarize_and_serialize(params):
    res = run(RunConfig(ScenarioSpec(n_vehicles=30), "fabric", steps=10), params)
    oracle = {int(i): 5.0 for i in res[0].ids}
    rep = summarize(res, params, oracle=oracle, convergence_of=[0, 1])
    assert len(rep.steps) == 11 and all(0 <= f <= 1 for f in rep.fraction_below_mbl)
    assert all(x >= 0 for x in rep.rmse_vs_oracle)
    d = json.loads(rep.to_json())
    assert d["summary"]["final_mean_rate"] == rep.mean_rate[-1]
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].split(",") == list(MetricReport.STEP_COLUMNS) and len(lines) == 12
    with pytest.raises(ValueError):
        MetricReport(fraction_below_mbl=[1.5])


def test_effective_metrics_in_summary():
    p = SimParams(nakagami_m=3.0)
    res = run(RunConfig(ScenarioSpec(), "fabric", steps=5, record_deliveries=True), p)
    rep = summarize(res, p, distances=[100, 250])
    near, far = rep.effective["100"]["mean_delivery_ratio"], rep.effective["250"]["mean_delivery_ratio"]
    assert 0 < far < near <= 1
    assert rep.extra["mean_irt_s"] > 0


def test_rmse_multihop_after_twenty_steps():
    from fabricsim.channel import ChannelModel, build_neighbor_graph
    from fabricsim.oracle import NumProblem, solve_num

    p = SimParams()
    res = run(RunConfig(ScenarioSpec(), "fabric", steps=20), p)
    pos = np.column_stack([res[0].x, res[0].y])
    sol = solve_num(NumProblem.from_graph(build_neighbor_graph(pos, ChannelModel.from_params(p), p), p))
    rmse = rmse_vs_oracle(res[20], dict(zip(res[0].ids.tolist(), sol.rates.rates)))
    assert 0.75 <= rmse <= 2.5
