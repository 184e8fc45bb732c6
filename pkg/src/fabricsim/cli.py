"""Command-line front end.

    fabricsim run     --preset all_in_range --override controller=fabric sync=true --out out/
    fabricsim oracle  --preset multihop_line --override params.alpha=2 --out out/
    fabricsim compare --preset queue --controllers fabric:async limeric_pulsar:async --out out/
    fabricsim sweep   --preset multihop_line --grid params.alpha=1,2,6 --out out/

A config is a JSON document with up to four sections: ``params``
(:class:`SimParams` fields), ``scenario`` (:class:`ScenarioSpec` fields),
``run`` (controller, sync, steps, seed, replications, record_deliveries) and
``oracle`` (optional explicit instance: neighbor_sets, capacity).  Overrides
use ``section.key=value`` or a bare ``key=value`` when the key is unique.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem,
4 oracle did not converge.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from fabricsim import __version__
from fabricsim.channel import ChannelModel, build_neighbor_graph
from fabricsim.engine import RunConfig, RunResult, replicate, run
from fabricsim.metrics import summarize
from fabricsim.model import ConfigError, SimParams
from fabricsim.oracle import InfeasibleProblem, NumProblem, solve_num
from fabricsim.scenario import ScenarioSpec, build_scenario

log = logging.getLogger("fabricsim")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4

STEP_COLUMNS = ("step", "time", "vehicle", "x", "y", "rate", "price", "cbt", "rx_count")
ORACLE_COLUMNS = ("vehicle", "x", "rate", "price")

RUN_DEFAULTS: dict[str, Any] = {
    "controller": "fabric",
    "sync": True,
    "steps": None,
    "seed": 0,
    "replications": 1,
    "record_deliveries": False,
}
ORACLE_KEYS = ("neighbor_sets", "capacity", "tol", "max_iter", "method")

# radio settings follow the experiment each scenario reproduces
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "all_in_range": {
        "params": {"tx_power_mw": 1000.0, "path_loss_exp": 2.0, "sample_period_Ts": 1.0},
        "scenario": {"kind": "all_in_range", "road_length": 1000.0, "density": 0.1},
        "run": {"steps": 100},
    },
    "multihop_line": {"scenario": {"kind": "multihop_line"}, "run": {"steps": 100}},
    "jam_clusters": {
        "params": {"tx_power_mw": 1000.0},
        "scenario": {"kind": "jam_clusters"},
        "run": {"steps": 300, "sync": False},
    },
    "single_approach": {"scenario": {"kind": "single_approach"}, "run": {"sync": False}},
    "bridge": {
        "params": {"nakagami_m": 3.0},
        "scenario": {"kind": "bridge", "density": 200 / 1500},
        "run": {"sync": False},
    },
    "queue": {"scenario": {"kind": "queue"}, "run": {"sync": False}},
}


# ---------------------------------------------------------------- config


def _parse_value(text: str) -> Any:
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _section_keys() -> dict[str, set[str]]:
    import dataclasses

    return {
        "params": {f.name for f in dataclasses.fields(SimParams)},
        "scenario": {f.name for f in dataclasses.fields(ScenarioSpec)},
        "run": set(RUN_DEFAULTS),
        "oracle": set(ORACLE_KEYS),
    }


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Return a copy of ``doc`` with ``key=value`` overrides applied."""
    out = copy.deepcopy(doc)
    keys = _section_keys()
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"override '{item}' is not key=value")
            continue
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in keys or name not in keys[section]:
                errors.append(f"override '{key}' does not name an existing key")
                continue
        else:
            hits = [s for s, names in keys.items() if key in names]
            if len(hits) != 1:
                reason = "is unknown" if not hits else f"is ambiguous ({', '.join(hits)})"
                errors.append(f"override key '{key}' {reason}")
                continue
            section, name = hits[0], key
        out.setdefault(section, {})[name] = _parse_value(raw)
    if errors:
        raise ConfigError(errors)
    return out


def load_config(path: str | None, preset: str | None, overrides: Sequence[str] = ()) -> dict:
    """Merge preset, file and overrides into one config document."""
    doc: dict[str, dict] = {"params": {}, "scenario": {}, "run": {}}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})"])
        for sec, vals in PRESETS[preset].items():
            doc.setdefault(sec, {}).update(vals)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        unknown = [k for k in loaded if k not in ("params", "scenario", "run", "oracle", "meta")]
        if unknown:
            raise ConfigError([f"unknown config section '{k}'" for k in unknown])
        for sec, vals in loaded.items():
            if sec != "meta":
                doc.setdefault(sec, {}).update(vals)
    return apply_overrides(doc, overrides)


def resolve(doc: dict) -> tuple[SimParams, RunConfig]:
    """Typed objects from a config document; collects every field error."""
    errors: list[str] = []
    p = scen = None
    try:
        p = SimParams.from_dict(doc.get("params", {})).validated()
    except (ConfigError, TypeError) as exc:
        errors += getattr(exc, "errors", [str(exc)])
    try:
        scen = ScenarioSpec.from_dict(doc.get("scenario", {}))
    except (ConfigError, TypeError) as exc:
        errors += getattr(exc, "errors", [str(exc)])
    run_sec = dict(RUN_DEFAULTS)
    unknown = [k for k in doc.get("run", {}) if k not in RUN_DEFAULTS]
    errors += [f"unknown run field '{k}'" for k in unknown]
    run_sec.update({k: v for k, v in doc.get("run", {}).items() if k in RUN_DEFAULTS})
    cfg = None
    if not errors:
        try:
            cfg = RunConfig(scenario=scen, **run_sec)
        except ConfigError as exc:
            errors += exc.errors
    if errors:
        raise ConfigError(errors)
    return p, cfg


def resolved_document(p: SimParams, cfg: RunConfig, extra: dict | None = None) -> dict:
    doc = {
        "params": {k: v for k, v in p.to_dict().items() if k != "capacity_C"},
        "scenario": cfg.scenario.to_dict(),
        "run": {
            "controller": cfg.controller,
            "sync": cfg.sync,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "replications": cfg.replications,
            "record_deliveries": cfg.record_deliveries,
        },
    }
    if extra:
        doc.update(extra)
    return doc


def write_manifest(out: Path, p: SimParams, cfg: RunConfig, sections: dict | None = None, **info) -> None:
    """The manifest is itself a valid config: re-running it reproduces the outputs."""
    doc = resolved_document(p, cfg, sections)
    doc["meta"] = {"artifact_version": __version__, "capacity_C": p.capacity_C, **info}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- outputs


def write_steps_csv(path: Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for tr in result.traces:
            for row in tr.rows():
                step, t, vid, x, y, rate, price, cbt, rx = row
                w.writerow([step, f"{t:.6g}", vid, repr(float(x)), repr(float(y)), repr(float(rate)),
                            repr(float(price)), repr(float(cbt)), rx])


def _metric_report(result: RunResult, p: SimParams):
    groups = result.scenario.groups
    conv = ref = None
    if groups.get("batches"):
        conv = [v for batch in groups["batches"] for v in batch]
        ref = groups.get("queue")
    elif groups.get("mover"):
        conv = groups["mover"]
    dist = (250.0,) if result.deliveries else ()
    return summarize(result, p, convergence_of=conv, reference_group=ref, distances=dist)


def _emit_run(out: Path, result: RunResult, p: SimParams, formats: Sequence[str]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    report = _metric_report(result, p)
    if "csv" in formats:
        write_steps_csv(out / "steps.csv", result)
        (out / "metrics.csv").write_text(report.to_csv())
    if "json" in formats:
        (out / "metrics.json").write_text(report.to_json() + "\n")
    write_manifest(out, p, result.config)
    return report.summary()


# ---------------------------------------------------------------- commands


def _run_job(args):
    cfg, p = args
    return run(cfg, p)


def cmd_run(args) -> int:
    doc = load_config(args.config, args.preset, args.override)
    p, cfg = resolve(doc)
    out = Path(args.out)
    if cfg.replications == 1:
        summary = _emit_run(out, run(cfg, p), p, args.format)
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    results, seeds = replicate(cfg, p, jobs=args.jobs)
    rows = []
    for res, seed in zip(results, seeds):
        rows.append({"seed": seed, **_emit_run(out / f"rep_{seed}", res, p, args.format)})
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, p, cfg, replication_seeds=seeds)
    (out / "replications.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def oracle_problem(doc: dict, p: SimParams, cfg: RunConfig) -> tuple[NumProblem, np.ndarray, np.ndarray]:
    """NUM instance from an explicit ``oracle`` section or from the scenario's initial geometry."""
    sec = doc.get("oracle", {})
    if sec.get("neighbor_sets") is not None:
        sets = sec["neighbor_sets"]
        cap = float(sec.get("capacity", p.capacity_C))
        prob = NumProblem.from_sets(sets, cap, p.alpha, p.r_min, p.r_max, p.weights_default)
        ids = np.arange(len(sets))
        return prob, ids, ids.astype(float)
    sc = build_scenario(cfg.scenario, p)
    present = np.flatnonzero(sc.initially_present())
    pos = np.array([sc.vehicles[i].position for i in present], dtype=float).reshape(-1, 2)
    graph = build_neighbor_graph(pos, ChannelModel.from_params(p), p, ids=present)
    return NumProblem.from_graph(graph, p), present, pos[:, 0]


def cmd_oracle(args) -> int:
    doc = load_config(args.config, args.preset, args.override)
    p, cfg = resolve(doc)
    sec = doc.get("oracle", {})
    prob, ids, xs = oracle_problem(doc, p, cfg)
    sol = solve_num(prob, tol=float(sec.get("tol", 1e-8)), max_iter=int(sec.get("max_iter", 50_000)),
                    method=sec.get("method", "spg"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ORACLE_COLUMNS)
        for vid, x, r, pi in zip(ids, xs, sol.rates.rates, sol.prices):
            w.writerow([int(vid), repr(float(x)), repr(float(r)), repr(float(pi))])
    write_manifest(out, p, cfg, kkt_residual=sol.kkt_residual, iterations=sol.iterations,
                   converged=sol.converged, objective=sol.objective,
                   sections={"oracle": sec} if sec else None)
    rates = sol.rates.rates
    print(json.dumps({"n": int(prob.n), "min_rate": float(rates.min()), "max_rate": float(rates.max()),
                      "kkt_residual": sol.kkt_residual, "converged": sol.converged}, indent=2))
    if not sol.converged:
        log.error("oracle stopped at KKT residual %.3g", sol.kkt_residual)
        return EXIT_NONCONVERGED
    return EXIT_OK


def parse_controller(item: str) -> tuple[str, bool]:
    kind, _, mode = item.partition(":")
    mode = mode or "sync"
    if mode not in ("sync", "async"):
        raise ConfigError([f"controller mode must be sync or async, got '{mode}'"])
    return kind, mode == "sync"


def cmd_compare(args) -> int:
    if len(args.controllers) < 2:
        raise ConfigError(["compare needs at least two controllers"])
    doc = load_config(args.config, args.preset, args.override)
    p, base = resolve(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgs, labels = [], []
    for i, item in enumerate(args.controllers):
        kind, sync = parse_controller(item)
        cfgs.append(RunConfig(base.scenario, kind, sync, base.steps, base.seed, 1, base.record_deliveries))
        labels.append(f"{i}_{kind}_{'sync' if sync else 'async'}")
    if len({c.scenario for c in cfgs}) != 1:  # pragma: no cover - one spec feeds every run
        raise ConfigError(["mismatched scenario specs"])
    results = _dispatch(cfgs, p, args.jobs)
    summaries, reports = {}, {}
    for label, res in zip(labels, results):
        summaries[label] = _emit_run(out / label, res, p, args.format)
        reports[label] = _metric_report(res, p)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ("mean_rate", "min_rate", "max_rate", "fraction_below_mbl")
        w.writerow(["step", "time"] + [f"{lab}.{c}" for lab in labels for c in cols])
        first = reports[labels[0]]
        for k in range(len(first.steps)):
            row = [first.steps[k], f"{first.times[k]:.6g}"]
            for lab in labels:
                rep = reports[lab]
                row += [repr(getattr(rep, c)[k]) if k < len(rep.steps) else "" for c in cols]
            w.writerow(row)
    (out / "summary.json").write_text(json.dumps(summaries, indent=2) + "\n")
    write_manifest(out, p, base, controllers=list(args.controllers))
    _print_table(summaries)
    return EXIT_OK


def _print_table(summaries: dict[str, dict]) -> None:
    keys = ["final_mean_rate", "final_fraction_below_mbl", "mean_convergence_s", "unconverged"]
    print("controller".ljust(28) + "".join(k.rjust(26) for k in keys))
    for lab, s in summaries.items():
        cells = []
        for k in keys:
            v = s.get(k)
            cells.append(("-" if v is None else f"{v:.4g}").rjust(26))
        print(lab.ljust(28) + "".join(cells))


def parse_grid(items: Sequence[str]) -> list[tuple[str, list[str]]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError([f"grid entry '{item}' is not key=v1,v2,..."])
        key, vals = item.split("=", 1)
        values = [v for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError([f"grid entry '{key}' has no values"])
        grid.append((key.strip(), values))
    if not grid:
        raise ConfigError(["sweep grid is empty"])
    return grid


def _dispatch(cfgs: list[RunConfig], p_list, jobs: int) -> list[RunResult]:
    ps = p_list if isinstance(p_list, list) else [p_list] * len(cfgs)
    if jobs > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_job, zip(cfgs, ps)))
    return [run(c, p) for c, p in zip(cfgs, ps)]


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    combos = list(itertools.product(*[vals for _, vals in grid]))
    if len(combos) > args.max_runs:
        raise ConfigError([f"sweep of {len(combos)} runs exceeds --max-runs {args.max_runs}"])
    doc = load_config(args.config, args.preset, args.override)
    keys = [k for k, _ in grid]
    runs = []
    for combo in combos:
        d = apply_overrides(doc, [f"{k}={v}" for k, v in zip(keys, combo)])
        runs.append(resolve(d))
    results = _dispatch([c for _, c in runs], [p for p, _ in runs], args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + keys + ["step", "time", "mean_rate", "min_rate", "max_rate", "rate_spread",
                                     "rate_std", "fraction_below_mbl"])
        for i, (combo, (p, _), res) in enumerate(zip(combos, runs, results)):
            _emit_run(out / f"run_{i:03d}", res, p, args.format)
            rep = _metric_report(res, p)
            for k in range(len(rep.steps)):
                w.writerow([i, *combo, rep.steps[k], f"{rep.times[k]:.6g}", repr(rep.mean_rate[k]),
                            repr(rep.min_rate[k]), repr(rep.max_rate[k]),
                            repr(rep.max_rate[k] - rep.min_rate[k]), repr(rep.std_rate[k]),
                            repr(rep.fraction_below_mbl[k])])
    print(f"{len(combos)} runs written to {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fabricsim", description="Beaconing rate control simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="start from a built-in scenario")
        sp.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--format", nargs="+", choices=("csv", "json"), default=["csv", "json"])
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    common(sub.add_parser("run", help="simulate one configuration"))
    common(sub.add_parser("oracle", help="solve the centralized problem"))
    sp = sub.add_parser("compare", help="run several controllers on one scenario")
    common(sp)
    sp.add_argument("--controllers", nargs="+", required=True, metavar="KIND[:sync|async]")
    sp = sub.add_parser("sweep", help="cartesian parameter sweep")
    common(sp)
    sp.add_argument("--grid", nargs="+", default=[], metavar="KEY=V1,V2")
    sp.add_argument("--max-runs", type=int, default=200)
    return ap


COMMANDS = {"run": cmd_run, "oracle": cmd_oracle, "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
