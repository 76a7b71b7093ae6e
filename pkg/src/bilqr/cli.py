"""Command-line front end: run experiment matrices from a TOML file and tabulate aggregates.

    bilqr run CONFIG [--jobs N] [--out DIR] [--dry-run] [--seed S]
    bilqr table AGGREGATE_DIR
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

from .harness import (ESTIMATORS, METRICS, SOLVERS, AggregateResult, Disturbance, InsufficientDataError,
                      Scenario, ScenarioError, aggregate, check_pairing, run_cell)
from .models import AircraftParams, CartPoleParams
from .planner import PlannerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUT_ENV = "BILQR_OUT_DIR"
DEFAULT_OUT = "results"
DEFAULT_MAX_FAILURE_RATE = 0.05
EPISODE_HEADER = ("t", "solver", "scenario", "seed", "trace", "loglik", "reward")
AGGREGATE_FILE = "aggregate.json"
TABLE_FILE = "table.csv"

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

_RUN_KEYS = {"out", "jobs", "seed", "max_failure_rate"}
_TOP_KEYS = {"run", "planner", "model_params", "scenario"}
_SCENARIO_KEYS = {
    "name", "model", "observability", "task", "episode_len", "n_sims", "seed", "pairs",
    "prior_theta_mean", "prior_theta_var", "prior_theta_jitter", "prior_state_var", "x0",
    "W_x", "W_theta", "V", "full_obs_eps", "disturbance", "planner", "model_params",
}
_DISTURBANCE_KEYS = {"t_c", "theta_new"}
_PLANNER_KEYS = {f.name for f in dataclasses.fields(PlannerConfig)}
_MODEL_PARAM_KEYS = {
    "cartpole": {f.name for f in dataclasses.fields(CartPoleParams)},
    "aircraft": {f.name for f in dataclasses.fields(AircraftParams)},
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key and line when known."""


@dataclass(frozen=True)
class CellSpec:
    scenario: Scenario
    solver: str
    estimator: str

    @property
    def label(self) -> str:
        return f"{self.solver}+{self.estimator}"


@dataclass(frozen=True)
class RunConfig:
    scenarios: tuple
    pairs: dict          # scenario name -> tuple of (solver, estimator)
    out: Path
    jobs: int = 1
    max_failure_rate: float = DEFAULT_MAX_FAILURE_RATE

    def cells(self):
        for sc in self.scenarios:
            for solver, est in self.pairs[sc.name]:
                yield CellSpec(sc, solver, est)


# ---------------------------------------------------------------------------
# config parsing

def _key_line(text: str, key: str, after: int = 0):
    pat = re.compile(rf'^\s*(?:\[+\s*)?(?:[\w."]*\.)?"?{re.escape(key)}"?\s*(?:=|\]|\.)')
    for i, line in enumerate(text.splitlines()[after:], start=after + 1):
        if pat.match(line):
            return i
    return None


def _scenario_lines(text: str):
    return [i for i, line in enumerate(text.splitlines()) if re.match(r"^\s*\[\[\s*scenario\s*\]\]", line)]


class _Reporter:
    def __init__(self, text: str, path: str):
        self.text, self.path = text, path
        self.starts = _scenario_lines(text)

    def error(self, where: str, key: str, msg: str, scenario: int | None = None) -> ConfigError:
        after = self.starts[scenario] if scenario is not None and scenario < len(self.starts) else 0
        line = _key_line(self.text, key, after)
        loc = f"{self.path}:{line}" if line else self.path
        return ConfigError(f"{loc}: {where}{key}: {msg}")

    def check_keys(self, table: dict, allowed: set, where: str, scenario: int | None = None):
        for key in table:
            if key not in allowed:
                raise self.error(where, key, "unknown key", scenario)


def _parse_pair(text: str):
    solver, sep, est = str(text).partition("+")
    if not sep:
        est = "ekf"
    return solver.strip(), est.strip()


def parse_config(text: str, path: str = "<config>", out: str | None = None, seed: int | None = None,
                 jobs: int | None = None) -> RunConfig:
    """Validate a TOML run description; command-line values take precedence over the [run] table."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    rep = _Reporter(text, path)
    rep.check_keys(raw, _TOP_KEYS, "")
    run = raw.get("run", {})
    rep.check_keys(run, _RUN_KEYS, "run.")
    g_planner = raw.get("planner", {})
    rep.check_keys(g_planner, _PLANNER_KEYS, "planner.")
    g_params = raw.get("model_params", {})
    rep.check_keys(g_params, set(_MODEL_PARAM_KEYS), "model_params.")
    for model, table in g_params.items():
        rep.check_keys(table, _MODEL_PARAM_KEYS[model], f"model_params.{model}.")

    blocks = raw.get("scenario", [])
    if not blocks:
        raise ConfigError(f"{path}: at least one [[scenario]] block is required")
    scenarios, pairs, seen = [], {}, set()
    for i, block in enumerate(blocks):
        where = f"scenario[{i}]."
        rep.check_keys(block, _SCENARIO_KEYS, where, i)
        if "name" not in block:
            raise ConfigError(f"{path}: {where}name: missing")
        name = str(block["name"])
        if name in seen:
            raise rep.error(where, "name", f"duplicate scenario name {name!r}", i)
        seen.add(name)
        planner = dict(g_planner)
        sc_planner = block.get("planner", {})
        rep.check_keys(sc_planner, _PLANNER_KEYS, where + "planner.", i)
        planner.update(sc_planner)
        model = block.get("model", "cartpole")
        if model not in _MODEL_PARAM_KEYS:
            raise rep.error(where, "model", f"unknown model {model!r}", i)
        params = dict(g_params.get(model, {}))
        sc_params = block.get("model_params", {})
        rep.check_keys(sc_params, _MODEL_PARAM_KEYS[model], where + "model_params.", i)
        params.update(sc_params)
        dist = block.get("disturbance")
        if dist is not None:
            rep.check_keys(dist, _DISTURBANCE_KEYS, where + "disturbance.", i)
            try:
                dist = Disturbance(int(dist["t_c"]), tuple(float(v) for v in _as_list(dist["theta_new"])))
            except KeyError as exc:
                raise rep.error(where + "disturbance.", exc.args[0], "missing", i) from None
        kw = {k: v for k, v in block.items() if k not in ("pairs", "planner", "model_params", "disturbance")}
        for key in ("x0", "prior_theta_mean"):
            if key in kw:
                kw[key] = tuple(float(v) for v in _as_list(kw[key]))
        if seed is not None:
            kw["seed"] = seed
        elif "seed" in run and "seed" not in block:
            kw["seed"] = run["seed"]
        try:
            sc = Scenario(planner=planner, model_params=params, disturbance=dist, **kw)
            # build once so bad overrides fail at parse time
            sc.planner_config(sc.build_model())
        except (ScenarioError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: {where[:-1]} ({name}): {exc}") from exc
        cell_pairs = []
        for text_pair in block.get("pairs", ["bilqr+ekf"]):
            solver, est = _parse_pair(text_pair)
            if solver not in SOLVERS:
                raise rep.error(where, "pairs", f"unknown solver {solver!r}; expected one of {SOLVERS}", i)
            if est not in ESTIMATORS:
                raise rep.error(where, "pairs", f"unknown estimator {est!r}; expected one of {ESTIMATORS}", i)
            try:
                check_pairing(sc, solver, est)
            except ScenarioError as exc:
                raise rep.error(where, "pairs", str(exc), i) from exc
            if (solver, est) in cell_pairs:
                raise rep.error(where, "pairs", f"duplicate pairing {solver}+{est}", i)
            cell_pairs.append((solver, est))
        scenarios.append(sc)
        pairs[name] = tuple(cell_pairs)

    out_dir = out or run.get("out") or os.environ.get(OUT_ENV) or DEFAULT_OUT
    n_jobs = jobs if jobs is not None else int(run.get("jobs", 1))
    if n_jobs < 1:
        raise ConfigError(f"{path}: jobs must be at least 1")
    rate = float(run.get("max_failure_rate", DEFAULT_MAX_FAILURE_RATE))
    if not 0 <= rate <= 1:
        raise rep.error("run.", "max_failure_rate", "must lie in [0, 1]")
    return RunConfig(tuple(scenarios), pairs, Path(out_dir), n_jobs, rate)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def load_config(path, **kw) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), **kw)


# ---------------------------------------------------------------------------
# output formats

def _num(v: float) -> str:
    return repr(float(v))


def episode_csv(record) -> str:
    """Per-step metrics of one episode; ``seed`` is the episode index under the scenario's base seed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_HEADER)
    label = f"{record.solver}+{record.estimator}"
    for m in record.metrics:
        w.writerow([m.t, label, record.scenario, record.episode,
                    _num(m.trace_param_cov), _num(m.log_lik_true_param), _num(m.stage_reward)])
    return buf.getvalue()


def _finite_or_none(v):
    return float(v) if v is not None and math.isfinite(v) else None


def aggregate_json(scenario: Scenario, cells: list) -> str:
    """Deterministic JSON summary of one scenario.

    ``cells`` holds (solver, estimator, n_total, AggregateResult), or the failed
    count in place of the aggregate when too few episodes succeeded.
    """
    rows = []
    for solver, est, n_total, agg in cells:
        row = {"solver": solver, "estimator": est, "n_sims": n_total}
        if isinstance(agg, AggregateResult):
            row.update(n=agg.n, n_failed=agg.n_failed,
                       mean={k: _finite_or_none(agg.mean[k]) for k in METRICS},
                       se={k: _finite_or_none(agg.se[k]) for k in METRICS})
        else:
            row.update(n=n_total - agg, n_failed=agg, mean=None, se=None)
        rows.append(row)
    doc = {"scenario": scenario.name, "model": scenario.model, "observability": scenario.observability,
           "task": scenario.task, "seed": scenario.seed, "episode_len": scenario.episode_len, "cells": rows}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def format_pm(mean: float, se: float) -> str:
    """'mean ± se' with at least three decimals, enough to show one significant digit of se."""
    if mean is None or se is None:
        return "nan ± nan"
    d = 3
    if se > 0 and math.isfinite(se):
        d = max(3, -math.floor(math.log10(se)))
    if d > 6:
        return f"{mean:.3g} ± {se:.2g}"
    return f"{mean:.{d}f} ± {se:.{d}f}"


def solver_label(solver: str, estimator: str) -> str:
    # the belief planner always filters with the EKF, so its estimator is implied
    return solver if (solver, estimator) == ("bilqr", "ekf") else f"{solver}+{estimator}"


def emit_table(aggregates, metrics=METRICS) -> str:
    """One row per solver, each metric as 'mean ± SE'. Accepts AggregateResult objects or aggregate-file rows."""
    buf = io.StringIO()
    buf.write(", ".join(("solver",) + tuple(metrics)) + "\n")
    for agg in aggregates:
        if isinstance(agg, AggregateResult):
            solver, est, mean, se = agg.solver, agg.estimator, agg.mean, agg.se
        else:
            solver, est, mean, se = agg["solver"], agg["estimator"], agg["mean"] or {}, agg["se"] or {}
        cols = [format_pm(mean.get(k), se.get(k)) for k in metrics]
        buf.write(", ".join([solver_label(solver, est)] + cols) + "\n")
    return buf.getvalue()


def parse_table(text: str) -> dict:
    """Inverse of emit_table: {solver label: {metric: (mean, se)}}."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return {}
    header = [h.strip() for h in lines[0].split(",")]
    out = {}
    for ln in lines[1:]:
        parts = [p.strip() for p in ln.split(",")]
        row = {}
        for key, cell in zip(header[1:], parts[1:]):
            m, s = cell.split("±")
            row[key] = (float(m), float(s))
        out[parts[0]] = row
    return out


# ---------------------------------------------------------------------------
# commands

def describe_matrix(cfg: RunConfig) -> str:
    lines = []
    for cell in cfg.cells():
        sc = cell.scenario
        lines.append(f"{sc.name}  {cell.label}  model={sc.model} obs={sc.observability} task={sc.task} "
                     f"n_sims={sc.n_sims} episode_len={sc.episode_len} seed={sc.seed}")
    lines.append(f"out={cfg.out} jobs={cfg.jobs} max_failure_rate={cfg.max_failure_rate}")
    return "\n".join(lines) + "\n"


def execute(cfg: RunConfig) -> int:
    """Run every cell, write episode CSVs and one aggregate per scenario; returns the exit status."""
    status = EXIT_OK
    for sc in cfg.scenarios:
        sc_dir = cfg.out / sc.name
        ep_dir = sc_dir / "episodes"
        ep_dir.mkdir(parents=True, exist_ok=True)
        cells = []
        for solver, est in cfg.pairs[sc.name]:
            log.info("running %s %s+%s (%d episodes)", sc.name, solver, est, sc.n_sims)
            records = run_cell(sc, solver, est, jobs=cfg.jobs)
            for r in records:
                (ep_dir / f"{solver}+{est}_{r.episode:04d}.csv").write_text(episode_csv(r), encoding="utf-8")
            n_failed = sum(r.failed for r in records)
            try:
                agg = aggregate(records)
            except InsufficientDataError as exc:
                log.error("%s %s+%s: %s", sc.name, solver, est, exc)
                agg = n_failed
                status = EXIT_FAILURE
            if n_failed / len(records) > cfg.max_failure_rate:
                log.error("%s %s+%s: %d of %d episodes failed", sc.name, solver, est, n_failed, len(records))
                status = EXIT_FAILURE
            cells.append((solver, est, len(records), agg))
        (sc_dir / AGGREGATE_FILE).write_text(aggregate_json(sc, cells), encoding="utf-8")
    return status


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        sys.stdout.write(describe_matrix(cfg))
        return EXIT_OK
    try:
        return execute(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def cmd_table(args) -> int:
    root = Path(args.aggregate_dir)
    files = [root] if root.is_file() else sorted(root.rglob(AGGREGATE_FILE))
    if not files:
        print(f"error: no {AGGREGATE_FILE} under {root}", file=sys.stderr)
        return EXIT_FAILURE
    for f in files:
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
            table = emit_table(doc["cells"])
            (f.parent / TABLE_FILE).write_text(table, encoding="utf-8")
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {f}: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        sys.stdout.write(f"# {doc['scenario']}\n{table}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilqr", description="Belief-space iLQR experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment matrix of a TOML config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=None, help="parallel episode workers")
    r.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--dry-run", action="store_true", help="print the resolved matrix and exit")
    r.add_argument("--seed", type=int, default=None, help="override every scenario's base seed")
    r.set_defaults(func=cmd_run)
    t = sub.add_parser("table", help="render aggregate files as mean ± SE tables")
    t.add_argument("aggregate_dir")
    t.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
