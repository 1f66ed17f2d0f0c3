"""Config-driven experiment runner.

    expost <task> --config experiment.json [--out DIR] [--seed N] [--timings]

Tasks: verify, synthesize, optimize, revenue, benchmark. Exit status is 0 when
every verification passed, 1 when violations were found (reports are still
written) and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from expost import design, generators, mechanism as mc, revenue
from expost.errors import ConfigurationError, ExpostError
from expost.signals import SignalSpace, default_resolution, load_distribution, make_grid
from expost.values import TOL_V, check_value_regularity, load_value_model

log = logging.getLogger("expost")

TASKS = ("verify", "synthesize", "optimize", "revenue", "benchmark")
EXIT_OK, EXIT_VIOLATIONS, EXIT_CONFIG = 0, 1, 2


class Experiment:
    """A validated, fully resolved configuration plus the objects it names."""

    def __init__(self, config: dict, base_dir: Path):
        self.raw = copy.deepcopy(config)
        self.base_dir = base_dir
        cfg = self.resolved = self._resolve(config)
        self.space = SignalSpace(*cfg["space"])
        self.n = cfg["n_agents"]
        self.grid = make_grid(self.space, cfg["resolution"])
        self.model = load_value_model(cfg["model"], self.n, self.space)
        self.dist = load_distribution(cfg["distribution"], self.space, base_dir)
        self.params = cfg["params"]
        self.seed = cfg["seed"]

    @staticmethod
    def _resolve(config: dict) -> dict:
        if not isinstance(config, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg = copy.deepcopy(config)
        task = cfg.get("task")
        if task not in TASKS:
            raise ConfigurationError(f"task: expected one of {', '.join(TASKS)}, got {task!r}")
        n = cfg.get("n_agents")
        if not isinstance(n, int) or n < 1:
            raise ConfigurationError(f"n_agents: positive integer required, got {n!r}")
        space = cfg.setdefault("space", [0.0, 1.0])
        if not (isinstance(space, list) and len(space) == 2):
            raise ConfigurationError("space: expected [lower, upper]")
        res = cfg.setdefault("resolution", default_resolution(n))
        if not isinstance(res, int) or res < 2:
            raise ConfigurationError(f"resolution: integer >= 2 required, got {res!r}")
        for key in ("model", "distribution"):
            if not isinstance(cfg.get(key), dict):
                raise ConfigurationError(f"{key}: object required")
        cfg.setdefault("seed", 0)
        if not isinstance(cfg["seed"], int):
            raise ConfigurationError("seed: integer required")
        params = cfg.setdefault("params", {})
        params.setdefault("n_samples", revenue.DEFAULT_SAMPLES)
        params.setdefault("baseline", "binding-ir")
        cfg["tolerances"] = {"tol_q": mc.TOL_Q, "tol_ic": mc.TOL_IC, "tol_conv": mc.TOL_CONV, "tol_v": TOL_V}
        if "shares" in params:
            shares = params["shares"]
            if (not isinstance(shares, list) or len(shares) != n or any(x < 0 for x in shares)
                    or abs(sum(shares) - 1.0) > 1e-12):
                raise ConfigurationError(f"params.shares: {n} nonnegative shares summing to 1 required, got {shares!r}")
        return cfg

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- mechanism sources -------------------------------------------------
    def allocation(self, src) -> mc.AllocationRule:
        if isinstance(src, str):
            src = {"csv": src}
        if not isinstance(src, dict):
            raise ConfigurationError(f"allocation source must be a path or object, got {src!r}")
        if "csv" in src:
            rule = mc.AllocationRule.from_csv(self.path(src["csv"]))
            self._check_grid(rule.grid, src["csv"])
            return rule
        kind = src.get("rule")
        if kind == "efficient":
            return mc.efficient_rule(self.grid, self.n)
        if kind == "constant":
            shares = src.get("shares", [1.0 / self.n] * self.n)
            if len(shares) != self.n or sum(shares) > 1 + 1e-12:
                raise ConfigurationError("allocation.shares: one share per agent, total at most 1")
            return mc.constant_rule(self.grid, shares)
        if kind == "random-em":
            rng = np.random.default_rng(src.get("seed", self.seed))
            return generators.random_em_rule(self.model, self.grid, rng)
        raise ConfigurationError(f"allocation.rule: unknown rule {kind!r}")

    def _check_grid(self, grid, name):
        if grid.space != self.space:
            raise ConfigurationError(f"{name}: CSV grid spans [{grid.space.lower}, {grid.space.upper}], "
                                     f"config space is {self.resolved['space']}")

    def mechanism(self, src) -> mc.Mechanism:
        if isinstance(src, str):
            src = {"csv": src}
        if "csv" in src and src.get("kind", "mechanism") == "mechanism" and "payments" not in src:
            grid, tables = mc.read_table_csv(self.path(src["csv"]))
            self._check_grid(grid, src["csv"])
            if "p" in tables:
                return mc.Mechanism(mc.AllocationRule(grid, tables["q"]), mc.PaymentRule(grid, tables["p"]))
        if "design" in src:
            return self.design(src["design"], src)
        rule = self.allocation(src)
        if "payments" in src:
            pay = mc.PaymentRule.from_csv(self.path(src["payments"]))
            return mc.Mechanism(rule, pay)
        return mc.Mechanism(rule, mc.synthesize_payments(rule, self.model, src.get("baseline", self.params["baseline"])))

    def design(self, name: str, params: dict) -> mc.Mechanism:
        if name == "must_sell":
            shares = params.get("shares", [1.0 / self.n] * self.n)
            if self.model.kind != "max":
                raise ConfigurationError("params.design must_sell requires model.family 'max'")
            return design.optimal_max_must_sell(shares, self.dist, self.grid, self.model)
        if name == "additive":
            if self.model.kind != "additive":
                raise ConfigurationError("params.design additive requires model.family 'additive'")
            return design.optimal_additive(self.dist, self.model.weights, self.grid)
        if name == "strictly_increasing":
            return design.optimal_strictly_increasing(self.model, self.dist, self.grid)
        raise ConfigurationError(f"params.design: unknown design {name!r}")


# ---------------------------------------------------------------------------
# tasks; each returns (results, reports) and writes its tables into out


def _revenue_results(exp: Experiment, mech: mc.Mechanism) -> dict:
    out = {"monte_carlo": revenue.expected_revenue_mc(mech, exp.dist, exp.params["n_samples"], exp.seed).to_dict()}
    if mech.n_agents <= revenue.QUADRATURE_MAX_AGENTS:
        out["quadrature"] = revenue.expected_revenue_quadrature(mech, exp.dist).to_dict()
    return out


def _verify_all(exp: Experiment, mech: mc.Mechanism) -> list:
    return [mc.verify_epic(mech, exp.model), mc.verify_epir(mech, exp.model)]


def task_verify(exp: Experiment, out: Path):
    p = exp.params
    if "mechanism" in p:
        mech = exp.mechanism(p["mechanism"])
        rule = mech.allocation
    else:
        if "allocation" not in p:
            raise ConfigurationError("params.allocation (or params.mechanism) is required for verify")
        rule = exp.allocation(p["allocation"])
        mech = None
        if "payments" in p:
            pay = mc.PaymentRule.from_csv(exp.path(p["payments"]))
            mech = mc.Mechanism(rule, pay)
    reports = [_regularity_report(exp, rule.grid), mc.is_eventually_monotone(rule, exp.model)]
    if mech is not None:
        reports += [mc.weak_monotonicity_check(mech, exp.model)] + _verify_all(exp, mech)
    return {"eventually_monotone": reports[1].passed, "n_profiles": rule.grid.m ** rule.n_agents}, reports


def _regularity_report(exp: Experiment, grid) -> mc.VerificationReport:
    reg = check_value_regularity(exp.model, grid)
    rep = mc.VerificationReport("value-regularity", tolerance=reg.tolerance, grid_resolution=grid.m)
    for i, others, pts, defect in reg.convexity_violations + reg.monotonicity_violations:
        profile = [float(x) for x in others]
        profile.insert(i, float(pts[0]))
        rep.violations.append(mc.Violation(i, tuple(profile), float(pts[-1]), defect))
        rep.max_defect = max(rep.max_defect, defect)
    return rep


def task_synthesize(exp: Experiment, out: Path):
    p = exp.params
    rule = exp.allocation(p.get("allocation", {"rule": "efficient"}))
    em = mc.is_eventually_monotone(rule, exp.model)
    if not em.passed:
        return {"eventually_monotone": False}, [em]
    pay = mc.synthesize_payments(rule, exp.model, p["baseline"], check=False)
    mech = mc.Mechanism(rule, pay)
    mech.to_csv(out / "mechanism.csv")
    rule.to_csv(out / "allocation_heatmap.csv")
    return {"eventually_monotone": True, "revenue": _revenue_results(exp, mech)}, [em] + _verify_all(exp, mech)


def task_optimize(exp: Experiment, out: Path):
    p = exp.params
    name = p.get("design")
    if name is None:
        raise ConfigurationError("params.design is required for optimize")
    mech = exp.design(name, p)
    mech.to_csv(out / "mechanism.csv")
    mech.allocation.to_csv(out / "allocation_heatmap.csv")
    design.virtual_value_field(exp.model, exp.dist, exp.grid).to_csv(out / "virtual_values.csv")
    results = {
        "design": name,
        "revenue": _revenue_results(exp, mech),
        "revenue_objective": design.revenue_objective(mech, exp.model, exp.dist),
        "bbm_benchmark": revenue.bbm_benchmark(exp.dist, exp.n),
    }
    return results, _verify_all(exp, mech)


def task_revenue(exp: Experiment, out: Path):
    entries = exp.params.get("mechanisms")
    if not isinstance(entries, list):
        raise ConfigurationError("params.mechanisms: list of {label, source} required")
    mechs = []
    for k, e in enumerate(entries):
        if not isinstance(e, dict) or "label" not in e:
            raise ConfigurationError(f"params.mechanisms[{k}]: object with a label required")
        mechs.append((e["label"], exp.mechanism(e.get("source", e))))
    table = revenue.compare_mechanisms(mechs, exp.dist, exp.model, exp.params["n_samples"], exp.seed)
    table.to_csv(out / "comparison.csv")
    _dump({"config": exp.resolved, "rows": table.rows}, out / "comparison.json")
    reports = []
    for label, mech in mechs:
        for rep in _verify_all(exp, mech):
            rep.kind = f"{rep.kind}[{label}]"
            reports.append(rep)
    return {"comparison": table.rows}, reports


def task_benchmark(exp: Experiment, out: Path):
    results = {"bbm_benchmark": revenue.bbm_benchmark(exp.dist, exp.n)}
    if exp.n >= 2:
        results["order_statistics"] = revenue.order_statistic_decomposition(
            exp.dist, exp.n, exp.params["n_samples"], exp.seed)
    reports = []
    if exp.model.kind == "max":
        mech = design.optimal_max_must_sell([1.0 / exp.n] * exp.n, exp.dist, exp.grid, exp.model)
        results["equal_share_revenue"] = _revenue_results(exp, mech)
        reports = _verify_all(exp, mech)
    return results, reports


_RUNNERS = {"verify": task_verify, "synthesize": task_synthesize, "optimize": task_optimize,
            "revenue": task_revenue, "benchmark": task_benchmark}


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


def run_experiment(config: dict, out_dir=None, base_dir=None, record_timings: bool = False) -> int:
    """Run one task; returns the exit status and writes ``summary.json`` plus tables."""
    base_dir = Path(base_dir or ".")
    t0 = time.perf_counter()
    try:
        exp = Experiment(config, base_dir)
        out = Path(out_dir or exp.resolved.get("output_dir") or "expost-out")
        out.mkdir(parents=True, exist_ok=True)
        exp.resolved["output_dir"] = str(out)
        results, reports = _RUNNERS[exp.resolved["task"]](exp, out)
    except ExpostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for rep in reports:
        _dump({**rep.to_dict(), "config": exp.resolved},
              out / f"report_{rep.kind.replace('[', '_').replace(']', '')}.json")
        log.info(rep.summary())
    failed = [r for r in reports if not r.passed]
    summary = {
        "task": exp.resolved["task"],
        "config": exp.resolved,
        "results": results,
        "violations": {r.kind: {"count": len(r.violations), "max_defect": r.max_defect,
                                "tolerance": r.tolerance} for r in reports},
        "timings": {"total_seconds": time.perf_counter() - t0} if record_timings else None,
    }
    _dump(summary, out / "summary.json")
    return EXIT_VIOLATIONS if failed else EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="expost", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="task", required=True)
    for name in TASKS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--timings", action="store_true", help="record wall-clock timings in summary.json")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(config, dict):
        print("error: config must be a JSON object", file=sys.stderr)
        return EXIT_CONFIG
    if config.setdefault("task", args.task) != args.task:
        print(f"error: task: config declares {config['task']!r} but subcommand is {args.task!r}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        config["seed"] = args.seed
    return run_experiment(config, args.out, args.config.parent, args.timings)


if __name__ == "__main__":
    sys.exit(main())
