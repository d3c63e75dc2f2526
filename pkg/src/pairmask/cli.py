"""Command-line front door: plan / audit / simulate / sweep / selftest.

Configs are JSON with a fixed schema (unknown keys are rejected with their
location).  Flags override file values.  Exit codes: 0 ok, 1 config error,
2 planner infeasible, 3 privacy audit failure, 4 simulation divergence.
All output is deterministic for a given config and seed (no timestamps).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    compose_over_rounds,
    covariance_from_counts,
    monte_carlo_tail_check,
    privacy_loss_moments,
    RealizationCounts,
    worst_case_audit,
)
from .masking import aggregate, mask_update
from .noise import master_seed_from_int, pairwise_noise
from .params import DPBudget, NoisePlan, StragglerDistribution, ThreatModel
from .planner import (
    BASELINE_SCHEMES,
    PlannerInfeasibleError,
    baseline_variances,
    optimal_variances,
)
from .sim import (
    TrainingConfig,
    TrainingDivergedError,
    make_logistic_task,
    make_quadratic_task,
    run_training,
    trace_to_csv,
    training_summary,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_AUDIT_FAIL = 3
EXIT_DIVERGED = 4

PAIRMASK_SCHEME = "pairmask"
ALL_SCHEMES = (PAIRMASK_SCHEME,) + BASELINE_SCHEMES


class ConfigError(ValueError):
    def __init__(self, location: str, message: str):
        super().__init__(f"config error at '{location}': {message}")
        self.location = location


# ---------------------------------------------------------------------------
# schema

_NUM = (int, float)

_SCHEMAS: dict[str, dict] = {
    "threat": {
        "n_clients": int,
        "max_colluders": int,
        "max_stragglers": int,
        "straggler_probs": list,
    },
    "budget": {"epsilon": _NUM, "delta": _NUM, "sensitivity": _NUM, "rounds": int},
    "noise": {"sigma_pair": _NUM, "sigma_indiv": _NUM},
    "task": {
        "kind": str,
        "dim": int,
        "samples_per_client": int,
        "heterogeneity": _NUM,
        "eig_min": _NUM,
        "eig_max": _NUM,
        "optimum_scale": _NUM,
        "l2_reg": _NUM,
        "data_seed": int,
    },
    "training": {
        "rounds": int,
        "epochs": int,
        "learning_rate": _NUM,
        "batch_size": int,
        "clip_bound": _NUM,
    },
    "sweep": {
        "epsilon": list,
        "max_colluders": list,
        "max_stragglers": list,
        "seeds": list,
        "schemes": list,
    },
}

_COMMAND_SECTIONS: dict[str, dict[str, bool]] = {
    # section -> required?
    "plan": {"threat": True, "budget": True},
    "audit": {"threat": True, "budget": True, "noise": False, "compose": False},
    "simulate": {
        "threat": True, "budget": True, "task": True, "training": True,
        "scheme": False, "seed": False, "compose": False,
    },
    "sweep": {
        "threat": True, "budget": True, "task": True, "training": True,
        "sweep": True, "compose": False,
    },
}


def _check_section(name: str, value, where: str) -> None:
    if name in ("scheme",):
        if not isinstance(value, str):
            raise ConfigError(where, "expected a string")
        if value not in ALL_SCHEMES:
            raise ConfigError(where, f"unknown scheme {value!r}; choose from {ALL_SCHEMES}")
        return
    if name in ("seed",):
        if not isinstance(value, int) or value < 0:
            raise ConfigError(where, "expected a nonnegative integer")
        return
    if name in ("compose",):
        if not isinstance(value, bool):
            raise ConfigError(where, "expected a boolean")
        return
    schema = _SCHEMAS[name]
    if not isinstance(value, dict):
        raise ConfigError(where, "expected an object")
    for key, item in value.items():
        if key not in schema:
            raise ConfigError(f"{where}.{key}", "unknown key")
        want = schema[key]
        if want is int:
            ok = isinstance(item, int) and not isinstance(item, bool)
        elif want is _NUM:
            ok = isinstance(item, _NUM) and not isinstance(item, bool)
        else:
            ok = isinstance(item, want)
        if not ok:
            raise ConfigError(
                f"{where}.{key}",
                f"expected {getattr(want, '__name__', 'number')}, got {type(item).__name__}",
            )


def validate_config(command: str, cfg: dict) -> dict:
    sections = _COMMAND_SECTIONS[command]
    if not isinstance(cfg, dict):
        raise ConfigError("$", "top level must be an object")
    for key, value in cfg.items():
        if key not in sections:
            raise ConfigError(key, f"unknown key for command '{command}'")
        _check_section(key, value, key)
    for key, required in sections.items():
        if required and key not in cfg:
            raise ConfigError(key, "required section missing")
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from exc


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config -> domain objects


def _threat_from(cfg: dict) -> ThreatModel:
    t = cfg["threat"]
    try:
        dist = None
        if "straggler_probs" in t:
            dist = StragglerDistribution(probs=tuple(float(p) for p in t["straggler_probs"]))
        return ThreatModel(
            n_clients=t["n_clients"],
            max_colluders=t["max_colluders"],
            max_stragglers=t["max_stragglers"],
            straggler_dist=dist,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError("threat", f"incomplete threat model: {exc}") from exc
    except ValueError as exc:
        raise ConfigError("threat", str(exc)) from exc


def _budget_from(cfg: dict) -> DPBudget:
    b = cfg["budget"]
    try:
        return DPBudget(
            epsilon=float(b["epsilon"]),
            delta=float(b["delta"]),
            sensitivity=float(b["sensitivity"]),
            rounds=int(b.get("rounds", 1)),
        )
    except KeyError as exc:
        raise ConfigError("budget", f"missing key {exc}") from exc
    except ValueError as exc:
        raise ConfigError("budget", str(exc)) from exc


def _plan_for_scheme(scheme: str, threat: ThreatModel, budget: DPBudget) -> NoisePlan:
    if scheme == PAIRMASK_SCHEME:
        return optimal_variances(threat, budget).plan
    return baseline_variances(threat, budget, scheme)


def _task_from(cfg: dict, threat: ThreatModel):
    t = dict(cfg["task"])
    kind = t.pop("kind", "quadratic")
    common = {
        "n_clients": threat.n_clients,
        "dim": t.pop("dim", 20),
        "samples_per_client": t.pop("samples_per_client", 32),
        "heterogeneity": t.pop("heterogeneity", 0.5),
        "data_seed": t.pop("data_seed", 0),
    }
    if kind == "quadratic":
        return make_quadratic_task(
            **common,
            eig_min=t.pop("eig_min", 0.1),
            eig_max=t.pop("eig_max", 1.0),
            optimum_scale=t.pop("optimum_scale", 1.0),
        )
    if kind == "logistic":
        for key in ("eig_min", "eig_max", "optimum_scale"):
            t.pop(key, None)
        return make_logistic_task(**common, l2_reg=t.pop("l2_reg", 0.1))
    raise ConfigError("task.kind", f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    cfg = validate_config("plan", load_config(args.config))
    threat = _threat_from(cfg)
    budget = _budget_from(cfg)
    try:
        sol = optimal_variances(threat, budget)
    except PlannerInfeasibleError as exc:
        print(f"planner infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report = worst_case_audit(threat, sol.plan, budget)
    out = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "sigma_pair": sol.plan.sigma_pair,
        "sigma_indiv": sol.plan.sigma_indiv,
        "variance_ratio": sol.variance_ratio,
        "expected_straggler_ratio": sol.mu,
        "quartic_coeffs": list(sol.quartic.coeffs),
        "objective": sol.objective,
        "constraint_residual": sol.constraint_residual,
        "audit_min_margin": report.min_margin,
        "audit_binding": {
            "colluders": report.binding.colluders,
            "stragglers": report.binding.stragglers,
            "overlap": report.binding.overlap,
        },
        "audit_passed": report.passed,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_AUDIT_FAIL


def cmd_audit(args) -> int:
    cfg = validate_config("audit", load_config(args.config))
    threat = _threat_from(cfg)
    budget = _budget_from(cfg)
    if "noise" in cfg:
        n = cfg["noise"]
        try:
            plan = NoisePlan(
                sigma_pair=float(n.get("sigma_pair", 0.0)),
                sigma_indiv=float(n.get("sigma_indiv", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError("noise", str(exc)) from exc
    else:
        try:
            plan = optimal_variances(threat, budget).plan
        except PlannerInfeasibleError as exc:
            print(f"planner infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
    if cfg.get("compose", False):
        plan = compose_over_rounds(plan, budget.rounds)
        report = worst_case_audit(threat, plan, budget, per_round=False)
    else:
        report = worst_case_audit(threat, plan, budget, per_round=True)
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_AUDIT_FAIL


def _training_config(cfg: dict, plan: NoisePlan, threat: ThreatModel, seed: int) -> TrainingConfig:
    tr = cfg["training"]
    try:
        return TrainingConfig(
            n_clients=threat.n_clients,
            rounds=int(tr["rounds"]),
            plan=plan,
            clip_bound=float(tr.get("clip_bound", 0.5)),
            master_seed=master_seed_from_int(seed),
            epochs=int(tr.get("epochs", 1)),
            lr=float(tr.get("learning_rate", 0.05)),
            batch_size=int(tr.get("batch_size", 32)),
            straggler_dist=threat.dist() if threat.max_stragglers > 0 else None,
        )
    except KeyError as exc:
        raise ConfigError("training", f"missing key {exc}") from exc
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from exc


def cmd_simulate(args) -> int:
    cfg = validate_config("simulate", load_config(args.config))
    threat = _threat_from(cfg)
    budget = _budget_from(cfg)
    scheme = cfg.get("scheme", PAIRMASK_SCHEME)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    try:
        plan = _plan_for_scheme(scheme, threat, budget)
    except PlannerInfeasibleError as exc:
        print(f"planner infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if cfg.get("compose", True):
        plan = compose_over_rounds(plan, budget.rounds)
    if scheme == PAIRMASK_SCHEME:
        report = worst_case_audit(threat, plan, budget, per_round=not cfg.get("compose", True))
        if not report.passed:
            print(
                f"warning: plan fails the worst-case audit "
                f"(min margin {report.min_margin:+.3g}); simulating anyway",
                file=sys.stderr,
            )
    task = _task_from(cfg, threat)
    config = _training_config(cfg, plan, threat, seed)
    try:
        trace = run_training(config, task)
    except TrainingDivergedError as exc:
        print(f"simulation diverged at round {exc.round_index}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{scheme}_seed{seed}"
    trace_to_csv(trace, out_dir / f"{stem}.csv")
    summary = training_summary(trace)
    summary.update(
        {
            "version": __version__,
            "config_hash": config_hash(cfg),
            "scheme": scheme,
            "seed": seed,
            "sigma_pair": plan.sigma_pair,
            "sigma_indiv": plan.sigma_indiv,
        }
    )
    with open(out_dir / f"{stem}_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps({"final_gap": trace.final_gap, "out": str(out_dir / f"{stem}.csv")}))
    return EXIT_OK


def _cell_name(scheme: str, eps: float, cbar: int, sbar: int, seed: int) -> str:
    return f"{scheme}_eps{eps:g}_cbar{cbar}_sbar{sbar}_seed{seed}"


def _run_sweep_cell(payload: dict) -> dict:
    """One sweep cell; module-level so worker pools can pickle it."""
    cfg = payload["cfg"]
    scheme, eps, cbar, sbar, seed = (
        payload["scheme"], payload["eps"], payload["cbar"], payload["sbar"], payload["seed"],
    )
    base_threat = _threat_from(cfg)
    threat = ThreatModel(
        n_clients=base_threat.n_clients,
        max_colluders=cbar,
        max_stragglers=sbar,
    )
    b = cfg["budget"]
    budget = DPBudget(
        epsilon=float(eps),
        delta=float(b["delta"]),
        sensitivity=float(b["sensitivity"]),
        rounds=int(b.get("rounds", 1)),
    )
    row = {
        "scheme": scheme, "epsilon": float(eps), "max_colluders": cbar,
        "max_stragglers": sbar, "seed": seed,
        "cell": _cell_name(scheme, eps, cbar, sbar, seed),
        "config_hash": payload["hash"],
    }
    try:
        plan = _plan_for_scheme(scheme, threat, budget)
    except PlannerInfeasibleError as exc:
        row.update(status="infeasible", error=str(exc))
        return row
    if cfg.get("compose", True):
        plan = compose_over_rounds(plan, budget.rounds)
    task = _task_from(cfg, threat)
    config = _training_config(cfg, plan, threat, seed)
    try:
        trace = run_training(config, task)
    except TrainingDivergedError as exc:
        row.update(status="diverged", error=str(exc), diverged_round=exc.round_index)
        return row
    if payload["out"] is not None:
        trace_to_csv(trace, Path(payload["out"]) / (row["cell"] + ".csv"))
    row.update(
        status="ok",
        final_gap=trace.final_gap,
        initial_gap=trace.initial_gap,
        mean_stragglers=float(trace.straggler_counts.mean()),
        sigma_pair=plan.sigma_pair,
        sigma_indiv=plan.sigma_indiv,
    )
    return row


def cmd_sweep(args) -> int:
    cfg = validate_config("sweep", load_config(args.config))
    threat = _threat_from(cfg)  # validates the base threat section
    del threat
    _budget_from(cfg)
    sw = cfg["sweep"]
    eps_axis = [float(e) for e in sw.get("epsilon", [cfg["budget"]["epsilon"]])]
    cbar_axis = [int(c) for c in sw.get("max_colluders", [cfg["threat"]["max_colluders"]])]
    sbar_axis = [int(s) for s in sw.get("max_stragglers", [cfg["threat"]["max_stragglers"]])]
    seeds = [int(s) for s in sw.get("seeds", [0])]
    schemes = [str(s) for s in sw.get("schemes", [PAIRMASK_SCHEME])]
    for s in schemes:
        if s not in ALL_SCHEMES:
            raise ConfigError("sweep.schemes", f"unknown scheme {s!r}")
    if not (eps_axis and cbar_axis and sbar_axis and seeds and schemes):
        raise ConfigError("sweep", "sweep axes must be nonempty")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    payloads = [
        {"cfg": cfg, "scheme": sch, "eps": e, "cbar": c, "sbar": s, "seed": sd,
         "out": str(out_dir), "hash": h}
        for sch, e, c, s, sd in product(schemes, eps_axis, cbar_axis, sbar_axis, seeds)
    ]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_run_sweep_cell, payloads))
    else:
        rows = [_run_sweep_cell(p) for p in payloads]
    rows.sort(key=lambda r: r["cell"])
    fields = [
        "cell", "scheme", "epsilon", "max_colluders", "max_stragglers", "seed",
        "status", "final_gap", "initial_gap", "mean_stragglers",
        "sigma_pair", "sigma_indiv", "config_hash",
    ]
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(fields) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(f, "")) for f in fields) + "\n")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"version": __version__, "config_hash": h, "cells": rows},
                  fh, indent=2, sort_keys=True)
    bad = [r for r in rows if r["status"] != "ok"]
    print(json.dumps({"cells": len(rows), "failed": len(bad), "out": str(out_dir)}))
    return EXIT_DIVERGED if bad else EXIT_OK


def cmd_selftest(args) -> int:
    """Scaled-down Monte Carlo validation of the core distributional claims."""
    samples = args.samples
    rng_seed = args.seed if args.seed is not None else 0
    master = master_seed_from_int(rng_seed)
    failures = []

    def check(name: str, ok: bool, detail: str) -> None:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures.append(name)

    # pair symmetry and determinism
    a = pairwise_noise(master, 3, 7, round_index=5, dim=16, sigma=1.0)
    b = pairwise_noise(master, 7, 3, round_index=5, dim=16, sigma=1.0)
    check("pair-symmetry", bool(np.array_equal(a, b)), "masks bit-identical across the pair")

    # full-cancellation residual
    n, dim = 8, 8
    plan = NoisePlan(sigma_pair=1.0, sigma_indiv=0.0)
    params = {i: np.zeros(dim) for i in range(n)}
    masked = {i: mask_update(params[i], i, 0, plan, n, master) for i in range(n)}
    resid = float(np.abs(aggregate(masked)).max())
    check("mask-cancellation", resid <= 1e-9, f"residual {resid:.2e} <= 1e-9")

    # covariance of the unrevealed disturbances (small case, 3 SE)
    counts = RealizationCounts(n_clients=5, colluders=1, stragglers=1, overlap=0)
    plan2 = NoisePlan(sigma_pair=0.8, sigma_indiv=1.1)
    cov = covariance_from_counts(counts, plan2)
    rng = np.random.default_rng(rng_seed)
    live = [0, 1, 2, 3]  # three honest online + one honest straggler
    pairs = [(i, j) for k, i in enumerate(live) for j in live[k + 1:]]
    draws = rng.normal(0.0, plan2.sigma_pair, (samples, len(pairs)))
    indiv = rng.normal(0.0, plan2.sigma_indiv, (samples, 3))
    m = np.zeros((samples, 3))
    for col, i in enumerate(live[:3]):
        for p, (x, y) in enumerate(pairs):
            if x == i:
                m[:, col] += draws[:, p]
            elif y == i:
                m[:, col] -= draws[:, p]
        m[:, col] += indiv[:, col]
    emp = np.cov(m.T)
    se = np.sqrt(
        (np.outer(np.diag(cov.matrix), np.diag(cov.matrix)) + cov.matrix ** 2) / samples
    )
    ok = bool(np.all(np.abs(emp - cov.matrix) <= 3.0 * se))
    check("disturbance-covariance", ok, f"entrywise within 3 SE at {samples} samples")

    # privacy-loss moments under the per-coordinate independence treatment
    mean, var = privacy_loss_moments(cov, 0, v_norm=1.0)
    sds = np.sqrt(np.diag(cov.matrix))
    x = rng.standard_normal((samples, cov.size)) * sds
    loss = x @ cov.inverse[0] + 0.5 * cov.inverse[0, 0]
    tol_mean = 4.0 * math.sqrt(var / samples)
    ok = abs(float(loss.mean()) - mean) <= tol_mean
    check("loss-moments", ok, f"mean {loss.mean():.5f} vs {mean:.5f} (tol {tol_mean:.5f})")

    # loose-budget tail
    budget = DPBudget(epsilon=1.0, delta=0.05, sensitivity=1.0)
    stats = float(np.max(np.einsum("ij,j->i", cov.inverse ** 2, np.diag(cov.matrix))))
    # the statistic scales inversely with the variances
    scale = stats * budget.sigma_floor() ** 2
    cov_eq = covariance_from_counts(counts, plan2.with_variance_scale(scale))
    tail = monte_carlo_tail_check(cov_eq, 0, budget, n_samples=samples, seed=rng_seed)
    check(
        "dp-tail",
        tail.passed,
        f"empirical {tail.empirical:.4f} <= {budget.delta} + 3*SE "
        f"(analytic {tail.analytic:.4f})",
    )

    print(f"selftest: {len(failures)} failure(s)")
    return EXIT_OK if not failures else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairmask",
        description="noise planning, privacy auditing and training simulation "
        "for pairwise-masked federated averaging",
    )
    parser.add_argument("--version", action="version", version=f"pairmask {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo sample budget")
        p.add_argument("--parallel", type=int, default=1, help="worker pool size for sweeps")

    for name, fn in (
        ("plan", cmd_plan),
        ("audit", cmd_audit),
        ("simulate", cmd_simulate),
        ("sweep", cmd_sweep),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("selftest")
    common(p, needs_config=False)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
