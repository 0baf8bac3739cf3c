"""Command-line interface.

Usage::

    agebranch model-info --preset trial
    agebranch simulate   --preset trial --seed 3 --out runs/sim
    agebranch estimate   --config run.yaml --out runs/est
    agebranch verify     --preset "constant b=0.4 m=2" --out runs/verify
    agebranch experiment --preset desk --threads 4 --out runs/desk

Every subcommand accepts ``--config FILE`` (YAML or JSON), ``--preset NAME``,
``--seed N``, ``--out DIR`` and ``--threads N``; the file schema is described
in :mod:`agebranch.config`.  Each run writes ``effective_config.yaml`` to its
output directory; passing that file back with ``--config`` repeats the run.

Exit codes: 0 success, 1 runtime failure or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import estimators as est
from .experiments import ExperimentConfig, check_report, default_threads, run_table, write_report
from .model import classify_regime, solve_malthus
from .offspring import offspring_from_spec
from .particle import coupling_tv, verify_mto_boundary, verify_mto_interior, verify_mto_pairs
from .rates import rate_from_spec
from .tree import extract_sample, read_tree_csv, simulate_forest, simulate_tree

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
PAIR_IDENTITIES = ("forks", "lineage", "alive_pairs")


def _model(cfg):
    rate = rate_from_spec(cfg["rate"])
    law = offspring_from_spec(cfg["offspring"])
    return rate, law, solve_malthus(rate, law)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# --------------------------------------------------------------------------
# subcommands


def cmd_model_info(cfg, args) -> int:
    rate, law, md = _model(cfg)
    diag = classify_regime(rate, law, md)
    _emit({
        "rate": rate.name,
        "offspring": {str(k): p for k, p in law.to_mapping().items()},
        **md.summary(),
        "regime": diag.regime,
        "varpi": diag.varpi,
        "smooth_class_member": diag.smooth_class_member,
    })
    return EXIT_OK


def cmd_simulate(cfg, args) -> int:
    rate, law, _ = _model(cfg)
    sec = cfg["simulate"]
    out = _out_dir(args)
    rng = np.random.default_rng(cfg["seed"])
    T, n = float(sec["T"]), int(sec["n_trees"])
    summary = []
    if n == 1:
        trees = [simulate_tree(rate, law, T, rng, cap=int(sec["cap"]))]
    else:
        forest = simulate_forest(rate, law, T, n, rng, cap=int(sec["cap"]))
        trees = [forest.tree(i) for i in range(n)]
    for i, tree in enumerate(trees):
        name = "tree.csv" if n == 1 else f"tree_{i:04d}.csv"
        tree.to_csv(out / name)
        s = extract_sample(tree)
        summary.append({"file": name, "n_interior": s.n_interior, "n_boundary": s.n_boundary})
    (out / "simulate.json").write_text(json.dumps({"T": T, "seed": cfg["seed"], "trees": summary}, indent=2))
    cfgmod.dump(cfg, out / "effective_config.yaml")
    _emit({"T": T, "n_trees": n, "nodes": sum(t.n_nodes for t in trees), "out": str(out)})
    return EXIT_OK


def cmd_estimate(cfg, args) -> int:
    rate, law, md = _model(cfg)
    sec = cfg["estimate"]
    out = _out_dir(args)
    T = float(sec["T"])
    if sec.get("input"):
        tree = read_tree_csv(sec["input"], T)
    else:
        tree = simulate_tree(rate, law, T, np.random.default_rng(cfg["seed"]))
    sample = extract_sample(tree)
    g = sec["grid"]
    grid = est.make_grid(float(g["start"]), float(g["stop"]), float(g["step"]))
    result = est.estimate_all(sample, sec["kernel"], sec["bandwidth"], grid, float(sec["beta"]))
    result.meta.update({"seed": cfg["seed"], "relative_error": result.error(rate), "lambda_B": md.lam})
    result.to_csv(out / "estimate.csv")
    result.to_json(out / "estimate.json")
    f_hat = est.estimate_fB_boundary(sample, result.m_hat, result.lambda_hat, sec["kernel"], result.h, grid)
    np.savetxt(out / "boundary_density.csv", np.c_[grid, f_hat], delimiter=",", header="x,f_hat", comments="")
    cfgmod.dump(cfg, out / "effective_config.yaml")
    _emit(result.metadata())
    return EXIT_OK


def default_horizon(md, target: float) -> float:
    """``T`` with ``(kappa_B + kappa'_B) e^{lam T}`` equal to ``target``."""
    return math.log(target / (md.kappa_boundary + md.kappa_interior)) / md.lam


def cmd_verify(cfg, args) -> int:
    rate, law, md = _model(cfg)
    sec = cfg["verify"]
    out = _out_dir(args)
    rng = np.random.default_rng(cfg["seed"])
    g = cfgmod.named_function(sec["g"])
    T = float(sec["T"]) if sec.get("T") else round(default_horizon(md, float(sec["target_population"])), 2)
    wanted = list(sec["identities"])
    unknown = set(wanted) - {"boundary", "interior", "coupling", *PAIR_IDENTITIES}
    if unknown:
        raise cfgmod.ConfigError(f"unknown identities: {sorted(unknown)}")
    sizes = dict(n_trees=int(sec["n_trees"]), n_paths=int(sec["n_paths"]))
    reports = []
    if "boundary" in wanted:
        reports.append(verify_mto_boundary(rate, law, g, T, rng=rng, md=md, **sizes))
    if "interior" in wanted:
        reports.append(verify_mto_interior(rate, law, g, T, rng=rng, md=md, n_nodes=int(sec["time_nodes"]), **sizes))
    if set(wanted) & set(PAIR_IDENTITIES):
        pairs = verify_mto_pairs(rate, law, g, T, rng=rng, md=md, n_nodes=int(sec["time_nodes"]), **sizes)
        reports.extend(r for r in pairs if r.identity in wanted)
    results = [json.loads(r.to_json()) | {"ok": r.ok} for r in reports]
    ok = all(r.ok for r in reports)
    if "coupling" in wanted:
        c = sec["coupling"]
        t_grid = np.linspace(0.0, float(c["t_max"]), int(c["points"]))
        res = coupling_tv(md.biased, float(c["x0"]), t_grid, int(c["n_pairs"]), rng,
                          start_sampler=md.invariant.sample)
        results.append({
            "identity": "coupling",
            "rho": res.rho,
            "t": res.t.tolist(),
            "frequency": res.frequency.tolist(),
            "se": res.se.tolist(),
            "bound": res.bound.tolist(),
            "ok": bool(res.ok.all()),
        })
        ok = ok and bool(res.ok.all())
    (out / "verify.json").write_text(json.dumps(results, indent=2))
    cfgmod.dump(cfg, out / "effective_config.yaml")
    for r in results:
        detail = f"z={r['z']:+.2f}" if "z" in r else f"rho={r['rho']:.4f}"
        print(f"{'PASS' if r['ok'] else 'FAIL'}  {r['identity']:<12} T={T:g}  {detail}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_experiment(cfg, args) -> int:
    econf = ExperimentConfig.from_dict({
        **cfg["experiment"],
        "rate": cfg["rate"],
        "offspring": cfg["offspring"],
        "seed": cfg["seed"],
    })
    out = _out_dir(args)
    threads = args.threads if args.threads else default_threads()
    report = run_table(econf, threads=threads)
    write_report(report, out)
    cfgmod.dump(cfg, out / "effective_config.yaml")
    checks = check_report(report)
    for s in report.summaries():
        print(f"T={s.T:g}  mean error {s.mean_error:.4f} (sd {s.std_error:.4f})  "
              f"mean |interior| {s.population['mean']:.0f}  failed {s.n_failed}")
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(p for _, p, _ in checks) else EXIT_RUNTIME


COMMANDS = {
    "model-info": cmd_model_info,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agebranch", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--preset", help="named preset, e.g. trial, desk, error-table, full, 'constant b=0.4 m=2'")
        p.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--threads", type=int, default=0, help="worker processes (default: all available CPUs)")
        p.add_argument("-v", "--verbose", action="store_true", help="print tracebacks on failure")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        cfg = cfgmod.resolve(args.preset, args.config, args.seed)
    except cfgmod.ConfigError as exc:
        print(f"agebranch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as exc:
        print(f"agebranch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # report, do not crash with a bare traceback
        print(json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
