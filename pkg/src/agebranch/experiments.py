"""Monte-Carlo experiments: error tables, rate regression, bands, bias checks.

A run simulates ``replicates`` independent trees at every horizon, estimates
the division rate on each, and folds the results into an
:class:`ExperimentReport`.  Replicate ``r`` at horizon ``T`` draws from its own
stream ``SeedSequence(seed, spawn_key=(round(1000 T), r))``, so results do
not depend on scheduling or on which other horizons are run.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import stats

from . import estimators as est
from .model import MalthusData, solve_malthus
from .offspring import OffspringLaw, offspring_from_spec
from .rates import RateFunction, rate_from_spec
from .tree import DEFAULT_POPULATION_CAP, ObservedSample, PopulationCapExceeded, extract_sample, simulate_tree

RAW_COLUMNS = ["T", "replicate", "n_interior", "m_hat", "lambda_hat", "h", "error",
               "n_boundary", "ks_f_B", "ks_f_H"]
MAX_FAILURE_FRACTION = 0.05
KS_MIN_SAMPLE = 30


@dataclass
class ExperimentConfig:
    rate: dict | str = "trial"
    offspring: dict | str | int = "binary"
    horizons: list[float] = field(default_factory=lambda: [11.0, 13.0, 15.0])
    replicates: int = 50
    grid: dict = field(default_factory=lambda: {"start": 0.25, "stop": 2.5, "step": 0.01})
    kernel: str = "gaussian"
    bandwidth: str | float = "rule-of-thumb"
    beta: float = 1.0
    seed: int = 0
    band_level: float = 0.95
    bootstrap: int = 1000
    cap: int = DEFAULT_POPULATION_CAP

    def __post_init__(self):
        self.horizons = [float(t) for t in self.horizons]
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.horizons or any(t <= 0 for t in self.horizons):
            raise ValueError("horizons must be positive")
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must be strictly increasing")
        if not 0 < self.band_level <= 1:
            raise ValueError("band_level must lie in (0, 1]")
        est.get_kernel(self.kernel)
        if isinstance(self.bandwidth, str) and self.bandwidth not in ("rule-of-thumb", "theoretical"):
            raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def grid_points(self) -> np.ndarray:
        return est.make_grid(float(self.grid["start"]), float(self.grid["stop"]), float(self.grid["step"]))


@lru_cache(maxsize=8)
def _model(rate_key: str, law_key: str):
    rate = rate_from_spec(json.loads(rate_key))
    law = offspring_from_spec(json.loads(law_key))
    return rate, law, solve_malthus(rate, law)


def _model_for(config: ExperimentConfig) -> tuple[RateFunction, OffspringLaw, MalthusData]:
    return _model(json.dumps(config.rate, sort_keys=True), json.dumps(config.offspring, sort_keys=True))


def replicate_rng(seed: int, T: float, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(round(1000 * T)), replicate)))


# --------------------------------------------------------------------------
# single replicate


def bias_diagnostic(sample: ObservedSample, md: MalthusData) -> dict:
    """KS distances of complete lifetimes to ``f_B`` and to ``f_{H_B}``.

    ``selects_biased`` is ``None`` below :data:`KS_MIN_SAMPLE` lifetimes,
    where the comparison has too little power to mean anything.
    """
    ages = sample.interior_ages
    if len(ages) == 0:
        return {"n": 0, "ks_f_B": math.nan, "ks_f_H": math.nan, "selects_biased": None}
    rate, biased = md.rate, md.biased
    ks_b = stats.kstest(ages, lambda x: 1.0 - rate.survival(x)).statistic
    ks_h = stats.kstest(ages, lambda x: 1.0 - biased.survival(x)).statistic
    verdict = bool(ks_h < ks_b) if len(ages) >= KS_MIN_SAMPLE else None
    return {"n": int(len(ages)), "ks_f_B": float(ks_b), "ks_f_H": float(ks_h), "selects_biased": verdict}


def run_replicate(config: ExperimentConfig, T: float, replicate: int) -> dict:
    """Simulate, estimate and score one tree; failures come back as ``{"failed": reason}``."""
    rate, law, md = _model_for(config)
    rng = replicate_rng(config.seed, T, replicate)
    base = {"T": T, "replicate": replicate}
    try:
        tree = simulate_tree(rate, law, T, rng, cap=config.cap)
    except PopulationCapExceeded as exc:
        return {**base, "failed": str(exc)}
    sample = extract_sample(tree)
    try:
        result = est.estimate_all(sample, config.kernel, config.bandwidth, config.grid_points(), config.beta)
    except ValueError as exc:
        return {**base, "failed": f"estimation: {exc}", "n_interior": sample.n_interior}
    ks = bias_diagnostic(sample, md)
    return {
        **base,
        "n_interior": sample.n_interior,
        "m_hat": result.m_hat,
        "lambda_hat": result.lambda_hat,
        "h": result.h,
        "error": result.error(rate),
        "n_boundary": sample.n_boundary,
        "ks_f_B": ks["ks_f_B"],
        "ks_f_H": ks["ks_f_H"],
        "selects_biased": ks["selects_biased"],
        "b_hat": result.b_hat,
        "n_guarded": int(result.guard.sum()),
    }


def _run_task(args):
    config_dict, T, r = args
    return run_replicate(ExperimentConfig.from_dict(config_dict), T, r)


# --------------------------------------------------------------------------
# report


def population_stats(sizes) -> dict:
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "mean", "q3", "max", "std")}
    q1, med, q3 = np.quantile(sizes, [0.25, 0.5, 0.75])
    return {
        "min": float(sizes.min()),
        "q1": float(q1),
        "median": float(med),
        "mean": float(sizes.mean()),
        "q3": float(q3),
        "max": float(sizes.max()),
        "std": float(sizes.std(ddof=1)) if sizes.size > 1 else 0.0,
    }


@dataclass
class HorizonSummary:
    T: float
    n_ok: int
    n_failed: int
    mean_error: float
    std_error: float
    population: dict
    bias_selected_fraction: float | None

    @property
    def valid(self) -> bool:
        total = self.n_ok + self.n_failed
        return total > 0 and self.n_failed <= MAX_FAILURE_FRACTION * total


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[dict]
    failures: list[dict]
    estimates: dict[float, np.ndarray]
    grid: np.ndarray
    lam: float

    def errors(self, T: float) -> np.ndarray:
        return np.array([r["error"] for r in self.rows if r["T"] == T])

    def summary(self, T: float) -> HorizonSummary:
        rows = [r for r in self.rows if r["T"] == T]
        errs = np.array([r["error"] for r in rows])
        verdicts = [r["selects_biased"] for r in rows if r["selects_biased"] is not None]
        return HorizonSummary(
            T=T,
            n_ok=len(rows),
            n_failed=sum(1 for f in self.failures if f["T"] == T),
            mean_error=float(errs.mean()) if errs.size else math.nan,
            # population standard deviation, as in the usual Monte-Carlo error tables
            std_error=float(errs.std()) if errs.size else math.nan,
            population=population_stats([r["n_interior"] for r in rows]),
            bias_selected_fraction=float(np.mean(verdicts)) if verdicts else None,
        )

    def summaries(self) -> list[HorizonSummary]:
        return [self.summary(T) for T in self.config.horizons]

    @property
    def valid(self) -> bool:
        return all(s.valid for s in self.summaries())

    def bands(self, T: float, level: float | None = None):
        return confidence_bands(self.estimates[T], self.config.band_level if level is None else level)


def run_table(config: ExperimentConfig, threads: int = 1) -> ExperimentReport:
    """Run every (horizon, replicate) pair and fold the results in a fixed order."""
    rate, law, md = _model_for(config)
    tasks = [(config.to_dict(), T, r) for T in config.horizons for r in range(config.replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        results = [run_replicate(config, T, r) for _, T, r in tasks]
    results.sort(key=lambda r: (r["T"], r["replicate"]))
    rows = [r for r in results if "failed" not in r]
    failures = [r for r in results if "failed" in r]
    grid = config.grid_points()
    estimates = {
        T: np.array([r["b_hat"] for r in rows if r["T"] == T]).reshape(-1, len(grid))
        for T in config.horizons
    }
    return ExperimentReport(config, rows, failures, estimates, grid, md.lam)


# --------------------------------------------------------------------------
# post-processing


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    horizons: tuple[float, ...]
    mean_errors: tuple[float, ...]


def rate_regression(data, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> RegressionResult:
    """Least-squares slope of ``log(mean error)`` against ``T``.

    ``data`` is an :class:`ExperimentReport` or a mapping ``T -> errors``.
    The interval is a percentile bootstrap that resamples replicates within
    each horizon.
    """
    if isinstance(data, ExperimentReport):
        data = {T: data.errors(T) for T in data.config.horizons}
    horizons = sorted(data)
    if len(horizons) < 3:
        raise ValueError("rate regression needs at least three horizons")
    errs = [np.atleast_1d(np.asarray(data[T], dtype=float)) for T in horizons]
    if any(e.size == 0 for e in errs):
        raise ValueError("every horizon needs at least one error value")
    t = np.asarray(horizons, dtype=float)
    means = np.array([e.mean() for e in errs])
    slope, intercept = np.polyfit(t, np.log(means), 1)
    rng = np.random.default_rng(seed)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        bm = [e[rng.integers(0, e.size, e.size)].mean() for e in errs]
        boot[b] = np.polyfit(t, np.log(bm), 1)[0]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boot, [alpha, 1 - alpha]) if n_boot else (math.nan, math.nan)
    return RegressionResult(float(slope), float(intercept), float(lo), float(hi),
                            tuple(horizons), tuple(float(m) for m in means))


def confidence_bands(estimates, level: float = 0.95):
    """Pointwise quantiles ``(1 - level)/2`` and ``(1 + level)/2`` across replicates (rows)."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    lo = np.quantile(estimates, (1 - level) / 2, axis=0)
    hi = np.quantile(estimates, (1 + level) / 2, axis=0)
    return lo, hi


def check_report(report: ExperimentReport) -> list[tuple[str, bool, str]]:
    """Trend assertions for a run: validity, error decay in ``T``, bias selection."""
    checks = []
    sums = report.summaries()
    bad = [s.T for s in sums if not s.valid]
    checks.append(("failure rate <= 5% at every horizon", not bad, f"invalid horizons: {bad}" if bad else "ok"))
    means = [s.mean_error for s in sums]
    if len(means) >= 2:
        inversions = sum(1 for a, b in zip(means, means[1:]) if not b < a)
        checks.append((
            "mean error decreasing in T (one adjacent inversion allowed)",
            inversions <= 1 and means[-1] < means[0],
            "mean errors " + ", ".join(f"{m:.4f}" for m in means),
        ))
    for s in sums:
        if s.T >= 13 and s.bias_selected_fraction is not None:
            checks.append((
                f"bias selection at T={s.T:g} on >= 95% of replicates",
                s.bias_selected_fraction >= 0.95,
                f"fraction {s.bias_selected_fraction:.3f}",
            ))
    return checks


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_report(report: ExperimentReport, out: str | Path) -> dict[str, Path]:
    """Raw rows, per-horizon aggregates, JSON summary and band files under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["raw"] = out / "raw.csv"
    with open(paths["raw"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        for r in report.rows:
            w.writerow([_fmt(r[c]) for c in RAW_COLUMNS])
    paths["aggregate"] = out / "aggregate.csv"
    pop_keys = ["min", "q1", "median", "mean", "q3", "max", "std"]
    with open(paths["aggregate"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "n_ok", "n_failed", "mean_error", "std_error", "bias_selected_fraction"]
                   + [f"n_interior_{k}" for k in pop_keys])
        for s in report.summaries():
            w.writerow([_fmt(s.T), s.n_ok, s.n_failed, _fmt(s.mean_error), _fmt(s.std_error),
                        "" if s.bias_selected_fraction is None else _fmt(s.bias_selected_fraction)]
                       + [_fmt(s.population[k]) for k in pop_keys])
    rate = _model_for(report.config)[0]
    truth = rate(report.grid)
    for T in report.config.horizons:
        est_T = report.estimates[T]
        if not len(est_T):
            continue
        lo, hi = report.bands(T)
        p = out / f"bands_T{T:g}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "mean", "lo", "hi", "truth"])
            for row in zip(report.grid, est_T.mean(axis=0), lo, hi, truth):
                w.writerow([_fmt(float(v)) for v in row])
        paths[f"bands_{T:g}"] = p
    summary = {
        "lambda": report.lam,
        "valid": report.valid,
        "horizons": [asdict(s) | {"valid": s.valid} for s in report.summaries()],
        "failures": [{k: f[k] for k in ("T", "replicate", "failed")} for f in report.failures],
        "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in check_report(report)],
    }
    if len(report.config.horizons) >= 3 and all(len(report.errors(T)) for T in report.config.horizons):
        reg = rate_regression(report, n_boot=report.config.bootstrap, seed=report.config.seed)
        summary["regression"] = asdict(reg) | {"reference_slope": -2 * report.lam / 5}
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2))
    return paths


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
