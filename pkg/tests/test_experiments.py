import csv
import json

import numpy as np
import pytest

from agebranch import OffspringLaw, RateFunction, simulate_tree, solve_malthus
from agebranch.experiments import (
    RAW_COLUMNS,
    ExperimentConfig,
    HorizonSummary,
    bias_diagnostic,
    check_report,
    confidence_bands,
    population_stats,
    rate_regression,
    replicate_rng,
    run_replicate,
    run_table,
    write_report,
)
from agebranch.tree import ObservedSample, extract_sample


def small_config(**kw):
    base = dict(horizons=[7.0, 9.0], replicates=4, bootstrap=50)
    return ExperimentConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def report():
    return run_table(small_config(horizons=[7.0, 9.0, 11.0]))


# -- post-processing on synthetic input ------------------------------------


def test_regression_recovers_synthetic_slope():
    rng = np.random.default_rng(0)
    data = {T: np.exp(-0.2 * T) * rng.uniform(0.9, 1.1, 50) for T in (11.0, 13.0, 15.0, 17.0)}
    reg = rate_regression(data, n_boot=500)
    assert reg.slope == pytest.approx(-0.2, abs=0.02)
    assert reg.ci_low <= -0.2 <= reg.ci_high


def test_regression_flat_errors():
    reg = rate_regression({T: np.full(10, 0.3) for T in (1.0, 2.0, 3.0)}, n_boot=20)
    assert reg.slope == pytest.approx(0.0, abs=1e-12)
    assert reg.ci_low == pytest.approx(0.0, abs=1e-12) and reg.ci_high == pytest.approx(0.0, abs=1e-12)


def test_regression_needs_three_horizons():
    with pytest.raises(ValueError, match="three horizons"):
        rate_regression({1.0: [0.1], 2.0: [0.05]})


def test_bands_collapse_on_identical_rows():
    est = np.tile(np.linspace(0, 1, 5), (20, 1))
    lo, hi = confidence_bands(est, 0.9)
    np.testing.assert_array_equal(lo, hi)


def test_full_level_bands_are_min_max():
    est = np.random.default_rng(1).normal(size=(30, 6))
    lo, hi = confidence_bands(est, 1.0)
    np.testing.assert_array_equal(lo, est.min(axis=0))
    np.testing.assert_array_equal(hi, est.max(axis=0))
    with pytest.raises(ValueError):
        confidence_bands(est, 0.0)


def test_population_stats():
    s = population_stats([1, 2, 3, 4, 5])
    assert (s["min"], s["median"], s["max"], s["mean"]) == (1, 3, 5, 3)
    assert s["std"] == pytest.approx(np.std([1, 2, 3, 4, 5], ddof=1))


@pytest.mark.parametrize("failed, valid", [(0, True), (5, True), (6, False)])
def test_failure_threshold(failed, valid):
    s = HorizonSummary(13.0, 100 - failed, failed, 0.1, 0.01, {}, None)
    assert s.valid is valid


# -- configuration ---------------------------------------------------------


@pytest.mark.parametrize("bad", [
    {"replicates": 0},
    {"horizons": [13.0, 11.0]},
    {"horizons": []},
    {"band_level": 1.5},
    {"kernel": "box"},
    {"bandwidth": "silverman"},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        small_config(**bad)


def test_config_round_trip():
    cfg = small_config(kernel="biweight")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown experiment keys"):
        ExperimentConfig.from_dict({"horizon": [1.0]})


# -- replicates and bias diagnostic ----------------------------------------


def test_replicate_streams_are_distinct_and_stable():
    a = replicate_rng(0, 13.0, 0).random(3)
    np.testing.assert_array_equal(a, replicate_rng(0, 13.0, 0).random(3))
    assert not np.array_equal(a, replicate_rng(0, 13.0, 1).random(3))
    assert not np.array_equal(a, replicate_rng(0, 15.0, 0).random(3))
    assert not np.array_equal(a, replicate_rng(1, 13.0, 0).random(3))


def test_bias_diagnostic_constant_rate():
    rate, law = RateFunction.constant(0.4), OffspringLaw.binary()
    md = solve_malthus(rate, law)
    s = extract_sample(simulate_tree(rate, law, 15.0, np.random.default_rng(2)))
    d = bias_diagnostic(s, md)
    assert d["n"] > 30 and d["selects_biased"] is True
    assert d["ks_f_H"] < d["ks_f_B"]


def test_bias_diagnostic_small_sample(md_trial):
    s = ObservedSample(np.array([0.5, 1.0, 1.5]), np.array([1.0]), np.array([2, 2, 2]), 3.0)
    assert bias_diagnostic(s, md_trial)["selects_biased"] is None
    empty = ObservedSample(np.array([]), np.array([1.0]), np.array([], dtype=int), 1.0)
    assert bias_diagnostic(empty, md_trial)["n"] == 0


def test_population_cap_is_recorded_as_failure():
    r = run_replicate(small_config(cap=50), 11.0, 0)
    assert "population cap exceeded" in r["failed"]
    rep = run_table(small_config(cap=50, horizons=[11.0], replicates=3))
    assert not rep.rows and len(rep.failures) == 3
    assert not rep.valid
    assert not check_report(rep)[0][1]


def test_single_replicate_tiny_run():
    rep = run_table(ExperimentConfig(horizons=[5.0], replicates=1, bootstrap=10))
    assert len(rep.rows) + len(rep.failures) == 1


# -- full runs -------------------------------------------------------------


def test_reproducible(report):
    again = run_table(small_config(horizons=[7.0, 9.0, 11.0]))
    assert [r["error"] for r in again.rows] == [r["error"] for r in report.rows]


def test_horizons_do_not_share_streams(report):
    alone = run_table(small_config(horizons=[9.0]))
    assert list(alone.errors(9.0)) == list(report.errors(9.0))


def test_parallel_matches_serial(report):
    par = run_table(small_config(horizons=[7.0, 9.0, 11.0]), threads=2)
    assert [r["error"] for r in par.rows] == [r["error"] for r in report.rows]


def test_report_files_consistent(report, tmp_path):
    paths = write_report(report, tmp_path)
    with open(paths["raw"]) as fh:
        raw = list(csv.DictReader(fh))
    assert list(raw[0]) == RAW_COLUMNS
    assert len(raw) == len(report.rows)
    with open(paths["aggregate"]) as fh:
        agg = {float(r["T"]): r for r in csv.DictReader(fh)}
    for T in report.config.horizons:
        errs = [float(r["error"]) for r in raw if float(r["T"]) == T]
        assert float(agg[T]["mean_error"]) == pytest.approx(np.mean(errs), rel=1e-12)
        assert float(agg[T]["std_error"]) == pytest.approx(np.std(errs), rel=1e-12)
        sizes = [int(r["n_interior"]) for r in raw if float(r["T"]) == T]
        assert float(agg[T]["n_interior_max"]) == max(sizes)
        assert (tmp_path / f"bands_T{T:g}.csv").exists()
    summary = json.loads(paths["summary"].read_text())
    assert "regression" in summary and summary["lambda"] == report.lam


def test_band_files_bracket_mean(report):
    for T in report.config.horizons:
        lo, hi = report.bands(T)
        mean = report.estimates[T].mean(axis=0)
        assert np.all(lo <= mean + 1e-12) and np.all(mean <= hi + 1e-12)
