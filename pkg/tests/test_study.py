import math

import pandas as pd
import pytest

from enrichment.config import ScanConfig, StudyConfig
from enrichment.design import Selection
from enrichment.study import (
    DEFAULT_SCAN_GRID,
    PUBLISHED_DESIGNS,
    ReportCell,
    StudyReport,
    Tally,
    emit_report,
    fwer_strong_control_scan,
    run_replicates,
    run_study,
    scenario_grid,
    within_strong_control,
)
from enrichment.trial import ANALYTIC, Recruitment, TrialOutcome


def _outcome(selection, decision, valid=True, **extra):
    return TrialOutcome(replicate=0, method="cox", selection=selection, decision=decision, valid=valid, **extra)


def test_tally_counts(spec):
    tally = Tally()
    tally.add(_outcome(Selection.S1, "reject_selected", stage=2, events_at_stop=200, t2=3.5), spec.theta_alt)
    tally.add(_outcome(Selection.S2, "efficacy_stop_stage1", events_at_stop=150, t1=2.0), spec.theta_alt)
    tally.add(_outcome(Selection.S1, "accept", stage=2, events_at_stop=210, t2=4.0), spec.theta_alt)
    tally.add(_outcome(Selection.NONE, None, valid=False, reason="shortfall_stage1", shortfall=True), spec.theta_alt)
    assert (tally.n, tally.n_valid, tally.n_invalid, tally.n_shortfall) == (4, 3, 1, 1)
    assert (tally.n_select_s1, tally.n_reject_s1, tally.n_false_reject) == (2, 1, 1)
    derived = tally.derived()
    assert derived["power"] == pytest.approx(0.5)
    assert derived["power_se"] == pytest.approx(math.sqrt(0.25 / 2))
    assert derived["select_and_reject"] == pytest.approx(1 / 3)
    assert derived["fwer"] == pytest.approx(1 / 3)
    assert derived["mean_events"] == pytest.approx(560 / 3)
    assert derived["mean_stop_time"] == pytest.approx(9.5 / 3)
    assert derived["invalid_rate"] == pytest.approx(0.25)


def test_empty_tally_rates_are_undefined():
    assert math.isnan(Tally().derived()["power"])


def test_shards_merge_exactly(table_design, spec):
    args = (None, table_design, (), 17)
    truth = spec.theta_null
    whole, _ = run_replicates(*args, 0, 60, Recruitment(), truth, analytic=True)
    left, _ = run_replicates(*args, 0, 25, Recruitment(), truth, analytic=True)
    right, _ = run_replicates(*args, 25, 35, Recruitment(), truth, analytic=True)
    assert left[ANALYTIC] + right[ANALYTIC] == whole[ANALYTIC]
    assert whole[ANALYTIC].n == 60


def test_default_grid_uses_published_designs():
    grid = scenario_grid(StudyConfig())
    assert len(grid) == 4 * 7
    assert all(s.key in PUBLISHED_DESIGNS for s in grid)
    assert len({s.label for s in grid}) == len(grid)


def test_study_skips_invalid_scenarios():
    config = StudyConfig(replicates=40, gamma_grid=[0.8], sigma_grid=[1.0], phi2_grid=[0.0], analytic_z=True)
    report = run_study(config)
    assert len(report.cells) == 1
    cell = report.cells[0]
    assert (cell.method, cell.d1_stage1, cell.d_total) == (ANALYTIC, 49, 215)
    assert cell.tally.n == 40
    assert any("phi2=0" in note for note in report.notes)
    assert report.manifest["seed"] == str(config.seed)
    assert not report.failures


def test_report_files_and_merge(tmp_path):
    base = dict(scenario="gamma=0.8,sigma=1,phi2=5", gamma=0.8, sigma=1.0, phi2=5.0, effect="alternative",
                d1_stage1=49, d_total=215)
    a = StudyReport(cells=[ReportCell(method="cox", counts={**vars(Tally()), "n": 10, "n_valid": 10,
                                                            "n_select_s1": 6, "n_reject_s1": 5}, **base)],
                    manifest={"seed": "1"})
    b = StudyReport(cells=[ReportCell(method="cox", counts={**vars(Tally()), "n": 5, "n_valid": 5,
                                                            "n_select_s1": 4, "n_reject_s1": 2}, **base)])
    written = emit_report(a, tmp_path)
    assert {p.name for p in written} == {"study.csv", "plot_data.csv", "summary.txt"}
    assert (tmp_path / "study.csv").read_text().startswith("# seed=1")
    plot = pd.read_csv(tmp_path / "plot_data.csv")
    assert "series_monotone" in plot.columns

    merged = StudyReport.read_csv(tmp_path / "study.csv").merge(b)
    tally = merged.cells[0].tally
    assert (tally.n, tally.n_select_s1, tally.n_reject_s1) == (15, 10, 7)
    assert merged.cells[0].tally.derived()["power"] == pytest.approx(0.7)
    assert merged.manifest == {"seed": "1"}


def test_scan_matches_study_under_global_null():
    scan = ScanConfig(replicates=300, seed=5, theta_grid=[(0.0, 0.0), (0.0, 1.0)])
    rows = fwer_strong_control_scan(scan)
    assert [(r.theta1, r.theta2) for r in rows] == [(0.0, 0.0), (0.0, 1.0)]
    study = StudyConfig(replicates=300, seed=5, scenario="null", gamma_grid=[0.8], sigma_grid=[1.0],
                        phi2_grid=[5.0], analytic_z=True)
    cell = run_study(study).cells[0]
    assert rows[0].true_null_rejections == cell.tally.n_false_reject
    assert rows[0].rate == rows[0].reference_rate


def test_scan_config_needs_a_true_null():
    with pytest.raises(ValueError):
        ScanConfig(theta_grid=[(0.5, 0.5)])


@pytest.mark.slow
def test_global_null_error_rate_is_alpha(table_design, spec):
    tallies, _ = run_replicates(None, table_design, (), 20240601, 0, 100_000, Recruitment(), spec.theta_null,
                                analytic=True, jobs=4)
    rate = tallies[ANALYTIC].derived()
    assert abs(rate["fwer"] - spec.alpha) <= 3.0 * math.sqrt(spec.alpha * (1 - spec.alpha) / 100_000)


def test_strong_control_bound_is_one_sided():
    assert within_strong_control(0.028, 0.002, 0.025)
    assert not within_strong_control(0.03, 0.002, 0.025)
    assert within_strong_control(0.0, 0.0, 0.025)


@pytest.mark.slow
def test_default_scan_grid_controls_error_rate():
    rows = fwer_strong_control_scan(ScanConfig(replicates=10_000, seed=20240601), jobs=4)
    assert len(DEFAULT_SCAN_GRID) == 12
    assert [(r.theta1, r.theta2) for r in rows] == DEFAULT_SCAN_GRID
    assert all(r.n == 10_000 for r in rows)
    assert all(r.within_tolerance for r in rows)
    reference = rows[0]
    assert (reference.theta1, reference.theta2) == (0.0, 0.0)
    assert reference.rate == reference.reference_rate


@pytest.mark.slow
def test_biomarker_power_at_the_published_designs():
    config = StudyConfig(replicates=2000, seed=20240601, gamma_grid=[0.4, 0.8, 1.2],
                         sigma_grid=[0.0, 0.5, 1.0, 1.5], phi2_grid=[5.0], methods=["cox", "cond_score"])
    report = run_study(config, jobs=4)
    assert not report.failures
    rates = {(c.gamma, c.sigma, c.method): c.tally.derived() for c in report.cells}
    assert len(rates) == 3 * 4 * 2

    headline = rates[(0.8, 1.0, "cond_score")]
    assert headline["power"] == pytest.approx(0.90, abs=0.05)

    for gamma in config.gamma_grid:
        for sigma in config.sigma_grid:
            cs, cox = rates[(gamma, sigma, "cond_score")], rates[(gamma, sigma, "cox")]
            assert cs["power"] - cox["power"] > 3.0 * math.hypot(cs["power_se"], cox["power_se"])
        cox_cells = [rates[(gamma, s, "cox")] for s in config.sigma_grid]
        powers = [c["power"] for c in cox_cells]
        widest = sorted((c["power_se"] for c in cox_cells), reverse=True)[:2]
        assert max(powers) - min(powers) < 3.0 * math.hypot(*widest)
