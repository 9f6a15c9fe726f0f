import math

import numpy as np
import pytest

from enrichment.design import (
    Boundaries,
    DesignReport,
    DesignSpec,
    EventsPlan,
    Group,
    MConstants,
    Selection,
    StageInfo,
    ThetaConfig,
    _solve_decreasing,
    boundaries_for_raw,
    calibrate_m,
    calibrate_threshold,
    combine_estimates,
    full_weights,
    joint_density_full,
    joint_density_full_quadrature,
    joint_density_subgroup,
    plan_events,
    predict_info,
    selection_probabilities,
    solve_stage1_boundaries,
    spend,
    stage1_tail,
    stage2_rejection_mass,
    stage2_tail,
)
from enrichment.errors import CalibrationError, ConfigError, OrderingError, PredictionError
from enrichment.numerics import RngStream, integrate, norm_cdf, norm_sf, std_normal_quantile


def test_threshold_calibration(spec):
    assert spec.zeta == pytest.approx(0.7540, abs=1e-3)
    assert spec.info1_req == pytest.approx(9.08, rel=5e-3)


def test_threshold_matches_closed_form():
    zeta, info = calibrate_threshold(0.6, 0.5)
    assert zeta == pytest.approx(std_normal_quantile(math.sqrt(0.6)), abs=1e-8)
    assert info == pytest.approx((2.0 * zeta / 0.5) ** 2, rel=1e-8)


@pytest.mark.parametrize("psi, delta", [(0.0, 0.5), (1.0, 0.5), (0.6, 0.0)])
def test_threshold_rejects_bad_inputs(psi, delta):
    with pytest.raises(CalibrationError):
        calibrate_threshold(psi, delta)


def test_selection_probabilities_under_alternative(spec):
    probs = selection_probabilities(spec.theta_alt, spec.info1_req, spec.info1_req, spec.zeta)
    assert probs[Selection.S1] == pytest.approx(0.6, abs=1e-8)
    assert probs[Selection.F] == pytest.approx(probs[Selection.NONE], abs=1e-8)
    assert sum(probs.values()) == pytest.approx(1.0)


def test_subgroup_density_under_global_null(spec):
    info = StageInfo.from_subgroups(spec.lam, 9.08, 18.16)
    assert joint_density_subgroup(1.0, Group.S1, spec.theta_null, info, spec.zeta) == pytest.approx(0.18744, abs=1e-4)
    assert joint_density_subgroup(spec.zeta - 0.01, Group.S2, spec.theta_null, info, spec.zeta) == 0.0
    with pytest.raises(ValueError):
        joint_density_subgroup(1.0, Group.F, spec.theta_null, info, spec.zeta)


@pytest.mark.parametrize("z", [2.0, 2.6, 3.5])
def test_full_density_closed_form_matches_quadrature(spec, z):
    info = StageInfo.from_subgroups(spec.lam, 9.1, 18.2)
    theta = ThetaConfig(0.3, 0.1, spec.lam)
    closed = joint_density_full(z, theta, info, spec.lam, spec.zeta)
    assert closed > 0
    assert closed == pytest.approx(joint_density_full_quadrature(z, theta, info, spec.lam, spec.zeta), rel=1e-6)


def test_stage1_branches_under_global_null(spec):
    info = StageInfo.from_subgroups(spec.lam, 9.1, 18.2)
    p = float(norm_sf(spec.zeta))
    tails = {w: stage1_tail(-math.inf, w, spec.theta_null, info, spec.lam, spec.zeta) for w in Group}
    assert tails[Group.S1] == pytest.approx(p * (1.0 - p), abs=1e-10)
    assert tails[Group.F] == pytest.approx(p * p, abs=1e-8)
    assert sum(tails.values()) == pytest.approx(1.0 - (1.0 - p) ** 2, abs=1e-8)


def test_full_weights_have_unit_norm():
    c1, c2 = full_weights(1 / 3, 9.0, 18.0)
    assert c1 ** 2 + c2 ** 2 == pytest.approx(1.0)
    theta, info, z = combine_estimates(1 / 3, 0.6, 9.0, 0.0, 18.0)
    assert theta == pytest.approx(0.2)
    assert z == pytest.approx(theta * math.sqrt(info))


def test_quadratic_spending():
    s = spend(0.025, 0.1, (20.0, 40.0), 40.0)
    assert s.alpha1 == pytest.approx(0.025 / 4)
    assert s.alpha1 + s.alpha2 == pytest.approx(0.025)
    assert s.beta1 + s.beta2 == pytest.approx(0.1)
    capped = spend(0.025, 0.1, (50.0,), 40.0)
    assert capped.alpha1 == pytest.approx(0.025)


def test_predicted_information():
    assert predict_info(9.08, 41, 180) == pytest.approx(39.863, abs=1e-3)
    with pytest.raises(PredictionError):
        predict_info(9.08, 0, 180)


def test_stage2_tail_needs_growing_information():
    with pytest.raises(OrderingError):
        stage2_tail(0.0, 10.0, 10.0, 1.0, 2.0)
    assert stage2_tail(0.0, 10.0, 20.0, 1.0, math.inf) == 0.0
    assert stage2_tail(0.0, 10.0, 20.0, 1.0, -math.inf) == 1.0


def test_stage1_boundaries_spend_their_budget(spec, table_design):
    info = table_design.planned_info.stage1
    alpha1, beta1 = 0.01, 0.04
    a1, b1 = solve_stage1_boundaries(alpha1, beta1, spec, info)
    spent = sum(stage1_tail(b1, w, spec.theta_null, info, spec.lam, spec.zeta) for w in Group)
    assert spent == pytest.approx(alpha1, abs=1e-9)
    mu1 = spec.delta * math.sqrt(info.s1)
    selected = float(norm_sf(spec.zeta - mu1))
    miss = (float(norm_cdf(a1 - mu1)) - float(norm_cdf(spec.zeta - mu1))) / selected
    assert miss == pytest.approx(beta1, abs=1e-9)
    assert a1 <= b1


def test_zero_spend_gives_open_bounds(spec, table_design):
    a1, b1 = solve_stage1_boundaries(0.0, 0.0, spec, table_design.planned_info.stage1)
    assert (a1, b1) == (-math.inf, math.inf)


def test_planned_boundaries(spec, table_design):
    bounds = table_design.planned_boundaries
    assert bounds.a1 <= bounds.b1
    assert bounds.a2 == bounds.b2
    assert bounds.alpha1 + bounds.alpha2 == pytest.approx(spec.alpha)
    assert math.isfinite(bounds.b2)
    mass = stage2_rejection_mass(bounds.b2, spec, table_design.planned_info, bounds.a1, bounds.b1)
    assert mass == pytest.approx(bounds.alpha2, abs=1e-8)


def test_boundaries_must_be_ordered():
    with pytest.raises(ValueError):
        Boundaries(a1=2.0, b1=1.0, a2=0.0, b2=0.0, alpha1=0.0, alpha2=0.0, beta1=0.0, beta2=0.0)


def test_events_plan_from_event_counts(spec):
    plan = EventsPlan.from_event_counts(spec, 49, 215)
    assert plan.m1 == plan.m2 == plan.mF == pytest.approx(49 / spec.info1_req)
    assert plan.i_max == pytest.approx(215 / plan.mF)
    assert plan.dF_stage1 == pytest.approx(49 * 3)
    info = plan.planned_info(spec.lam)
    assert info.stage1.s1 == pytest.approx(spec.info1_req)
    assert info.stage2.f == pytest.approx(plan.i_max)


def test_design_report_save_and_load(tmp_path, table_design):
    report = DesignReport.build(table_design.spec, table_design.plan)
    path = tmp_path / "design.json"
    report.save(path)
    assert '"lambda"' in path.read_text()
    design = DesignReport.load(path).to_design()
    assert design.plan.d_total == 215
    assert design.spec.zeta == pytest.approx(table_design.spec.zeta)


def test_design_report_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        DesignReport.load(bad)
    with pytest.raises(ConfigError):
        DesignReport.load(tmp_path / "missing.json")


@pytest.mark.slow
def test_planned_imax_closes_the_boundaries(spec):
    plan = plan_events(spec, MConstants.common(49 / spec.info1_req))
    assert plan.d1_stage1 == 49
    assert plan.d_total > plan.d1_stage1
    a2, b2 = boundaries_for_raw(spec, plan.planned_info(spec.lam), plan.i_max)
    assert a2 == pytest.approx(b2, abs=1e-3)
    assert np.isfinite(b2)


def test_root_search_widens_below_the_start():
    root = _solve_decreasing(lambda x: float(norm_sf(x)), 0.999, 0.0)
    assert root == pytest.approx(std_normal_quantile(0.001), abs=1e-9)


def test_stage1_bounds_with_a_negative_threshold():
    spec = DesignSpec(zeta=-3.0, info1_req=9.08)
    info = StageInfo.from_subgroups(spec.lam, 9.08, 18.16)
    _, b1 = solve_stage1_boundaries(0.01, 0.0, spec, info)
    spent = sum(stage1_tail(b1, w, spec.theta_null, info, spec.lam, spec.zeta) for w in Group)
    assert spent == pytest.approx(0.01, abs=1e-9)


N_DRAWS = 1_000_000


def _stage1_draws(theta, info, zeta, seed):
    rng = RngStream(seed, 0)
    mu1, mu2 = theta.theta1 * math.sqrt(info.s1), theta.theta2 * math.sqrt(info.s2)
    z1 = mu1 + rng.normal(N_DRAWS)
    z2 = mu2 + rng.normal(N_DRAWS)
    c1, c2 = full_weights(theta.lam, info.s1, info.s2)
    return {
        Group.S1: z1[(z1 > zeta) & (z2 <= zeta)],
        Group.S2: z2[(z2 > zeta) & (z1 <= zeta)],
        Group.F: (c1 * z1 + c2 * z2)[(z1 > zeta) & (z2 > zeta)],
        None: np.flatnonzero((z1 <= zeta) & (z2 <= zeta)),
    }


@pytest.mark.parametrize("which", ["null", "alt"])
def test_selection_probabilities_against_sampling(spec, which):
    theta = spec.theta_null if which == "null" else spec.theta_alt
    info = StageInfo.from_subgroups(spec.lam, spec.info1_req, 2 * spec.info1_req)
    probs = selection_probabilities(theta, info.s1, info.s2, spec.zeta)
    draws = _stage1_draws(theta, info, spec.zeta, seed=41)
    for sel, key in ((Selection.S1, Group.S1), (Selection.S2, Group.S2), (Selection.F, Group.F), (Selection.NONE, None)):
        p = probs[sel]
        observed = draws[key].size / N_DRAWS
        assert abs(observed - p) <= 3.0 * math.sqrt(p * (1 - p) / N_DRAWS)


@pytest.mark.parametrize("which", ["null", "alt"])
@pytest.mark.parametrize("w", [Group.S1, Group.S2, Group.F])
def test_joint_densities_against_sampling(spec, which, w):
    from scipy.stats import chi2

    theta = spec.theta_null if which == "null" else spec.theta_alt
    info = StageInfo.from_subgroups(spec.lam, spec.info1_req, 2 * spec.info1_req)
    c1, c2 = full_weights(spec.lam, info.s1, info.s2)
    if w is Group.F:
        def density(z):
            return joint_density_full(z, theta, info, spec.lam, spec.zeta)
        support = (c1 + c2) * spec.zeta
        centre = c1 * theta.theta1 * math.sqrt(info.s1) + c2 * theta.theta2 * math.sqrt(info.s2)
    else:
        def density(z):
            return joint_density_subgroup(z, w, theta, info, spec.zeta)
        support = spec.zeta
        centre = theta[w] * math.sqrt(info[w])

    edges = np.append(np.linspace(support, max(centre, support) + 4.0, 20), np.inf)
    mass = np.array([integrate(density, lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])
    sel = {Group.S1: Selection.S1, Group.S2: Selection.S2, Group.F: Selection.F}[w]
    p = selection_probabilities(theta, info.s1, info.s2, spec.zeta)[sel]
    assert mass.sum() == pytest.approx(p, abs=1e-6)

    sample = _stage1_draws(theta, info, spec.zeta, seed=43)[w]
    assert abs(sample.size / N_DRAWS - p) <= 3.0 * math.sqrt(p * (1 - p) / N_DRAWS)
    observed = np.bincount(np.searchsorted(edges, sample, side="right") - 1, minlength=len(edges) - 1)
    expected = N_DRAWS * mass
    stat = float(np.sum((observed - expected) ** 2 / expected))
    assert chi2.sf(stat, df=len(expected) - 1) > 1e-3


@pytest.mark.slow
def test_cox_events_per_information_under_global_null(null_params):
    from enrichment.study import CALIBRATION_STREAM

    m = calibrate_m(null_params, RngStream(20240601, CALIBRATION_STREAM), method="cox", n_patients=5000)
    for value in (m.m1, m.m2, m.mF):
        assert value == pytest.approx(4.0, rel=0.1)
    assert all(r2 >= 0.98 for r2 in m.r_squared.values())
