import numpy as np
import pandas as pd
import pytest

from enrichment.design import Group, Selection
from enrichment.errors import ParameterError
from enrichment.numerics import RngStream, find_root
from enrichment.simdata import (
    CENSOR_RATE,
    HORIZON,
    SCHEDULE,
    JointModelParams,
    SubgroupParams,
    cumulative_hazard,
    enrich_population,
    export_dataset,
    invert_cumulative_hazard,
    measurement_schedule,
    observed_events,
    randomise_arms,
    sample_event_time,
    sample_subject,
    simulate_population,
    snapshot_at_events,
    snapshot_at_time,
)


def test_schedule_is_fortnightly_then_monthly():
    assert measurement_schedule(0.25).size == 7
    np.testing.assert_allclose(np.diff(measurement_schedule(0.25)), 2.0 / 52.0)
    one_year = measurement_schedule(1.0)
    assert one_year.size == 7 + 9
    np.testing.assert_allclose(np.diff(one_year[6:]), 1.0 / 12.0)
    assert SCHEDULE[0] == 0.0


def test_non_psd_random_effects_are_rejected():
    with pytest.raises(ParameterError):
        SubgroupParams(phi2=0.0)
    with pytest.raises(ParameterError):
        JointModelParams.scenario("null", phi2=0.0)
    with pytest.raises(ParameterError):
        JointModelParams.scenario("neither")


def test_alternative_scenario_only_touches_s1():
    params = JointModelParams.scenario("alternative", gamma=1.2)
    assert (params.s1.eta, params.s1.b2) == (-0.5, -0.5)
    assert (params.s2.eta, params.s2.b2) == (0.0, 0.0)
    assert params[Group.S2].gamma == params[1].gamma == 1.2


@pytest.mark.parametrize("target", [0.001, 0.02, 0.3, 2.0])
@pytest.mark.parametrize("slope", [1.81, 0.0, -2.0])
def test_inverse_cumulative_hazard(target, slope):
    p = SubgroupParams()
    t = invert_cumulative_hazard(target, 4.0, slope, 1, p)
    if np.isinf(t):
        assert cumulative_hazard(1e6, 4.0, slope, 1, p) < target
        return
    assert cumulative_hazard(t, 4.0, slope, 1, p) == pytest.approx(target, rel=1e-9)
    root = find_root(lambda u: cumulative_hazard(u, 4.0, slope, 1, p) - target, (0.0, t + 10.0))
    assert t == pytest.approx(root, rel=1e-8, abs=1e-10)


def test_unreachable_cumulative_hazard_gives_infinite_time():
    p = SubgroupParams()
    assert np.isinf(invert_cumulative_hazard(50.0, 0.0, -3.0, 0, p))


def test_population_is_reproducible(alt_params):
    a = simulate_population(alt_params, 200, 400.0, RngStream(3, 9))
    b = simulate_population(alt_params, 200, 400.0, RngStream(3, 9))
    np.testing.assert_array_equal(a.event_time, b.event_time)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(np.diff(a.accrual) >= 0)
    assert a.accrual[-1] <= 200 / 400.0


def test_population_layout(population, alt_params):
    assert population.n == 800
    assert abs(np.mean(population.subgroup == 1) - alt_params.lam) < 0.06
    assert population.offsets[-1] == population.values.size
    subject = population.subject(5)
    assert subject.visit_times.size == subject.values.size
    assert subject.visit_times[-1] <= min(subject.event_time, subject.censor_time)


def test_single_subject():
    s = sample_subject(JointModelParams(), 2, 1, 0.1, RngStream(1, 1), subject_id=17)
    assert (s.id, s.subgroup, s.arm) == (17, 2, 1)
    assert s.values.size >= 1


def test_snapshot_at_event_count(population):
    snap = snapshot_at_events(population, Group.S1, 30)
    assert snap.event_counts[Group.S1] == 30
    assert snap.event_counts[Group.F] == snap.event_counts[Group.S1] + snap.event_counts[Group.S2]
    assert not snap.shortfall
    assert np.all(snap.accrual <= snap.calendar_time)
    assert np.all(snap.time <= snap.calendar_time - snap.accrual + 1e-12)
    later = snapshot_at_time(population, snap.calendar_time + 0.5)
    assert later.event_counts[Group.S1] >= 30


def test_snapshot_shortfall(population):
    snap = snapshot_at_events(population, Group.S1, population.n + 1)
    assert snap.shortfall
    assert snap.event_counts[Group.S1] == population.total_events(Group.S1)


def test_restrict(population):
    snap = snapshot_at_events(population, Group.F, 60)
    s2 = snap.restrict(Group.S2)
    assert np.all(s2.subgroup == 2)
    assert int(s2.status.sum()) == snap.event_counts[Group.S2]
    times, values = s2.measurements(0)
    assert times.size == values.size == s2.n_obs[0]


def test_enrichment_replaces_late_subjects(population, alt_params):
    cut = 1.0
    enriched = enrich_population(population, alt_params, Selection.S1, cut, RngStream(11, 0).spawn(1))
    late = enriched.accrual > cut
    assert sorted(enriched.ids) == sorted(population.ids)
    assert np.all(enriched.subgroup[late] == 1)
    early = population.accrual <= cut
    np.testing.assert_array_equal(enriched.event_time[~late], population.event_time[early])
    early_values = population.values[np.repeat(early, population.n_visits)]
    np.testing.assert_array_equal(enriched.values[: early_values.size], early_values)
    assert enrich_population(population, alt_params, Selection.F, cut, RngStream(1, 1)) is population


def test_export_dataset(tmp_path, population):
    snap = snapshot_at_events(population, Group.S1, 20)
    m_path, s_path = export_dataset(snap, tmp_path, prefix="interim")
    measurements = pd.read_csv(m_path)
    survival = pd.read_csv(s_path)
    assert list(survival.columns) == ["subject_id", "time", "status"]
    assert len(survival) == snap.n
    assert len(measurements) == int(snap.n_obs.sum())
    assert survival["status"].sum() == snap.event_counts[Group.F]


def test_cumulative_hazard_is_continuous_at_the_kink():
    p = SubgroupParams()
    below = cumulative_hazard(1.0, 4.0, 1.81, 1, p)
    above = cumulative_hazard(np.nextafter(1.0, 2.0), 4.0, 1.81, 1, p)
    assert above == pytest.approx(below, rel=1e-12)


@pytest.mark.parametrize("b0, slope, arm", [(4.23, 1.81, 0), (3.0, 0.0, 1), (5.0, 0.4, 1)])
def test_sampled_times_follow_the_survival_function(b0, slope, arm):
    p = SubgroupParams(eta=-0.5)
    n = 100_000
    times = np.sort(invert_cumulative_hazard(RngStream(31, arm).exponential(1.0, n), b0, slope, arm, p))
    assert np.all(np.isfinite(times))
    model_cdf = 1.0 - np.exp(-cumulative_hazard(times, b0, slope, arm, p))
    ranks = np.arange(1, n + 1) / n
    sup = max(np.max(ranks - model_cdf), np.max(model_cdf - (ranks - 1.0 / n)))
    assert sup < 0.01


def test_event_times_are_capped_at_the_horizon():
    p = SubgroupParams()
    draws = [sample_event_time(0.0, -3.0, 0, p, RngStream(seed, 0)) for seed in range(10)]
    assert all(np.isfinite(t) and t <= HORIZON for t in draws)
    assert HORIZON in draws


def test_capped_times_are_censored():
    flat = SubgroupParams(mu1=-5.0, phi1=0.0, phi12=0.0, phi2=0.0)
    pop = simulate_population(JointModelParams(flat, flat), 300, 400.0, RngStream(8, 0))
    capped = pop.event_time == HORIZON
    assert capped.any()
    assert np.all(np.isfinite(pop.event_time)) and np.all(pop.event_time <= HORIZON)
    assert not observed_events(pop.event_time, pop.censor_time)[capped].any()
    assert pop.total_events(Group.F) == int(observed_events(pop.event_time, pop.censor_time).sum())
    snap = snapshot_at_time(pop, 1e3)
    assert not snap.status[capped].any()


def _max_prefix_imbalance(arm):
    return int(np.max(np.abs(np.cumsum(2 * arm - 1)))) if arm.size else 0


def test_arms_are_balanced_within_subgroups(population):
    for j in (1, 2):
        arm = population.arm[population.subgroup == j].astype(int)
        assert abs(int(arm.sum()) * 2 - arm.size) <= 1
        assert _max_prefix_imbalance(arm) <= 1


def test_block_randomisation():
    subgroup = np.array([1, 2, 2, 1, 1, 2, 1, 1, 2])
    arm = randomise_arms(subgroup, RngStream(4, 4))
    assert set(np.unique(arm)) <= {0, 1}
    for j in (1, 2):
        assert _max_prefix_imbalance(arm[subgroup == j]) <= 1


def test_enrolment_after_selection_is_balanced(population, alt_params):
    enriched = enrich_population(population, alt_params, Selection.S2, 1.0, RngStream(11, 0).spawn(2))
    arm = enriched.arm[enriched.accrual > 1.0].astype(int)
    assert _max_prefix_imbalance(arm) <= 1


@pytest.fixture(scope="module")
def large_population(null_params):
    return simulate_population(null_params, 40_000, 400.0, RngStream(23, 0))


def test_censoring_fraction_over_five_years(large_population):
    expected = 1.0 - np.exp(-5.0 * CENSOR_RATE)
    assert abs(expected - 0.09) <= 0.01
    observed = float(np.mean(large_population.censor_time < 5.0))
    assert abs(observed - 0.09) <= 0.01


def test_random_effect_moments(large_population):
    p = SubgroupParams()
    effects = np.column_stack([large_population.b0, large_population.b1])
    np.testing.assert_allclose(effects.mean(axis=0), p.mean, atol=0.05)
    np.testing.assert_allclose(np.cov(effects.T), p.cov, rtol=0.05)
