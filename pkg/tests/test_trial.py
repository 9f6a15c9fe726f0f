import math

import pytest

from enrichment.design import Group, Selection, ThetaConfig
from enrichment.errors import BoundaryError
from enrichment.numerics import RngStream
from enrichment.simdata import enrich_population, simulate_population, snapshot_at_events
from enrichment.trial import (
    ANALYTIC,
    Action,
    Decision,
    Recruitment,
    decide,
    run_replicate,
    run_trial_analytic,
    select,
)

ZETA = 0.754


@pytest.mark.parametrize(
    "z1, z2, expected",
    [
        (1.0, 1.0, Selection.F),
        (1.0, 0.2, Selection.S1),
        (-0.5, 2.0, Selection.S2),
        (0.0, 0.0, Selection.NONE),
        (ZETA, 2.0, Selection.S2),
        (ZETA, ZETA, Selection.NONE),
    ],
)
def test_select(z1, z2, expected):
    assert select(z1, z2, ZETA) is expected


def test_select_needs_finite_statistics():
    with pytest.raises(ValueError):
        select(math.nan, 1.0, ZETA)


@pytest.mark.parametrize(
    "z, expected",
    [(0.5, Action.FUTILITY), (0.4, Action.FUTILITY), (1.0, Action.CONTINUE), (2.3, Action.CONTINUE),
     (2.31, Action.EFFICACY)],
)
def test_decide(z, expected):
    assert decide(z, 0.5, 2.3) is expected


def test_decide_with_open_bounds():
    assert decide(-40.0, -math.inf, math.inf) is Action.CONTINUE
    assert decide(1.0, 1.0, 1.0) is Action.FUTILITY
    with pytest.raises(BoundaryError):
        decide(0.0, 1.0, 0.5)


def test_decisions_that_reject():
    assert Decision.REJECT.rejects and Decision.EFFICACY_STOP.rejects
    assert not Decision.ACCEPT.rejects and not Decision.FUTILITY_STOP.rejects


def test_analytic_trial_is_deterministic(table_design, spec):
    a = run_trial_analytic(spec.theta_alt, table_design, RngStream(5, 12), replicate=12)
    b = run_trial_analytic(spec.theta_alt, table_design, RngStream(5, 12), replicate=12)
    assert a.model_dump_json() == b.model_dump_json()
    assert a.method == ANALYTIC


def test_analytic_trial_with_overwhelming_s1_effect(table_design):
    outcome = run_trial_analytic(ThetaConfig(3.0, -3.0, 1 / 3), table_design, RngStream(1, 0))
    assert outcome.selection is Selection.S1
    assert outcome.rejects


def test_analytic_trial_with_harmful_treatment(table_design):
    outcome = run_trial_analytic(ThetaConfig(-3.0, -3.0, 1 / 3), table_design, RngStream(1, 0))
    assert outcome.decision is Decision.FUTILITY_STOP
    assert not outcome.rejects


def test_methods_share_the_population(alt_params, table_design):
    outcomes = run_replicate(alt_params, table_design, ["cox", "cox_tvc"], seed=20240601, replicate=3,
                             recruitment=Recruitment())
    cox, tvc = outcomes
    assert (cox.method, tvc.method) == ("cox", "cox_tvc")
    assert cox.t1 == tvc.t1
    assert cox.d1_1 == tvc.d1_1 == table_design.plan.d1_stage1
    assert cox.dF_1 == tvc.dF_1


def test_replicates_are_reproducible(alt_params, table_design):
    first = run_replicate(alt_params, table_design, ["cox"], seed=99, replicate=4)
    again = run_replicate(alt_params, table_design, ["cox"], seed=99, replicate=4)
    assert first[0].model_dump_json() == again[0].model_dump_json()


def test_stage_two_uses_the_planned_event_count(alt_params, table_design):
    for replicate in range(12):
        (outcome,) = run_replicate(alt_params, table_design, ["cox"], seed=7, replicate=replicate)
        if outcome.valid and outcome.stage == 2 and not outcome.shortfall:
            assert outcome.d_w_2 == table_design.plan.d_total
            assert outcome.t2 > outcome.t1
            assert outcome.a2 == outcome.b2
            assert outcome.decision in (Decision.REJECT, Decision.ACCEPT)
            return
    pytest.skip("no replicate reached the second stage")


def test_shortfall_at_stage_one_is_invalid(alt_params, table_design):
    (outcome,) = run_replicate(alt_params, table_design, ["cox"], seed=1, replicate=0,
                               recruitment=Recruitment(n_max=60, accrual_rate=400.0))
    assert not outcome.valid
    assert outcome.reason == "shortfall_stage1"
    assert not outcome.rejects


def _s1_after_enrichment(params, recruitment, seed):
    pop = simulate_population(params, recruitment.n_max, recruitment.accrual_rate, RngStream(seed, 0))
    t1 = snapshot_at_events(pop, Group.S1, 49).calendar_time
    enriched = enrich_population(pop, params, Selection.S1, t1, RngStream(seed, 0).spawn(1))
    return int(enriched.mask(Group.S1).sum()), enriched.total_events(Group.S1)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_default_recruitment_reaches_the_final_event_count(alt_params, table_design, seed):
    assert Recruitment() == Recruitment(800, 400.0)
    subjects, events = _s1_after_enrichment(alt_params, Recruitment(), seed)
    assert subjects >= events >= table_design.plan.d_total


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_smaller_recruitment_runs_short_of_s1_events(alt_params, table_design, seed):
    _, events = _s1_after_enrichment(alt_params, Recruitment(400, 200.0), seed)
    assert events < table_design.plan.d_total
