"""
Two-stage enrichment trial engine.

Stage 1 is triggered by the S1 event count. Both subgroups are analysed, the
full-population statistic is built from them, and the threshold rule picks
the population to continue in. The selected hypothesis is tested against the
stage-1 bounds; on continuation recruitment is restricted to the selected
population and the final analysis runs at the planned total event count.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict

from enrichment.design import (
    Boundaries,
    Group,
    InfoState,
    Selection,
    StageInfo,
    ThetaConfig,
    TrialDesign,
    combine_estimates,
    full_weights,
    predict_info,
    solve_stage1_boundaries,
    solve_stage2_boundaries,
    spend,
)
from enrichment.errors import BoundaryError, EstimationError, OrderingError
from enrichment.estimators import AnalysisResult, Method, fit_group
from enrichment.numerics import RngStream
from enrichment.simdata import (
    AnalysisSnapshot,
    JointModelParams,
    TrialDataset,
    enrich_population,
    simulate_population,
    snapshot_at_events,
)

log = structlog.get_logger(__name__)

ANALYTIC = "analytic"
_ENRICH_TAG = {Selection.S1: 1, Selection.S2: 2, Selection.F: 3}


class Decision(str, Enum):
    REJECT = "reject_selected"
    ACCEPT = "accept"
    FUTILITY_STOP = "futility_stop_stage1"
    EFFICACY_STOP = "efficacy_stop_stage1"

    @property
    def rejects(self) -> bool:
        return self in (Decision.REJECT, Decision.EFFICACY_STOP)


class Action(str, Enum):
    FUTILITY = "futility"
    EFFICACY = "efficacy"
    CONTINUE = "continue"


def select(z1: float, z2: float, zeta: float) -> Selection:
    if not (math.isfinite(z1) and math.isfinite(z2)):
        raise ValueError(f"selection needs finite statistics, got {z1!r}, {z2!r}")
    if z1 > zeta and z2 > zeta:
        return Selection.F
    if z1 > zeta:
        return Selection.S1
    if z2 > zeta:
        return Selection.S2
    return Selection.NONE


def decide(z: float, a: float, b: float) -> Action:
    """Futility when z <= a, efficacy when z > b, otherwise continue."""
    if a > b:
        raise BoundaryError(f"futility bound {a!r} exceeds efficacy bound {b!r}")
    if z <= a:
        return Action.FUTILITY
    if z > b:
        return Action.EFFICACY
    return Action.CONTINUE


@dataclass(frozen=True)
class Recruitment:
    n_max: int = 800
    accrual_rate: float = 400.0


class TrialOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    replicate: int
    method: str
    selection: Selection = Selection.NONE
    stage: int = 1
    decision: Optional[Decision] = None
    valid: bool = True
    reason: str = ""
    z1_1: float = math.nan
    z2_1: float = math.nan
    zF_1: float = math.nan
    z_w_2: float = math.nan
    info1_1: float = math.nan
    info2_1: float = math.nan
    infoF_1: float = math.nan
    info_w_2: float = math.nan
    d1_1: int = 0
    d2_1: int = 0
    dF_1: int = 0
    d_w_2: int = 0
    events_at_stop: int = 0
    t1: float = math.nan
    t2: float = math.nan
    a1: float = math.nan
    b1: float = math.nan
    a2: float = math.nan
    b2: float = math.nan
    visits_per_patient: float = math.nan
    shortfall: bool = False

    @property
    def rejects(self) -> bool:
        return self.valid and self.decision is not None and self.decision.rejects

    @property
    def stop_time(self) -> float:
        return self.t2 if self.stage == 2 else self.t1

    def row(self) -> Dict[str, object]:
        out = self.model_dump()
        out["selection"] = self.selection.value
        out["decision"] = self.decision.value if self.decision else ""
        return out


def _invalid(base: dict, reason: str) -> TrialOutcome:
    log.debug("Replicate marked invalid", replicate=base.get("replicate"), method=base.get("method"), reason=reason)
    return TrialOutcome(**base, valid=False, reason=reason)


def _fit(method: str, snap: AnalysisSnapshot, group: Group, k: int) -> AnalysisResult:
    res = fit_group(method, snap, group, k)
    if not res.converged:
        raise EstimationError(f"{method} did not converge for group {group.value} at analysis {k}")
    return res


def _visits(snap: AnalysisSnapshot) -> float:
    return float(np.mean(snap.n_obs)) if snap.n else math.nan


def run_trial(params: JointModelParams, design: TrialDesign, method: str, rng: RngStream,
              replicate: int = 0, dataset: Optional[TrialDataset] = None,
              recruitment: Recruitment = Recruitment()) -> TrialOutcome:
    spec, plan = design.spec, design.plan
    if dataset is None:
        dataset = simulate_population(params, recruitment.n_max, recruitment.accrual_rate, rng)
    base: dict = {"replicate": replicate, "method": Method(method).value}

    snap1 = snapshot_at_events(dataset, Group.S1, plan.d1_stage1)
    counts1 = snap1.event_counts
    base.update(d1_1=counts1[Group.S1], d2_1=counts1[Group.S2], dF_1=counts1[Group.F], t1=snap1.calendar_time,
                shortfall=snap1.shortfall)
    if snap1.shortfall:
        return _invalid(base, "shortfall_stage1")
    try:
        r1, r2 = _fit(method, snap1, Group.S1, 1), _fit(method, snap1, Group.S2, 1)
    except EstimationError as e:
        return _invalid(base, f"estimation: {e}")
    _, info_f, z_f = combine_estimates(spec.lam, r1.theta_hat, r1.info, r2.theta_hat, r2.info)
    base.update(z1_1=r1.z, z2_1=r2.z, zF_1=z_f, info1_1=r1.info, info2_1=r2.info, infoF_1=info_f,
                events_at_stop=counts1[Group.F], visits_per_patient=_visits(snap1))
    z_stage1 = {Group.S1: r1.z, Group.S2: r2.z, Group.F: z_f}

    selection = select(r1.z, r2.z, spec.zeta)
    base["selection"] = selection
    if selection is Selection.NONE:
        return TrialOutcome(**base, decision=Decision.FUTILITY_STOP)

    info1 = StageInfo(r1.info, r2.info, info_f)
    spends = spend(spec.alpha, spec.beta, (info_f,), plan.i_max)
    a1, b1 = solve_stage1_boundaries(spends.alpha1, spends.beta1, spec, info1)
    base.update(a1=a1, b1=b1)
    group = selection.group
    action = decide(z_stage1[group], a1, b1)
    if action is Action.FUTILITY:
        return TrialOutcome(**base, decision=Decision.FUTILITY_STOP)
    if action is Action.EFFICACY:
        return TrialOutcome(**base, decision=Decision.EFFICACY_STOP)

    enriched = enrich_population(dataset, params, selection, snap1.calendar_time, rng.spawn(_ENRICH_TAG[selection]))
    snap2 = snapshot_at_events(enriched, group, plan.d_total)
    d_w2 = snap2.event_counts[group]
    base.update(stage=2, t2=snap2.calendar_time, d_w_2=d_w2, events_at_stop=snap2.event_counts[Group.F],
                visits_per_patient=_visits(snap2), shortfall=snap2.shortfall)
    try:
        if group is Group.F:
            s1, s2 = _fit(method, snap2, Group.S1, 2), _fit(method, snap2, Group.S2, 2)
            _, info_f2, z_w2 = combine_estimates(spec.lam, s1.theta_hat, s1.info, s2.theta_hat, s2.info)
            info2 = StageInfo(s1.info, s2.info, info_f2)
            observed = {Group.S1, Group.S2, Group.F}
        else:
            res = _fit(method, snap2, group, 2)
            z_w2 = res.z
            predicted = {g: predict_info(info1[g], counts1[g], d_w2) for g in Group if g is not group}
            predicted[group] = res.info
            info2 = StageInfo(predicted[Group.S1], predicted[Group.S2], predicted[Group.F])
            observed = {group}
    except EstimationError as e:
        return _invalid(base, f"estimation: {e}")
    base.update(z_w_2=z_w2, info_w_2=info2[group])

    state = InfoState(spec.lam, info1, info2, dict(counts1), dict(snap2.event_counts),
                      frozenset(set(Group) - observed))
    spends = spend(spec.alpha, spec.beta, (info_f, info2.f), plan.i_max)
    try:
        _, b2 = solve_stage2_boundaries(spends.alpha2, spends.beta2, spec, state, a1, b1)
    except OrderingError:
        return _invalid(base, "info_ordering")
    base.update(a2=b2, b2=b2)
    final = decide(z_w2, b2, b2)
    return TrialOutcome(**base, decision=Decision.REJECT if final is Action.EFFICACY else Decision.ACCEPT)


def _stage2_draw(theta: float, info_1: float, info_2: float, z_1: float, noise: float) -> float:
    ratio = info_1 / info_2
    return (math.sqrt(ratio) * z_1 + math.sqrt(1.0 - ratio) * noise
            + theta * (math.sqrt(info_2) - math.sqrt(ratio * info_1)))


def run_trial_analytic(theta: ThetaConfig, design: TrialDesign, rng: RngStream, replicate: int = 0) -> TrialOutcome:
    """
    Decision logic on statistics drawn directly from their canonical joint law
    at the planned information levels, with the planned boundaries.
    """
    spec = design.spec
    info: InfoState = design.planned_info
    bounds: Boundaries = design.planned_boundaries
    i1 = info.stage1
    z1 = theta.theta1 * math.sqrt(i1.s1) + float(rng.normal())
    z2 = theta.theta2 * math.sqrt(i1.s2) + float(rng.normal())
    c1, c2 = full_weights(spec.lam, i1.s1, i1.s2)
    z_stage1 = {Group.S1: z1, Group.S2: z2, Group.F: c1 * z1 + c2 * z2}
    noise = float(rng.normal())
    base = dict(replicate=replicate, method=ANALYTIC, z1_1=z1, z2_1=z2, zF_1=z_stage1[Group.F],
                info1_1=i1.s1, info2_1=i1.s2, infoF_1=i1.f, a1=bounds.a1, b1=bounds.b1)

    selection = select(z1, z2, spec.zeta)
    base["selection"] = selection
    if selection is Selection.NONE:
        return TrialOutcome(**base, decision=Decision.FUTILITY_STOP)
    group = selection.group
    action = decide(z_stage1[group], bounds.a1, bounds.b1)
    if action is Action.FUTILITY:
        return TrialOutcome(**base, decision=Decision.FUTILITY_STOP)
    if action is Action.EFFICACY:
        return TrialOutcome(**base, decision=Decision.EFFICACY_STOP)
    i_1, i_2 = info.pair(group)
    z_w2 = _stage2_draw(theta[group], i_1, i_2, z_stage1[group], noise)
    final = decide(z_w2, bounds.b2, bounds.b2)
    return TrialOutcome(**base, stage=2, z_w_2=z_w2, info_w_2=i_2, a2=bounds.a2, b2=bounds.b2,
                        decision=Decision.REJECT if final is Action.EFFICACY else Decision.ACCEPT)


def run_replicate(params: JointModelParams, design: TrialDesign, methods: Sequence[str], seed: int,
                  replicate: int, recruitment: Recruitment = Recruitment(),
                  theta: Optional[ThetaConfig] = None) -> List[TrialOutcome]:
    """
    All methods on one simulated population. With `theta` given, a single
    analytic-statistics trial is run instead.
    """
    rng = RngStream(seed, replicate)
    if theta is not None:
        return [run_trial_analytic(theta, design, rng, replicate)]
    dataset = simulate_population(params, recruitment.n_max, recruitment.accrual_rate, rng)
    return [run_trial(params, design, m, rng, replicate, dataset, recruitment) for m in methods]
