"""
Design-stage computations on Z-statistics and information levels.

Threshold calibration, selection probabilities and selection-truncated
densities, error spending, boundary solving, the maximum-information search,
events planning and information prediction. Everything here works on the
benefit scale: theta > 0 means the treatment helps.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import optimize as sp_optimize

from enrichment.errors import (
    BracketError,
    CalibrationError,
    ConfigError,
    EstimationError,
    InfeasibleSpendError,
    OrderingError,
    PredictionError,
    SearchError,
)
from enrichment.numerics import (
    find_root,
    gauss_legendre,
    integrate,
    norm_cdf,
    norm_pdf,
    norm_sf,
    std_normal_quantile,
)

log = structlog.get_logger(__name__)

# Z-values beyond this are treated as +/- infinity when comparing boundaries.
Z_CAP = 50.0
_TAIL_SPAN = 14.0
_PANEL = gauss_legendre(16)


class Group(str, Enum):
    S1 = "1"
    S2 = "2"
    F = "F"


class Selection(str, Enum):
    S1 = "S1"
    S2 = "S2"
    F = "F"
    NONE = "none"

    @property
    def group(self) -> Optional[Group]:
        return {Selection.S1: Group.S1, Selection.S2: Group.S2, Selection.F: Group.F}.get(self)


class DesignSpec(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    psi: float = Field(0.6, gt=0, lt=1, description="Target probability of selecting S1 under the alternative")
    delta: float = Field(0.5, gt=0, description="Planned standardised benefit in S1")
    lam: float = Field(1 / 3, gt=0, lt=1, alias="lambda", description="Prevalence of S1 in the full population")
    alpha: float = Field(0.025, gt=0, lt=1, description="One-sided familywise error budget")
    beta: float = Field(0.10, gt=0, lt=1, description="Type-2 error budget")
    zeta: float = Field(description="Selection threshold")
    info1_req: float = Field(gt=0, description="Required stage-1 information in S1")
    K: Literal[2] = 2

    @classmethod
    def calibrated(cls, psi: float = 0.6, delta: float = 0.5, lam: float = 1 / 3,
                   alpha: float = 0.025, beta: float = 0.10) -> "DesignSpec":
        zeta, info1_req = calibrate_threshold(psi, delta)
        return cls(psi=psi, delta=delta, lam=lam, alpha=alpha, beta=beta, zeta=zeta, info1_req=info1_req)

    @property
    def theta_null(self) -> "ThetaConfig":
        return ThetaConfig(0.0, 0.0, self.lam)

    @property
    def theta_alt(self) -> "ThetaConfig":
        return ThetaConfig(self.delta, 0.0, self.lam)


@dataclass(frozen=True)
class ThetaConfig:
    theta1: float
    theta2: float
    lam: float

    @property
    def theta_f(self) -> float:
        return self.lam * self.theta1 + (1.0 - self.lam) * self.theta2

    def __getitem__(self, group: Group) -> float:
        return {Group.S1: self.theta1, Group.S2: self.theta2, Group.F: self.theta_f}[Group(group)]

    def is_null(self, group: Group) -> bool:
        return self[group] <= 0.0


def combine_info(lam: float, info1: float, info2: float) -> float:
    return 1.0 / (lam ** 2 / info1 + (1.0 - lam) ** 2 / info2)


def full_weights(lam: float, info1: float, info2: float) -> Tuple[float, float]:
    """Weights (c1, c2) with Z_F = c1 Z_1 + c2 Z_2; c1^2 + c2^2 = 1."""
    info_f = combine_info(lam, info1, info2)
    return lam * math.sqrt(info_f / info1), (1.0 - lam) * math.sqrt(info_f / info2)


def combine_estimates(lam: float, theta1: float, info1: float, theta2: float, info2: float) -> Tuple[float, float, float]:
    """Full-population (theta, info, z) from the two subgroup estimates."""
    theta_f = lam * theta1 + (1.0 - lam) * theta2
    info_f = combine_info(lam, info1, info2)
    return theta_f, info_f, theta_f * math.sqrt(info_f)


@dataclass(frozen=True)
class StageInfo:
    s1: float
    s2: float
    f: float

    @classmethod
    def from_subgroups(cls, lam: float, s1: float, s2: float) -> "StageInfo":
        return cls(s1, s2, combine_info(lam, s1, s2))

    def __getitem__(self, group: Group) -> float:
        return {Group.S1: self.s1, Group.S2: self.s2, Group.F: self.f}[Group(group)]

    def as_dict(self) -> Dict[str, float]:
        return {"1": self.s1, "2": self.s2, "F": self.f}


@dataclass(frozen=True)
class InfoState:
    lam: float
    stage1: StageInfo
    stage2: Optional[StageInfo] = None
    events1: Mapping[Group, float] = field(default_factory=dict)
    events2: Mapping[Group, float] = field(default_factory=dict)
    predicted: frozenset = frozenset()

    def __post_init__(self):
        if min(self.stage1.s1, self.stage1.s2, self.stage1.f) <= 0:
            raise OrderingError(f"stage-1 information must be positive, got {self.stage1}")

    def pair(self, group: Group) -> Tuple[float, float]:
        if self.stage2 is None:
            raise OrderingError("stage-2 information is not available")
        return self.stage1[group], self.stage2[group]


def calibrate_threshold(psi: float, delta: float) -> Tuple[float, float]:
    """
    Solve P(W=S1; alt) = psi and P(W=F; alt) = P(W=none; alt) for (zeta, info1_req).

    The system is solved numerically in (zeta, delta*sqrt(info)) and checked
    against the closed form zeta = Phi^-1(sqrt(psi)), info = (2 zeta / delta)^2.
    """
    if not 0.0 < psi < 1.0 or not delta > 0.0:
        raise CalibrationError(f"need 0 < psi < 1 and delta > 0, got psi={psi!r}, delta={delta!r}")

    def equations(v):
        zeta, shift = v
        p1 = norm_sf(zeta - shift)
        p2 = norm_sf(zeta)
        return [p1 * (1.0 - p2) - psi, p1 * p2 - (1.0 - p1) * (1.0 - p2)]

    sol = sp_optimize.root(equations, x0=[0.5, 1.0], method="hybr", options={"xtol": 1e-14})
    zeta, shift = (float(v) for v in sol.x)
    if not sol.success or max(abs(r) for r in equations(sol.x)) > 1e-8:
        raise CalibrationError(f"threshold equations did not converge: {sol.message}")
    closed = std_normal_quantile(math.sqrt(psi))
    if abs(zeta - closed) > 1e-6:
        raise CalibrationError(f"numeric threshold {zeta!r} disagrees with closed form {closed!r}")
    if shift < -1e-10:
        raise CalibrationError(f"psi={psi!r} admits no solution with positive information")
    shift = max(shift, 0.0)
    info1_req = (shift / delta) ** 2
    log.debug("Selection threshold calibrated", psi=psi, delta=delta, zeta=zeta, info1_req=info1_req)
    return zeta, info1_req


def _stage1_means(theta: ThetaConfig, info: StageInfo) -> Tuple[float, float]:
    return theta.theta1 * math.sqrt(info.s1), theta.theta2 * math.sqrt(info.s2)


def selection_probabilities(theta: ThetaConfig, info1: float, info2: float, zeta: float) -> Dict[Selection, float]:
    p1 = float(norm_sf(zeta - theta.theta1 * math.sqrt(info1)))
    p2 = float(norm_sf(zeta - theta.theta2 * math.sqrt(info2)))
    return {
        Selection.S1: p1 * (1.0 - p2),
        Selection.S2: (1.0 - p1) * p2,
        Selection.F: p1 * p2,
        Selection.NONE: (1.0 - p1) * (1.0 - p2),
    }


def joint_density_subgroup(z, w: Group, theta: ThetaConfig, info: StageInfo, zeta: float):
    """Density of (Z_w, W=w) at stage 1: a normal density truncated below at zeta."""
    w = Group(w)
    if w is Group.F:
        raise ValueError("use joint_density_full for the full population")
    mu1, mu2 = _stage1_means(theta, info)
    mu_w, mu_o = (mu1, mu2) if w is Group.S1 else (mu2, mu1)
    z = np.asarray(z, dtype=float)
    dens = np.where(z > zeta, norm_cdf(zeta - mu_o) * norm_pdf(z - mu_w), 0.0)
    return float(dens) if dens.ndim == 0 else dens


def _full_geometry(theta: ThetaConfig, info: StageInfo, lam: float):
    mu1, mu2 = _stage1_means(theta, info)
    c1, c2 = full_weights(lam, info.s1, info.s2)
    return mu1, mu2, c1, c2, c1 * mu1 + c2 * mu2


def joint_density_full(z, theta: ThetaConfig, info: StageInfo, lam: float, zeta: float):
    """
    Density of (Z_F, W=F) at stage 1 on the event {Z_1 > zeta, Z_2 > zeta}.

    Given Z_F = z, Z_1 is normal with mean mu1 + c1 (z - mu_F) and sd c2, and
    Z_2 > zeta is the same as Z_1 < (z - c2 zeta) / c1, so the integral over
    the S1 contribution reduces to a difference of normal cdfs.
    """
    mu1, _, c1, c2, mu_f = _full_geometry(theta, info, lam)
    z = np.asarray(z, dtype=float)
    centre = mu1 + c1 * (z - mu_f)
    upper = (z - c2 * zeta) / c1
    mass = np.maximum(norm_cdf((upper - centre) / c2) - norm_cdf((zeta - centre) / c2), 0.0)
    dens = np.where(z > (c1 + c2) * zeta, norm_pdf(z - mu_f) * mass, 0.0)
    return float(dens) if dens.ndim == 0 else dens


def joint_density_full_quadrature(z: float, theta: ThetaConfig, info: StageInfo, lam: float, zeta: float) -> float:
    """The same density as joint_density_full by explicit integration over Z_1."""
    mu1, mu2, c1, c2, _ = _full_geometry(theta, info, lam)
    upper = (z - c2 * zeta) / c1
    if upper <= zeta:
        return 0.0

    def integrand(u):
        return float(norm_pdf(u - mu1) * norm_pdf((z - c1 * u) / c2 - mu2) / c2)

    return integrate(integrand, zeta, upper)


def stage2_tail(theta_w: float, info_w1: float, info_w2: float, z1, threshold: float,
                side: Literal["upper", "lower"] = "upper"):
    """P(Z^(2) > threshold | Z^(1) = z1) (or <= for side='lower') under the canonical joint law."""
    if not info_w2 > info_w1 > 0:
        raise OrderingError(f"stage-2 information {info_w2!r} must exceed stage-1 information {info_w1!r}")
    ratio = info_w1 / info_w2
    z1 = np.asarray(z1, dtype=float)
    mean = theta_w * math.sqrt(info_w2) + math.sqrt(ratio) * (z1 - theta_w * math.sqrt(info_w1))
    sd = math.sqrt(1.0 - ratio)
    if threshold == math.inf:
        upper = np.zeros_like(mean)
    elif threshold == -math.inf:
        upper = np.ones_like(mean)
    else:
        upper = norm_sf((threshold - mean) / sd)
    out = upper if side == "upper" else 1.0 - upper
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ErrorSpend:
    alpha1: float
    alpha2: float
    beta1: float
    beta2: float


def spend_fraction(info_f: float, i_max: float) -> float:
    return min(info_f / i_max, 1.0)


def spend(alpha: float, beta: float, info_f: Sequence[float], i_max: float) -> ErrorSpend:
    """Quadratic spending f(t) = min(alpha t^2, alpha), g(t) = min(beta t^2, beta)."""
    if not i_max > 0:
        raise ValueError(f"i_max must be positive, got {i_max!r}")
    t1 = spend_fraction(info_f[0], i_max)
    t2 = spend_fraction(info_f[1], i_max) if len(info_f) > 1 else t1
    a1, b1 = alpha * t1 ** 2, beta * t1 ** 2
    a2 = max(alpha * t2 ** 2 - a1, 0.0)
    b2 = max(beta * t2 ** 2 - b1, 0.0)
    if t2 >= 1.0:
        a2, b2 = alpha - a1, beta - b1
    return ErrorSpend(a1, a2, b1, b2)


def _panel_integral(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, width: float = 1.0) -> float:
    """Composite 16-point Gauss-Legendre rule on [lo, hi], vectorised."""
    if not hi > lo:
        return 0.0
    n = max(1, int(math.ceil((hi - lo) / width)))
    edges = np.linspace(lo, hi, n + 1)
    half = 0.5 * np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    x = (mids[:, None] + half[:, None] * _PANEL.nodes[None, :]).ravel()
    w = (half[:, None] * _PANEL.weights[None, :]).ravel()
    return float(np.dot(w, f(x)))


def _branch_window(w: Group, theta: ThetaConfig, info: StageInfo, lam: float, zeta: float,
                   lo: float, hi: float) -> Tuple[float, float]:
    if w is Group.F:
        *_, c1, c2, centre = _full_geometry(theta, info, lam)
        support = (c1 + c2) * zeta
    else:
        mu1, mu2 = _stage1_means(theta, info)
        centre = mu1 if w is Group.S1 else mu2
        support = zeta
    return max(lo, support), min(hi, centre + _TAIL_SPAN)


def _branch_density(w: Group, theta: ThetaConfig, info: StageInfo, lam: float, zeta: float):
    if w is Group.F:
        return lambda z: joint_density_full(z, theta, info, lam, zeta)
    return lambda z: joint_density_subgroup(z, w, theta, info, zeta)


def stage1_tail(b: float, w: Group, theta: ThetaConfig, info: StageInfo, lam: float, zeta: float) -> float:
    """Integral of the stage-1 joint density of branch w over (b, inf)."""
    if b == math.inf:
        return 0.0
    if w is Group.F:
        lo, hi = _branch_window(w, theta, info, lam, zeta, b, math.inf)
        return _panel_integral(_branch_density(w, theta, info, lam, zeta), lo, hi)
    mu1, mu2 = _stage1_means(theta, info)
    mu_w, mu_o = (mu1, mu2) if w is Group.S1 else (mu2, mu1)
    return float(norm_cdf(zeta - mu_o) * norm_sf(max(b, zeta) - mu_w))


def _solve_decreasing(g: Callable[[float], float], target: float, lo: float, hi: float = 10.0) -> float:
    """Root of g(x) = target for g decreasing, widening the bracket on either side as needed."""
    step = 1.0
    while g(lo) < target:
        if lo < -1e3:
            raise BracketError(lo, hi, g(lo) - target, g(hi) - target)
        lo -= step
        step *= 2.0
    while g(hi) > target:
        if hi > 1e3:
            raise BracketError(lo, hi, g(lo) - target, g(hi) - target)
        hi *= 2.0
    return find_root(lambda x: g(x) - target, (lo, hi), tol=1e-13)


def solve_stage1_boundaries(alpha1: float, beta1: float, spec: DesignSpec, info: StageInfo) -> Tuple[float, float]:
    """
    Stage-1 futility and efficacy bounds.

    b1 spends alpha1 over all selection branches under the global null; a1
    spends beta1 on the S1 branch under the alternative, conditional on S1
    being selected. Missing bounds come back as -inf / +inf.
    """
    null, alt = spec.theta_null, spec.theta_alt
    branches = (Group.S1, Group.S2, Group.F)

    def total(b):
        return sum(stage1_tail(b, w, null, info, spec.lam, spec.zeta) for w in branches)

    if alpha1 <= 0:
        b1 = math.inf
    else:
        available = total(-math.inf)
        if alpha1 >= available:
            raise InfeasibleSpendError(alpha1, available, "stage-1 alpha")
        c1, c2 = full_weights(spec.lam, info.s1, info.s2)
        b1 = _solve_decreasing(total, alpha1, min(spec.zeta, (c1 + c2) * spec.zeta) - 1.0)

    if beta1 <= 0:
        a1 = -math.inf
    else:
        mu1 = spec.delta * math.sqrt(info.s1)
        floor = float(norm_cdf(spec.zeta - mu1))
        a1 = mu1 + std_normal_quantile(floor + beta1 * (1.0 - floor))
    if a1 > b1:
        a1 = b1
    return a1, b1


def continuation_mass(spec: DesignSpec, info: StageInfo, a1: float, b1: float,
                      theta: Optional[ThetaConfig] = None) -> float:
    theta = theta or spec.theta_null
    total = 0.0
    for w in (Group.S1, Group.S2, Group.F):
        lo, hi = _branch_window(w, theta, info, spec.lam, spec.zeta, a1, b1)
        total += _panel_integral(_branch_density(w, theta, info, spec.lam, spec.zeta), lo, hi)
    return total


def stage2_rejection_mass(b2: float, spec: DesignSpec, info: InfoState, a1: float, b1: float,
                          theta: Optional[ThetaConfig] = None) -> float:
    """Sum over branches of P(a1 < Z^(1) <= b1, W=w, Z^(2) > b2)."""
    theta = theta or spec.theta_null
    total = 0.0
    for w in (Group.S1, Group.S2, Group.F):
        lo, hi = _branch_window(w, theta, info.stage1, spec.lam, spec.zeta, a1, b1)
        if not hi > lo:
            continue
        i1, i2 = info.pair(w)
        dens = _branch_density(w, theta, info.stage1, spec.lam, spec.zeta)
        total += _panel_integral(lambda z: dens(z) * stage2_tail(theta[w], i1, i2, z, b2), lo, hi)
    return total


def _power_branch_mass(a2: float, spec: DesignSpec, info: InfoState, a1: float, b1: float) -> Tuple[float, float]:
    """(P(continue, Z_1^(2) <= a2 | S1), P(continue | S1)) under the alternative."""
    mu1 = spec.delta * math.sqrt(info.stage1.s1)
    lo, hi = max(a1, spec.zeta), min(b1, mu1 + _TAIL_SPAN)
    selected = float(norm_sf(spec.zeta - mu1))

    def dens(z):
        return norm_pdf(z - mu1) / selected

    cont = _panel_integral(dens, lo, hi)
    if a2 == -math.inf:
        return 0.0, cont
    i1, i2 = info.pair(Group.S1)
    miss = _panel_integral(lambda z: dens(z) * stage2_tail(spec.delta, i1, i2, z, a2, "lower"), lo, hi)
    return miss, cont


def solve_stage2_boundaries(alpha2: float, beta2: float, spec: DesignSpec, info: InfoState,
                            a1: float, b1: float) -> Tuple[float, float]:
    """
    Final-analysis bounds (a2, b2) from the stage-2 spends.

    Returned as solved; callers running a trial then set a2 = b2.
    """
    for w in (Group.S1, Group.S2, Group.F):
        i1, i2 = info.pair(w)
        if not i2 > i1:
            raise OrderingError(f"group {w.value}: stage-2 information {i2!r} <= stage-1 {i1!r}")

    if alpha2 <= 0:
        b2 = math.inf
    else:
        available = continuation_mass(spec, info.stage1, a1, b1)
        if alpha2 > available * (1.0 + 1e-9) + 1e-15:
            raise InfeasibleSpendError(alpha2, available, "stage-2 alpha")
        if alpha2 >= available:
            b2 = -math.inf
        else:
            b2 = _solve_decreasing(lambda b: stage2_rejection_mass(b, spec, info, a1, b1), alpha2, -10.0)
            while stage2_rejection_mass(b2, spec, info, a1, b1) < alpha2 - 1e-9 and b2 > -Z_CAP:
                b2 = _solve_decreasing(lambda b: stage2_rejection_mass(b, spec, info, a1, b1), alpha2, 2 * b2 - 10.0, b2)

    if beta2 <= 0:
        a2 = -math.inf
    else:
        _, cont = _power_branch_mass(math.inf, spec, info, a1, b1)
        if beta2 >= cont:
            a2 = math.inf
        else:
            def miss(a):
                return _power_branch_mass(a, spec, info, a1, b1)[0]

            hi = 10.0
            while miss(hi) < beta2:
                hi *= 2.0
            lo = -10.0
            while miss(lo) > beta2:
                lo *= 2.0
            a2 = find_root(lambda a: miss(a) - beta2, (lo, hi), tol=1e-13)
    return a2, b2


class Boundaries(BaseModel):
    model_config = ConfigDict(frozen=True)

    a1: float
    b1: float
    a2: float
    b2: float
    alpha1: float = Field(ge=0)
    alpha2: float = Field(ge=0)
    beta1: float = Field(ge=0)
    beta2: float = Field(ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.a1 > self.b1 or self.a2 > self.b2:
            raise ValueError(f"boundaries out of order: ({self.a1}, {self.b1}), ({self.a2}, {self.b2})")
        return self


def boundaries_for(spec: DesignSpec, info: InfoState, i_max: float) -> Boundaries:
    """Both stages' bounds at the given information, final analysis at a2 = b2."""
    assert info.stage2 is not None
    spends = spend(spec.alpha, spec.beta, (info.stage1.f, info.stage2.f), i_max)
    a1, b1 = solve_stage1_boundaries(spends.alpha1, spends.beta1, spec, info.stage1)
    _, b2 = solve_stage2_boundaries(spends.alpha2, spends.beta2, spec, info, a1, b1)
    return Boundaries(a1=a1, b1=b1, a2=b2, b2=b2, alpha1=spends.alpha1, alpha2=spends.alpha2,
                      beta1=spends.beta1, beta2=spends.beta2)


class EventsPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    m1: float = Field(gt=0)
    m2: float = Field(gt=0)
    mF: float = Field(gt=0)
    d1_stage1: int = Field(gt=0)
    d2_stage1: float = Field(gt=0, description="Expected S2 events at the stage-1 analysis")
    dF_stage1: float = Field(gt=0, description="Expected full-population events at the stage-1 analysis")
    d_total: int = Field(gt=0)
    i_max: float = Field(gt=0)

    @classmethod
    def from_event_counts(cls, spec: DesignSpec, d1_stage1: int, d_total: int) -> "EventsPlan":
        """Plan from fixed event counts with a common events-per-information constant."""
        m = d1_stage1 / spec.info1_req
        d2, d_f = _expected_stage1_events(spec.lam, d1_stage1)
        return cls(m1=m, m2=m, mF=m, d1_stage1=d1_stage1, d2_stage1=d2, dF_stage1=d_f,
                   d_total=d_total, i_max=d_total / m)

    def planned_info(self, lam: float, i_max: Optional[float] = None) -> InfoState:
        i_max = self.i_max if i_max is None else i_max
        stage1 = StageInfo.from_subgroups(lam, self.d1_stage1 / self.m1, self.d2_stage1 / self.m2)
        stage2 = StageInfo(self.mF * i_max / self.m1, self.mF * i_max / self.m2, i_max)
        events1 = {Group.S1: self.d1_stage1, Group.S2: self.d2_stage1, Group.F: self.dF_stage1}
        events2 = {g: self.mF * i_max for g in Group}
        return InfoState(lam, stage1, stage2, events1, events2, frozenset(Group))


def _expected_stage1_events(lam: float, d1_stage1: int) -> Tuple[float, float]:
    return (1.0 - lam) * d1_stage1 / lam, d1_stage1 / lam


@dataclass(frozen=True)
class MConstants:
    m1: float
    m2: float
    mF: float
    r_squared: Dict[str, float] = field(default_factory=dict)
    points: Dict[str, int] = field(default_factory=dict)
    dropped: Dict[str, List[int]] = field(default_factory=dict)

    @classmethod
    def common(cls, m: float) -> "MConstants":
        return cls(m, m, m)


def _imax_gap(spec: DesignSpec, draft: EventsPlan, i_max: float) -> float:
    info = draft.planned_info(spec.lam, i_max)
    try:
        bounds = boundaries_for_raw(spec, info, i_max)
    except (OrderingError, InfeasibleSpendError):
        return -2 * Z_CAP
    a2, b2 = (min(max(v, -Z_CAP), Z_CAP) for v in bounds)
    return a2 - b2


def boundaries_for_raw(spec: DesignSpec, info: InfoState, i_max: float) -> Tuple[float, float]:
    spends = spend(spec.alpha, spec.beta, (info.stage1.f, info.stage2.f), i_max)
    a1, b1 = solve_stage1_boundaries(spends.alpha1, spends.beta1, spec, info.stage1)
    return solve_stage2_boundaries(spends.alpha2, spends.beta2, spec, info, a1, b1)


def find_imax(spec: DesignSpec, draft: EventsPlan, tol: float = 1e-6) -> float:
    """
    Maximum full-population information at which the planned a2 and b2 meet.

    Bisection on the planned information sequence; the upper end of the
    bracket is doubled (up to ten times) if no sign change is found.
    """
    info_f1 = draft.planned_info(spec.lam).stage1.f
    lo, hi = 1.01 * info_f1, 100.0 * info_f1
    g_lo, g_hi = _imax_gap(spec, draft, lo), _imax_gap(spec, draft, hi)
    expansions = 0
    while g_hi < 0 and expansions < 10:
        lo, g_lo = hi, g_hi
        hi *= 2.0
        g_hi = _imax_gap(spec, draft, hi)
        expansions += 1
    if g_lo > 0 or g_hi < 0:
        raise SearchError(f"a2 - b2 does not change sign on [{lo:.4g}, {hi:.4g}]")
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gap = _imax_gap(spec, draft, mid)
        if abs(gap) < tol:
            break
        if gap < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    log.info("Maximum information found", i_max=mid, gap=_imax_gap(spec, draft, mid))
    return mid


def plan_events(spec: DesignSpec, m: MConstants) -> EventsPlan:
    d1 = int(math.ceil(spec.info1_req * m.m1 - 1e-9))
    d2, d_f = _expected_stage1_events(spec.lam, d1)
    draft = EventsPlan(m1=m.m1, m2=m.m2, mF=m.mF, d1_stage1=d1, d2_stage1=d2, dF_stage1=d_f,
                       d_total=max(d1, 1), i_max=1.0)
    i_max = find_imax(spec, draft)
    d_total = int(math.ceil(m.mF * i_max - 1e-9))
    return draft.model_copy(update={"i_max": i_max, "d_total": d_total})


def predict_info(info_j1: float, d_j1: float, d_total: float) -> float:
    if not d_j1 > 0:
        raise PredictionError(f"cannot predict information from {d_j1!r} stage-1 events")
    return info_j1 * d_total / d_j1


def calibrate_m(params, rng, method: str = "cox", n_patients: int = 5000, accrual_rate: float = 200.0,
                n_snapshots: int = 40, min_events: int = 20) -> MConstants:
    """
    Events-per-information constants from one large simulated population.

    For each group the population is censored at a ladder of event counts,
    the chosen estimator supplies the information at each rung, and the
    events are regressed on information through the origin.
    """
    from enrichment.estimators import fit_group
    from enrichment.simdata import simulate_population, snapshot_at_events

    dataset = simulate_population(params, n_patients, accrual_rate, rng)
    slopes, r_squared, points, dropped = {}, {}, {}, {}
    for group in Group:
        available = dataset.total_events(group)
        ladder = np.unique(np.linspace(min(min_events, available), available, n_snapshots).astype(int))
        ladder = ladder[ladder > 0]
        d_vals, i_vals, failed = [], [], []
        for d in ladder:
            snap = snapshot_at_events(dataset, group, int(d))
            try:
                if group is Group.F:
                    r1 = fit_group(method, snap, Group.S1, 1)
                    r2 = fit_group(method, snap, Group.S2, 1)
                    ok = r1.converged and r2.converged
                    info = combine_info(params.lam, r1.info, r2.info) if ok else math.nan
                else:
                    res = fit_group(method, snap, group, 1)
                    ok, info = res.converged, res.info
            except EstimationError:
                ok, info = False, math.nan
            if not ok or not np.isfinite(info) or info <= 0:
                failed.append(int(d))
                continue
            d_vals.append(float(snap.event_counts[group]))
            i_vals.append(float(info))
        if len(d_vals) < 2:
            raise CalibrationError(f"too few usable snapshots for group {group.value}")
        d_arr, i_arr = np.array(d_vals), np.array(i_vals)
        slope = float(np.dot(d_arr, i_arr) / np.dot(i_arr, i_arr))
        resid = d_arr - slope * i_arr
        slopes[group] = slope
        r_squared[group.value] = float(1.0 - np.dot(resid, resid) / np.dot(d_arr, d_arr))
        points[group.value] = len(d_vals)
        dropped[group.value] = failed
        log.info("Events per information calibrated", group=group.value, m=slope, r2=r_squared[group.value], dropped=len(failed))
    return MConstants(slopes[Group.S1], slopes[Group.S2], slopes[Group.F], r_squared, points, dropped)


class DesignReport(BaseModel):
    """Flat key-value design document written by the calibrate command."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    psi: float
    delta: float
    lam: float = Field(alias="lambda")
    alpha: float
    beta: float
    zeta: float
    info1_req: float
    m1: float
    m2: float
    mF: float
    d1_stage1: int
    d_total: int
    i_max: float
    a1: float
    b1: float
    a2: float
    b2: float
    alpha_spend: List[float]
    beta_spend: List[float]

    @classmethod
    def build(cls, spec: DesignSpec, plan: EventsPlan) -> "DesignReport":
        bounds = TrialDesign(spec, plan).planned_boundaries
        return cls(psi=spec.psi, delta=spec.delta, lam=spec.lam, alpha=spec.alpha, beta=spec.beta,
                   zeta=spec.zeta, info1_req=spec.info1_req, m1=plan.m1, m2=plan.m2, mF=plan.mF,
                   d1_stage1=plan.d1_stage1, d_total=plan.d_total, i_max=plan.i_max,
                   a1=bounds.a1, b1=bounds.b1, a2=bounds.a2, b2=bounds.b2,
                   alpha_spend=[bounds.alpha1, bounds.alpha2], beta_spend=[bounds.beta1, bounds.beta2])

    def to_design(self) -> "TrialDesign":
        spec = DesignSpec(psi=self.psi, delta=self.delta, lam=self.lam, alpha=self.alpha, beta=self.beta,
                          zeta=self.zeta, info1_req=self.info1_req)
        d2, d_f = _expected_stage1_events(self.lam, self.d1_stage1)
        plan = EventsPlan(m1=self.m1, m2=self.m2, mF=self.mF, d1_stage1=self.d1_stage1, d2_stage1=d2,
                          dF_stage1=d_f, d_total=self.d_total, i_max=self.i_max)
        return TrialDesign(spec, plan)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.model_dump(by_alias=True), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "DesignReport":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"unreadable design report {path}: {e}") from e


@dataclass(frozen=True)
class TrialDesign:
    spec: DesignSpec
    plan: EventsPlan

    @cached_property
    def planned_info(self) -> InfoState:
        return self.plan.planned_info(self.spec.lam)

    @cached_property
    def planned_boundaries(self) -> Boundaries:
        return boundaries_for(self.spec, self.planned_info, self.plan.i_max)
