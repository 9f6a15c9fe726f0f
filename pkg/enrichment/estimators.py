"""
Analysis engines mapping a snapshot of one group to (theta_hat, information, Z).

All engines report on the benefit scale: theta_hat > 0 favours treatment.

- cox:        partial-likelihood Cox model on the treatment indicator
- cox_tvc:    Cox model with the last observed biomarker as a time-varying covariate
- cond_score: conditional score for a hazard depending on the true biomarker trajectory
- rmst:       restricted mean survival difference under the fitted joint model
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from enrichment.design import Group
from enrichment.errors import (
    DerivativeError,
    DomainError,
    EstimationError,
    IneligibleMarkerError,
    LikelihoodError,
    NonIdentifiableError,
    ParameterError,
)
from enrichment.numerics import (
    gauss_hermite,
    gauss_legendre,
    gaussian_grid,
    minimize,
    numeric_gradient,
    numeric_hessian,
    numeric_jacobian,
)
from enrichment.simdata import BASELINE_JUMP, SCHEDULE, AnalysisSnapshot, SubgroupParams, cumulative_hazard

log = structlog.get_logger(__name__)

MAX_NEWTON = 50


class Method(str, Enum):
    COND_SCORE = "cond_score"
    COX = "cox"
    COX_TVC = "cox_tvc"
    RMST = "rmst"


class AnalysisResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method
    group: Group
    k: int = Field(ge=1, le=2)
    theta_hat: float
    info: float
    z: float
    converged: bool
    iterations: int = 0
    residual: float = math.nan
    events: int = 0

    @classmethod
    def from_estimate(cls, method: Method, group: Group, k: int, theta_hat: float, info: float,
                      converged: bool, iterations: int = 0, residual: float = math.nan,
                      events: int = 0) -> "AnalysisResult":
        ok = bool(converged and np.isfinite(theta_hat) and np.isfinite(info) and info > 0)
        z = theta_hat * math.sqrt(info) if ok else math.nan
        return cls(method=method, group=group, k=k, theta_hat=float(theta_hat), info=float(info), z=float(z),
                   converged=ok, iterations=iterations, residual=float(residual), events=events)

    def row(self) -> Dict[str, object]:
        return {"method": self.method.value, "group": self.group.value, "k": self.k,
                "theta_hat": self.theta_hat, "info": self.info, "z": self.z, "converged": self.converged}


def _require_both_arms(status: np.ndarray, arm: np.ndarray, what: str = "events") -> None:
    ev = status.astype(bool)
    if not ev.any() or ev[arm == 1].sum() == 0 or ev[arm == 0].sum() == 0:
        raise NonIdentifiableError(f"{what} are needed in both arms, got {int(ev[arm == 1].sum())} treated "
                                   f"and {int(ev[arm == 0].sum())} control")


# ---------------------------------------------------------------------------
# Cox model on the treatment indicator
# ---------------------------------------------------------------------------

def _cox_terms(beta: float, time: np.ndarray, status: np.ndarray, arm: np.ndarray):
    ev = status.astype(bool)
    t_ev, x_ev = time[ev], arm[ev]
    t1, t0 = np.sort(time[arm == 1]), np.sort(time[arm == 0])
    n1 = t1.size - np.searchsorted(t1, t_ev, side="left")
    n0 = t0.size - np.searchsorted(t0, t_ev, side="left")
    r = math.exp(beta)
    s0 = n0 + n1 * r
    p = n1 * r / s0
    score = float(np.sum(x_ev - p))
    info = float(np.sum(p * (1.0 - p)))
    loglik = float(np.sum(beta * x_ev - np.log(s0)))
    return score, info, loglik


def cox_score_residuals(beta: float, time: np.ndarray, status: np.ndarray, arm: np.ndarray) -> np.ndarray:
    """Per-subject contributions to the partial-likelihood score; they sum to the score."""
    ev = status.astype(bool)
    order = np.argsort(time[ev], kind="stable")
    t_ev, x_ev = time[ev][order], arm[ev][order]
    t1, t0 = np.sort(time[arm == 1]), np.sort(time[arm == 0])
    n1 = t1.size - np.searchsorted(t1, t_ev, side="left")
    n0 = t0.size - np.searchsorted(t0, t_ev, side="left")
    r = math.exp(beta)
    s0 = n0 + n1 * r
    p = n1 * r / s0
    treated = np.concatenate([[0.0], np.cumsum((1.0 - p) * r / s0)])
    control = np.concatenate([[0.0], np.cumsum(-p / s0)])
    upto = np.searchsorted(t_ev, time, side="right")
    exposure = np.where(arm == 1, treated[upto], control[upto])
    p_own = np.empty(time.size)
    own = np.searchsorted(t_ev, time, side="left")
    p_own[ev] = p[np.minimum(own[ev], p.size - 1)]
    failure = np.where(ev, arm - np.where(ev, p_own, 0.0), 0.0)
    return failure - exposure


def fit_cox(snapshot: AnalysisSnapshot, group: Group, k: int) -> AnalysisResult:
    data = snapshot.restrict(group)
    time, status, arm = data.time, data.status, data.arm.astype(float)
    _require_both_arms(status, arm)
    beta, iterations = 0.0, 0
    score, info, loglik = _cox_terms(beta, time, status, arm)
    for iterations in range(1, MAX_NEWTON + 1):
        step = score / info
        for _ in range(30):
            new = _cox_terms(beta + step, time, status, arm)
            if new[2] >= loglik - 1e-12:
                break
            step *= 0.5
        beta += step
        score, info, loglik = new
        if abs(step) < 1e-10:
            break
    converged = abs(score) < 1e-6 * max(1.0, info)
    log.debug("Cox model fitted", group=Group(group).value, k=k, eta=beta, info=info, iterations=iterations)
    return AnalysisResult.from_estimate(Method.COX, group, k, -beta, info, converged, iterations,
                                        abs(score), int(status.sum()))


# ---------------------------------------------------------------------------
# Risk-set pair tables shared by the biomarker-based engines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkerTable:
    """Observed biomarker readings of a snapshot in local CSR form with prefix sums."""
    offsets: np.ndarray
    values: np.ndarray
    cum_w: np.ndarray
    cum_vw: np.ndarray
    cum_ww: np.ndarray

    @classmethod
    def from_snapshot(cls, snap: AnalysisSnapshot) -> "MarkerTable":
        n_obs = snap.n_obs.astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum(n_obs)])
        position = np.arange(offsets[-1]) - np.repeat(offsets[:-1], n_obs)
        values = snap.values[np.repeat(snap.start, n_obs) + position]
        visits = SCHEDULE[position]

        def prefix(x):
            return np.concatenate([[0.0], np.cumsum(x)])

        return cls(offsets, values, prefix(values), prefix(visits * values), prefix(values * values))

    def sums(self, subj: np.ndarray, k: np.ndarray):
        """(sum W, sum v W, sum W^2) over each subject's first k readings."""
        lo = self.offsets[subj]
        hi = lo + k
        return (self.cum_w[hi] - self.cum_w[lo], self.cum_vw[hi] - self.cum_vw[lo],
                self.cum_ww[hi] - self.cum_ww[lo])


_CUM_V = np.concatenate([[0.0], np.cumsum(SCHEDULE)])
_CUM_VV = np.concatenate([[0.0], np.cumsum(SCHEDULE ** 2)])


def _visits_by(u) -> np.ndarray:
    return np.searchsorted(SCHEDULE, u, side="right")


def _line_fit(k, sv, svv, sw, svw, u):
    vbar = sv / k
    sxx = svv - k * vbar * vbar
    wbar = sw / k
    slope = (svw - k * vbar * wbar) / sxx
    return wbar + slope * (u - vbar), 1.0 / k + (u - vbar) ** 2 / sxx


def ols_history(visit_times: np.ndarray, values: np.ndarray, u: float) -> Tuple[float, float, int]:
    """
    Least-squares line through the readings taken at or before u.

    Returns the fitted value at u, the prediction-variance factor
    1/m + (u - vbar)^2 / Sxx (without sigma^2) and the number of readings used.
    """
    visit_times = np.asarray(visit_times, dtype=float)
    used = visit_times <= u
    m = int(used.sum())
    if m < 2:
        raise IneligibleMarkerError(f"{m} reading(s) at or before t={u!r}; at least two are needed")
    v, w = visit_times[used], np.asarray(values, dtype=float)[used]
    x_hat, psi = _line_fit(m, v.sum(), (v * v).sum(), w.sum(), (v * w).sum(), u)
    return float(x_hat), float(psi), m


@dataclass(frozen=True)
class RiskSets:
    """
    One row per failure, one pair per (failure, subject at risk), pairs grouped
    by failure in time order. `starts` marks each failure's first pair.
    """
    event_subj: np.ndarray
    event_time: np.ndarray
    pair_event: np.ndarray
    pair_subj: np.ndarray
    starts: np.ndarray
    is_failure: np.ndarray

    @property
    def n_events(self) -> int:
        return int(self.event_subj.size)

    @classmethod
    def build(cls, time: np.ndarray, status: np.ndarray, entry: np.ndarray, ids: np.ndarray) -> "RiskSets":
        """Subject i is at risk at u when entry[i] <= u <= time[i]."""
        n = time.size
        order = np.argsort(time, kind="stable")
        t_sorted = time[order]
        fail = np.flatnonzero(status.astype(bool) & (entry <= time))
        fail = fail[np.lexsort((ids[fail], time[fail]))]
        event_time = time[fail]
        first = np.searchsorted(t_sorted, event_time, side="left")
        counts = n - first
        pair_event = np.repeat(np.arange(fail.size), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pair_subj = order[np.repeat(first, counts) + local]
        keep = entry[pair_subj] <= event_time[pair_event]
        pair_event, pair_subj = pair_event[keep], pair_subj[keep]
        starts = np.searchsorted(pair_event, np.arange(fail.size), side="left")
        is_failure = pair_subj == fail[pair_event]
        return cls(fail, event_time, pair_event, pair_subj, starts, is_failure)

    def sum_by_event(self, x: np.ndarray) -> np.ndarray:
        return np.add.reduceat(x, self.starts, axis=0)

    def max_by_event(self, x: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(x, self.starts)


# ---------------------------------------------------------------------------
# Cox model with a time-varying biomarker covariate
# ---------------------------------------------------------------------------

class PartialLikelihood:
    """Breslow partial likelihood on a pair table with pair-level covariates (pairs x p)."""

    def __init__(self, risk: RiskSets, covariates: np.ndarray):
        self.risk = risk
        self.x = np.asarray(covariates, dtype=float)
        self.x_fail = self.x[risk.is_failure]

    def _weights(self, beta: np.ndarray):
        lin = self.x @ beta
        shift = self.risk.max_by_event(lin)
        w = np.exp(lin - shift[self.risk.pair_event])
        s0 = self.risk.sum_by_event(w)
        s1 = self.risk.sum_by_event(w[:, None] * self.x)
        return lin, shift, w, s0, s1 / s0[:, None]

    def loglik(self, beta: np.ndarray) -> float:
        lin, shift, _, s0, _ = self._weights(beta)
        return float(np.sum(lin[self.risk.is_failure] - shift - np.log(s0)))

    def score_and_information(self, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        _, _, w, s0, mean = self._weights(beta)
        score = np.sum(self.x_fail - mean, axis=0)
        p = (w / s0[self.risk.pair_event])[:, None]
        centred = self.x - mean[self.risk.pair_event]
        info = (centred * p).T @ centred
        return score, info

    def residuals(self, beta: np.ndarray, n_subjects: int) -> np.ndarray:
        _, _, w, s0, mean = self._weights(beta)
        p = w / s0[self.risk.pair_event]
        centred = self.x - mean[self.risk.pair_event]
        out = np.zeros((n_subjects, self.x.shape[1]))
        np.add.at(out, self.risk.event_subj, self.x_fail - mean)
        np.add.at(out, self.risk.pair_subj, -p[:, None] * centred)
        return out


def _newton_partial(lik: PartialLikelihood, beta: np.ndarray, free: np.ndarray) -> Tuple[np.ndarray, int, bool]:
    loglik = lik.loglik(beta)
    for it in range(1, MAX_NEWTON + 1):
        score, info = lik.score_and_information(beta)
        sub = info[np.ix_(free, free)]
        try:
            step_free = np.linalg.solve(sub, score[free])
        except np.linalg.LinAlgError as e:
            raise NonIdentifiableError("singular partial-likelihood information") from e
        step = np.zeros_like(beta)
        step[free] = step_free
        for _ in range(30):
            trial = lik.loglik(beta + step)
            if np.isfinite(trial) and trial >= loglik - 1e-12:
                break
            step *= 0.5
        beta, loglik = beta + step, trial
        if np.max(np.abs(step)) < 1e-10:
            score, _ = lik.score_and_information(beta)
            return beta, it, bool(np.max(np.abs(score[free])) < 1e-6 * max(1.0, lik.risk.n_events))
    return beta, MAX_NEWTON, False


def _locf_covariate(snap: AnalysisSnapshot, table: MarkerTable, risk: RiskSets) -> np.ndarray:
    k = np.minimum(snap.n_obs[risk.pair_subj], _visits_by(risk.event_time)[risk.pair_event])
    return table.values[table.offsets[risk.pair_subj] + k - 1]


def fit_cox_tvc(snapshot: AnalysisSnapshot, group: Group, k: int,
                gamma_fixed: Optional[float] = None) -> AnalysisResult:
    """
    Two-covariate Cox fit (biomarker carried forward, treatment). With
    gamma_fixed the biomarker coefficient is held at that value.
    """
    data = snapshot.restrict(group)
    _require_both_arms(data.status, data.arm)
    entry = np.where(data.n_obs >= 1, 0.0, np.inf)
    risk = RiskSets.build(data.time, data.status, entry, data.ids)
    table = MarkerTable.from_snapshot(data)
    x = np.column_stack([_locf_covariate(data, table, risk), data.arm[risk.pair_subj].astype(float)])
    lik = PartialLikelihood(risk, x)

    beta = np.array([0.0 if gamma_fixed is None else gamma_fixed, 0.0])
    free = np.array([gamma_fixed is None, True])
    _, info0 = lik.score_and_information(beta)
    sub0 = info0[np.ix_(free, free)]
    if np.linalg.cond(sub0) > 1e12:
        raise NonIdentifiableError("biomarker and treatment are collinear within the risk sets")

    beta, iterations, converged = _newton_partial(lik, beta, free)
    score, info = lik.score_and_information(beta)
    if gamma_fixed is None:
        try:
            info_eta = 1.0 / np.linalg.inv(info)[1, 1]
        except np.linalg.LinAlgError:
            info_eta, converged = math.nan, False
    else:
        info_eta = info[1, 1]
    log.debug("Time-varying Cox model fitted", group=Group(group).value, k=k, gamma=beta[0], eta=beta[1], info=info_eta)
    return AnalysisResult.from_estimate(Method.COX_TVC, group, k, -beta[1], info_eta, converged, iterations,
                                        float(np.abs(score[free]).max()), risk.n_events)


# ---------------------------------------------------------------------------
# Conditional score
# ---------------------------------------------------------------------------

def pooled_sigma2(snap: AnalysisSnapshot, table: Optional[MarkerTable] = None) -> float:
    """Pooled residual variance of per-subject lines over subjects with more than two readings."""
    table = table or MarkerTable.from_snapshot(snap)
    k = snap.n_obs.astype(np.int64)
    use = np.flatnonzero(k > 2)
    if use.size == 0:
        raise IneligibleMarkerError("no subject has more than two biomarker readings")
    ku = k[use]
    sw, svw, sww = table.sums(use, ku)
    sv, svv = _CUM_V[ku], _CUM_VV[ku]
    vbar, wbar = sv / ku, sw / ku
    sxx = svv - ku * vbar ** 2
    sxy = svw - ku * vbar * wbar
    rss = np.maximum(sww - ku * wbar ** 2 - sxy ** 2 / sxx, 0.0)
    return float(rss.sum() / np.sum(ku - 2))


class ConditionalScore:
    """
    Conditional score in (gamma, eta) for a hazard exp(gamma X(t) + eta Z),
    with X(t) replaced by the running least-squares fit of each subject's
    biomarker history. Subjects join risk sets once they have two readings.
    """

    def __init__(self, snap: AnalysisSnapshot, sigma2: Optional[float] = None):
        self.snap = snap
        self.table = MarkerTable.from_snapshot(snap)
        self.sigma2 = pooled_sigma2(snap, self.table) if sigma2 is None else sigma2
        second = SCHEDULE[1]
        entry = np.where(snap.n_obs >= 2, second, np.inf)
        self.risk = RiskSets.build(snap.time, snap.status, entry, snap.ids)
        if self.risk.n_events == 0:
            raise NonIdentifiableError("no failures among subjects with two biomarker readings")
        subj = self.risk.pair_subj
        u = self.risk.event_time[self.risk.pair_event]
        k = np.minimum(snap.n_obs[subj], _visits_by(u)).astype(np.int64)
        sw, svw, _ = self.table.sums(subj, k)
        self.x_hat, self.psi = _line_fit(k, _CUM_V[k], _CUM_VV[k], sw, svw, u)
        self.z = snap.arm[subj].astype(float)
        fail_arm = snap.arm[self.risk.event_subj]
        if (fail_arm == 1).sum() == 0 or (fail_arm == 0).sum() == 0:
            raise NonIdentifiableError("eligible failures are needed in both arms")

    def _terms(self, beta: np.ndarray):
        g, e = float(beta[0]), float(beta[1])
        risk = self.risk
        s = self.x_hat + g * self.sigma2 * self.psi * risk.is_failure
        lin = g * s - 0.5 * g * g * self.sigma2 * self.psi + e * self.z
        shift = risk.max_by_event(lin)
        w = np.exp(lin - shift[risk.pair_event])
        s0 = risk.sum_by_event(w)
        mean = np.column_stack([risk.sum_by_event(w * s), risk.sum_by_event(w * self.z)]) / s0[:, None]
        vec = np.column_stack([s, self.z])
        return vec, w / s0[risk.pair_event], mean

    def score(self, beta: np.ndarray) -> np.ndarray:
        vec, _, mean = self._terms(beta)
        return np.sum(vec[self.risk.is_failure] - mean, axis=0)

    def residuals(self, beta: np.ndarray) -> np.ndarray:
        vec, p, mean = self._terms(beta)
        risk = self.risk
        out = np.zeros((self.snap.n, 2))
        np.add.at(out, risk.event_subj, vec[risk.is_failure] - mean)
        np.add.at(out, risk.pair_subj, -p[:, None] * (vec - mean[risk.pair_event]))
        return out

    def solve(self, start=(0.0, 0.0)) -> Tuple[np.ndarray, int, bool, float]:
        tol = 1e-8 * self.snap.n
        beta = np.asarray(start, dtype=float)
        u = self.score(beta)
        norm = float(np.linalg.norm(u))
        for it in range(1, MAX_NEWTON + 1):
            if norm < tol:
                return beta, it - 1, True, norm
            try:
                step = np.linalg.solve(numeric_jacobian(self.score, beta), -u)
            except (np.linalg.LinAlgError, DerivativeError):
                return beta, it, False, norm
            for _ in range(30):
                trial = beta + step
                u_trial = self.score(trial)
                n_trial = float(np.linalg.norm(u_trial))
                if np.isfinite(n_trial) and n_trial < norm:
                    break
                step *= 0.5
            else:
                return beta, it, False, norm
            beta, u, norm = trial, u_trial, n_trial
        return beta, MAX_NEWTON, norm < tol, norm


def fit_conditional_score(snapshot: AnalysisSnapshot, group: Group, k: int) -> AnalysisResult:
    data = snapshot.restrict(group)
    engine = ConditionalScore(data)
    beta, iterations, converged, residual = engine.solve()
    info = math.nan
    if converged:
        try:
            a_inv = np.linalg.inv(numeric_jacobian(engine.score, beta))
            contrib = engine.residuals(beta)
            sandwich = a_inv @ (contrib.T @ contrib) @ a_inv.T
            info = 1.0 / sandwich[1, 1]
        except (np.linalg.LinAlgError, DerivativeError):
            converged = False
    log.debug("Conditional score solved", group=Group(group).value, k=k, gamma=beta[0], eta=beta[1],
              sigma2=engine.sigma2, iterations=iterations, converged=converged)
    return AnalysisResult.from_estimate(Method.COND_SCORE, group, k, -beta[1], info, converged, iterations,
                                        residual, engine.risk.n_events)


# ---------------------------------------------------------------------------
# Joint model likelihood and restricted mean survival
# ---------------------------------------------------------------------------

PARAM_NAMES = ("mu0", "mu1", "log_phi1", "atanh_rho", "log_phi2", "log_sigma2", "gamma", "eta", "b2", "log_c")


@dataclass(frozen=True)
class JointLikelihoodParams:
    """Unconstrained parameter vector of the joint model for one subgroup."""
    vector: np.ndarray

    def __post_init__(self):
        if np.shape(self.vector) != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got shape {np.shape(self.vector)}")

    @classmethod
    def from_model(cls, p: SubgroupParams) -> "JointLikelihoodParams":
        rho = p.phi12 / math.sqrt(p.phi1 * p.phi2)
        rho = min(max(rho, -1.0 + 1e-9), 1.0 - 1e-9)
        return cls(np.array([p.mu0, p.mu1, math.log(p.phi1), math.atanh(rho), math.log(p.phi2),
                             math.log(p.sigma2), p.gamma, p.eta, p.b2, math.log(p.c)]))

    def to_model(self) -> SubgroupParams:
        v = self.vector
        phi1, phi2 = math.exp(v[2]), math.exp(v[4])
        return SubgroupParams(mu0=v[0], mu1=v[1], phi1=phi1, phi12=math.tanh(v[3]) * math.sqrt(phi1 * phi2),
                              phi2=phi2, sigma2=math.exp(v[5]), gamma=v[6], eta=v[7], b2=v[8], c=math.exp(v[9]))


@dataclass(frozen=True)
class _SubjectStats:
    m: np.ndarray
    sv: np.ndarray
    svv: np.ndarray
    sw: np.ndarray
    svw: np.ndarray
    sww: np.ndarray
    arm: np.ndarray
    time: np.ndarray
    status: np.ndarray

    @classmethod
    def from_snapshot(cls, snap: AnalysisSnapshot) -> "_SubjectStats":
        table = MarkerTable.from_snapshot(snap)
        m = snap.n_obs.astype(np.int64)
        sw, svw, sww = table.sums(np.arange(snap.n), m)
        return cls(m.astype(float), _CUM_V[m], _CUM_VV[m], sw, svw, sww, snap.arm.astype(float),
                   snap.time, snap.status.astype(float))


def _chol2(cov: np.ndarray):
    l11 = np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
    l21 = np.where(l11 > 0, cov[:, 0, 1] / np.where(l11 > 0, l11, 1.0), 0.0)
    l22 = np.sqrt(np.maximum(cov[:, 1, 1] - l21 ** 2, 0.0))
    return l11, l21, l22


def _subject_loglik(p: SubgroupParams, st: _SubjectStats, n_nodes: int) -> np.ndarray:
    """
    Per-subject joint log-likelihood. The biomarker part is integrated exactly
    (normal-normal), leaving the survival factor averaged over the Gaussian
    posterior of the random effects with a product Gauss-Hermite rule.
    """
    phi = p.cov
    s2 = p.sigma2
    n = st.m.size
    beta = p.mu1 + p.b2 * st.arm
    ee = (st.sww - 2.0 * (p.mu0 * st.sw + beta * st.svw)
          + st.m * p.mu0 ** 2 + 2.0 * p.mu0 * beta * st.sv + beta ** 2 * st.svv)
    r = np.column_stack([st.sw - st.m * p.mu0 - beta * st.sv, st.svw - p.mu0 * st.sv - beta * st.svv])
    gram = np.empty((n, 2, 2))
    gram[:, 0, 0], gram[:, 0, 1], gram[:, 1, 0], gram[:, 1, 1] = st.m, st.sv, st.sv, st.svv
    g = s2 * np.eye(2)[None] + gram @ phi
    det_g = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    if np.any(det_g <= 0):
        raise LikelihoodError("marginal biomarker covariance is not positive definite")
    g_inv = np.empty_like(g)
    g_inv[:, 0, 0], g_inv[:, 1, 1] = g[:, 1, 1] / det_g, g[:, 0, 0] / det_g
    g_inv[:, 0, 1], g_inv[:, 1, 0] = -g[:, 0, 1] / det_g, -g[:, 1, 0] / det_g
    gain = phi[None] @ g_inv
    quad = (ee - np.einsum("ni,nij,nj->n", r, gain, r)) / s2
    logdet = (st.m - 2.0) * math.log(s2) + np.log(det_g)
    longitudinal = -0.5 * (st.m * math.log(2.0 * math.pi) + logdet + quad)

    post_mean = np.array([p.mu0, p.mu1])[None] + np.einsum("nij,nj->ni", gain, r)
    post_cov = phi[None] - gain @ gram @ phi[None]
    post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, 1, 2))
    l11, l21, l22 = _chol2(post_cov)

    rule = gauss_hermite(n_nodes)
    x, y = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    z0, z1 = math.sqrt(2.0) * x.ravel(), math.sqrt(2.0) * y.ravel()
    log_w = np.log(np.outer(rule.weights, rule.weights).ravel() / math.pi)

    b0 = post_mean[:, :1] + l11[:, None] * z0[None]
    b1 = post_mean[:, 1:] + l21[:, None] * z0[None] + l22[:, None] * z1[None]
    slope = b1 + p.b2 * st.arm[:, None]
    t = st.time[:, None]
    log_h = (math.log(p.c) + np.where(t > 1.0, math.log(BASELINE_JUMP), 0.0)
             + p.gamma * (b0 + slope * t) + p.eta * st.arm[:, None])
    cum = cumulative_hazard(t, b0, slope, st.arm[:, None], p)
    survival = logsumexp(log_w[None] + st.status[:, None] * log_h - cum, axis=1)
    return longitudinal + survival


def joint_log_likelihood(params: JointLikelihoodParams, snapshot: AnalysisSnapshot, group: Group,
                         n_nodes: int = 15, per_subject: bool = False):
    try:
        model = params.to_model()
    except (ParameterError, OverflowError, ValueError) as e:
        raise LikelihoodError(f"invalid joint-model parameters: {e}") from e
    st = _SubjectStats.from_snapshot(snapshot.restrict(group))
    with np.errstate(over="ignore", invalid="ignore"):
        values = _subject_loglik(model, st, n_nodes)
    if not np.all(np.isfinite(values)):
        raise LikelihoodError("joint log-likelihood is not finite")
    return values if per_subject else float(values.sum())


def survival_curves(p: SubgroupParams, times: np.ndarray, n_nodes: int = 30) -> Tuple[np.ndarray, np.ndarray]:
    """Marginal survival (control, treated) at `times`, averaging over the random effects."""
    points, weights = gaussian_grid(p.mean, p.cov, n_nodes)
    b0, b1 = points[:, :1], points[:, 1:]
    t = np.asarray(times, dtype=float)[None, :]
    curves = []
    for arm in (0, 1):
        cum = cumulative_hazard(t, b0, b1 + p.b2 * arm, arm, p)
        curves.append(weights @ np.exp(-cum))
    return curves[0], curves[1]


def rmst_difference(params, t_star: float = 5.0, n_nodes: int = 30, order: int = 40) -> float:
    """Treated minus control restricted mean survival up to t_star."""
    if not t_star > 0:
        raise DomainError(f"t_star must be positive, got {t_star!r}")
    p = params.to_model() if isinstance(params, JointLikelihoodParams) else params
    rule = gauss_legendre(order)
    pieces = [(0.0, min(1.0, t_star))] + ([(1.0, t_star)] if t_star > 1.0 else [])
    total = 0.0
    for lo, hi in pieces:
        half = 0.5 * (hi - lo)
        t = 0.5 * (lo + hi) + half * rule.nodes
        s0, s1 = survival_curves(p, t, n_nodes)
        total += half * float(np.dot(rule.weights, s1 - s0))
    return total


def _starting_params(snap: AnalysisSnapshot) -> JointLikelihoodParams:
    table = MarkerTable.from_snapshot(snap)
    k = snap.n_obs.astype(np.int64)
    use = np.flatnonzero(k >= 2)
    if use.size < 3:
        raise IneligibleMarkerError("too few subjects with two biomarker readings to start the joint fit")
    ku = k[use]
    sw, svw, _ = table.sums(use, ku)
    vbar, wbar = _CUM_V[ku] / ku, sw / ku
    slope = (svw - ku * vbar * wbar) / (_CUM_VV[ku] - ku * vbar ** 2)
    intercept = wbar - slope * vbar
    control = snap.arm[use] == 0
    mu1 = float(np.mean(slope[control])) if control.any() else float(np.mean(slope))
    b2 = float(np.mean(slope[~control]) - mu1) if (~control).any() and control.any() else 0.0
    cov = np.cov(np.vstack([intercept, slope])) + 1e-3 * np.eye(2)
    sigma2 = pooled_sigma2(snap, table) if np.any(k > 2) else 1.0
    exposure = np.minimum(snap.time, 1.0) + BASELINE_JUMP * np.maximum(snap.time - 1.0, 0.0)
    c0 = max(float(snap.status.sum()), 1.0) / float(exposure.sum())
    start = SubgroupParams(mu0=float(np.mean(intercept)), mu1=mu1, phi1=cov[0, 0], phi12=cov[0, 1],
                           phi2=cov[1, 1], sigma2=max(sigma2, 1e-3), gamma=0.0, eta=0.0, b2=b2, c=c0)
    return JointLikelihoodParams.from_model(start)


def fit_rmst(snapshot: AnalysisSnapshot, group: Group, k: int, t_star: float = 5.0,
             n_nodes: int = 15) -> AnalysisResult:
    """
    Maximum-likelihood fit of the joint model, then the RMST difference and its
    delta-method information from the inverse observed information.
    """
    data = snapshot.restrict(group)
    _require_both_arms(data.status, data.arm)
    start = _starting_params(data)
    st = _SubjectStats.from_snapshot(data)

    def objective(v: np.ndarray) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                values = _subject_loglik(JointLikelihoodParams(v).to_model(), st, n_nodes)
        except (ParameterError, LikelihoodError, OverflowError, ValueError):
            return math.inf
        total = float(values.sum())
        return -total if np.isfinite(total) else math.inf

    try:
        fit = minimize(objective, start.vector)
    except (DomainError, DerivativeError) as e:
        log.debug("Joint model fit failed", group=Group(group).value, k=k, error=str(e))
        return AnalysisResult.from_estimate(Method.RMST, group, k, math.nan, math.nan, False, 0,
                                            events=int(data.status.sum()))
    converged = fit.converged
    theta = rmst_difference(JointLikelihoodParams(fit.x), t_star)
    info = math.nan
    try:
        hess = numeric_hessian(objective, fit.x, rel_step=1e-4)
        np.linalg.cholesky(hess)
        cov = np.linalg.inv(hess)
        grad = numeric_gradient(lambda v: rmst_difference(JointLikelihoodParams(v), t_star), fit.x, rel_step=1e-4)
        info = 1.0 / float(grad @ cov @ grad)
    except (np.linalg.LinAlgError, DerivativeError, ZeroDivisionError):
        converged = False
    log.debug("Joint model fitted", group=Group(group).value, k=k, delta=theta, info=info, converged=converged)
    return AnalysisResult.from_estimate(Method.RMST, group, k, theta, info, converged, fit.iterations,
                                        events=int(data.status.sum()))


ESTIMATORS: Dict[Method, Callable[..., AnalysisResult]] = {
    Method.COND_SCORE: fit_conditional_score,
    Method.COX: fit_cox,
    Method.COX_TVC: fit_cox_tvc,
    Method.RMST: fit_rmst,
}


def fit_group(method, snapshot: AnalysisSnapshot, group: Group, k: int, **options) -> AnalysisResult:
    """Run the named engine on one group of a snapshot."""
    return ESTIMATORS[Method(method)](snapshot, Group(group), k, **options)
