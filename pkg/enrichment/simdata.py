"""
Trial population generator for the joint longitudinal/survival model.

Each subject carries a random intercept and slope for the biomarker, noisy
biomarker readings on the clinic schedule, an event time drawn exactly from
the piecewise cumulative hazard, and an independent censoring time.
Datasets are columnar and immutable; analysis snapshots censor them at the
calendar time of a target event count.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from enrichment.design import Group, Selection
from enrichment.errors import ParameterError
from enrichment.numerics import RngStream

log = structlog.get_logger(__name__)

# 5e-5 losses per patient-day.
CENSOR_RATE = 5e-5 * 365.25
HORIZON = 50.0
BASELINE_JUMP = 5.0 / 3.0
_SERIES_CUTOFF = 1e-6


def measurement_schedule(horizon: float) -> np.ndarray:
    """Clinic visits in years from entry: baseline, fortnightly to 0.25, then monthly."""
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon!r}")
    early = np.arange(7) * (2.0 / 52.0)
    months = int(math.floor(max(horizon - 0.25, 0.0) * 12.0 + 1e-9))
    late = 0.25 + np.arange(1, months + 1) / 12.0
    visits = np.concatenate([early, late])
    return visits[visits <= horizon + 1e-12]


SCHEDULE = measurement_schedule(HORIZON)


@dataclass(frozen=True)
class SubgroupParams:
    mu0: float = 4.23
    mu1: float = 1.81
    phi1: float = 2.5
    phi12: float = 1.7
    phi2: float = 5.0
    sigma2: float = 1.0
    gamma: float = 0.8
    eta: float = 0.0
    b2: float = 0.0
    c: float = 0.0085

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ParameterError(f"measurement-error variance must be non-negative, got {self.sigma2!r}")
        if not self.c > 0:
            raise ParameterError(f"baseline hazard level must be positive, got {self.c!r}")
        if self.phi1 < 0 or self.phi2 < 0 or self.phi1 * self.phi2 - self.phi12 ** 2 < -1e-12:
            raise ParameterError(
                f"random-effect covariance [[{self.phi1}, {self.phi12}], [{self.phi12}, {self.phi2}]] is not PSD"
            )

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mu0, self.mu1])

    @property
    def cov(self) -> np.ndarray:
        return np.array([[self.phi1, self.phi12], [self.phi12, self.phi2]])

    @property
    def chol(self) -> np.ndarray:
        """Lower factor L with L L^T = cov; semi-definite matrices are handled explicitly."""
        l11 = math.sqrt(self.phi1)
        l21 = self.phi12 / l11 if l11 > 0 else 0.0
        l22 = math.sqrt(max(self.phi2 - l21 ** 2, 0.0))
        return np.array([[l11, 0.0], [l21, l22]])


@dataclass(frozen=True)
class JointModelParams:
    s1: SubgroupParams = field(default_factory=SubgroupParams)
    s2: SubgroupParams = field(default_factory=SubgroupParams)
    lam: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ParameterError(f"prevalence must lie in (0, 1), got {self.lam!r}")

    def __getitem__(self, subgroup: Union[int, Group]) -> SubgroupParams:
        key = subgroup.value if isinstance(subgroup, Group) else str(subgroup)
        if key == "1":
            return self.s1
        if key == "2":
            return self.s2
        raise KeyError(subgroup)

    @classmethod
    def scenario(cls, name: str, lam: float = 1.0 / 3.0, **overrides) -> "JointModelParams":
        """
        Named scenarios: 'null' has no treatment effect anywhere, 'alternative'
        puts eta = b2 = -0.5 in S1 only. Overrides apply to both subgroups.
        """
        base = SubgroupParams(**overrides)
        if name == "null":
            return cls(base, base, lam)
        if name == "alternative":
            return cls(replace(base, eta=-0.5, b2=-0.5), base, lam)
        raise ParameterError(f"unknown scenario {name!r}")

    def with_effects(self, eta1: float, b21: float, eta2: float, b22: float) -> "JointModelParams":
        return JointModelParams(replace(self.s1, eta=eta1, b2=b21), replace(self.s2, eta=eta2, b2=b22), self.lam)


def _growth(x, k):
    """(e^{k x} - 1) / k with the series form near k = 0."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    small = np.abs(k) < _SERIES_CUTOFF
    safe_k = np.where(small, 1.0, k)
    exact = np.expm1(safe_k * x) / safe_k
    series = x + k * x * x / 2.0 + k * k * x ** 3 / 6.0
    return np.where(small, series, exact)


def _growth_inverse(y, k):
    """Solve (e^{k x} - 1) / k = y for x >= 0; +inf when y is out of reach (k < 0)."""
    y = np.asarray(y, dtype=float)
    k = np.asarray(k, dtype=float)
    arg = k * y
    tiny = np.abs(k) < 1e-12
    safe_k = np.where(tiny, 1.0, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        exact = np.where(arg > -1.0, np.log1p(np.maximum(arg, -1.0 + 1e-300)) / safe_k, np.inf)
    return np.where(tiny, y, exact)


def baseline_hazard(t, c: float):
    return np.where(np.asarray(t) <= 1.0, c, BASELINE_JUMP * c)


def hazard(t, b0, slope_eff, arm, params: SubgroupParams):
    """h0(t) exp(gamma X(t) + eta Z) with X(t) = b0 + slope_eff t."""
    t = np.asarray(t, dtype=float)
    return baseline_hazard(t, params.c) * np.exp(params.gamma * (b0 + slope_eff * t) + params.eta * arm)


def cumulative_hazard(t, b0, slope_eff, arm, params: SubgroupParams):
    t = np.asarray(t, dtype=float)
    scale = params.c * np.exp(params.gamma * np.asarray(b0, dtype=float) + params.eta * np.asarray(arm, dtype=float))
    k = params.gamma * np.asarray(slope_eff, dtype=float)
    first = _growth(np.minimum(t, 1.0), k)
    later = BASELINE_JUMP * np.exp(k) * _growth(np.maximum(t - 1.0, 0.0), k)
    out = scale * (first + np.where(t > 1.0, later, 0.0))
    return float(out) if out.ndim == 0 else out


def invert_cumulative_hazard(target, b0, slope_eff, arm, params: SubgroupParams):
    """Time T with H(T) = target; +inf when the cumulative hazard stays below target."""
    target = np.asarray(target, dtype=float)
    scale = params.c * np.exp(params.gamma * np.asarray(b0, dtype=float) + params.eta * np.asarray(arm, dtype=float))
    k = params.gamma * np.asarray(slope_eff, dtype=float)
    at_kink = scale * _growth(1.0, k)
    early = _growth_inverse(target / scale, k)
    rest = (target - at_kink) / (scale * BASELINE_JUMP * np.exp(k))
    late = 1.0 + _growth_inverse(np.maximum(rest, 0.0), k)
    out = np.where(target <= at_kink, np.minimum(early, 1.0), late)
    return float(out) if out.ndim == 0 else out


def sample_event_time(b0: float, slope_eff: float, arm: int, params: SubgroupParams, rng: RngStream) -> float:
    """Event time capped at HORIZON; a capped time is never an observed event."""
    return float(min(invert_cumulative_hazard(rng.exponential(1.0), b0, slope_eff, arm, params), HORIZON))


def observed_events(event_time, censor_time) -> np.ndarray:
    event_time = np.asarray(event_time, dtype=float)
    return (event_time <= np.asarray(censor_time, dtype=float)) & (event_time < HORIZON)


def randomise_arms(subgroup: np.ndarray, rng: RngStream) -> np.ndarray:
    """1:1 allocation in permuted blocks of two within each subgroup, in accrual order."""
    arm = np.empty(subgroup.size, dtype=int)
    for j in (1, 2):
        idx = np.flatnonzero(subgroup == j)
        first = rng.bernoulli(0.5, (idx.size + 1) // 2).astype(int)
        arm[idx] = np.column_stack([first, 1 - first]).ravel()[: idx.size]
    return arm


@dataclass(frozen=True)
class Subject:
    id: int
    subgroup: int
    arm: int
    accrual_time: float
    b0: float
    b1: float
    event_time: float
    censor_time: float
    visit_times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class TrialDataset:
    """
    Columnar population. Biomarker readings are stored flat: subject i owns
    values[offsets[i]:offsets[i+1]], taken at SCHEDULE[:n_visits[i]].
    """
    ids: np.ndarray
    subgroup: np.ndarray
    arm: np.ndarray
    accrual: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    lam: float

    @property
    def n(self) -> int:
        return int(self.ids.size)

    @property
    def n_visits(self) -> np.ndarray:
        return np.diff(self.offsets)

    def mask(self, group: Group) -> np.ndarray:
        group = Group(group)
        if group is Group.F:
            return np.ones(self.n, dtype=bool)
        return self.subgroup == int(group.value)

    def total_events(self, group: Group) -> int:
        return int(np.sum(observed_events(self.event_time, self.censor_time) & self.mask(group)))

    def subject(self, i: int) -> Subject:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return Subject(int(self.ids[i]), int(self.subgroup[i]), int(self.arm[i]), float(self.accrual[i]),
                       float(self.b0[i]), float(self.b1[i]), float(self.event_time[i]), float(self.censor_time[i]),
                       SCHEDULE[: hi - lo].copy(), self.values[lo:hi].copy())


def _draw_block(params: JointModelParams, subgroup: np.ndarray, arm: np.ndarray, rng: RngStream) -> Dict[str, np.ndarray]:
    n = subgroup.size
    z = rng.normal((n, 2))
    energy = rng.exponential(1.0, n)
    censor = np.minimum(rng.exponential(CENSOR_RATE, n), HORIZON)
    b0, b1 = np.empty(n), np.empty(n)
    slope, event, sigma = np.empty(n), np.empty(n), np.empty(n)
    for j in (1, 2):
        m = subgroup == j
        if not m.any():
            continue
        p = params[j]
        b = p.mean + z[m] @ p.chol.T
        b0[m], b1[m] = b[:, 0], b[:, 1]
        slope[m] = b1[m] + p.b2 * arm[m]
        event[m] = np.minimum(invert_cumulative_hazard(energy[m], b0[m], slope[m], arm[m], p), HORIZON)
        sigma[m] = math.sqrt(p.sigma2)

    n_visits = np.searchsorted(SCHEDULE, np.minimum(event, censor), side="right")
    offsets = np.concatenate([[0], np.cumsum(n_visits)])
    position = np.arange(offsets[-1]) - np.repeat(offsets[:-1], n_visits)
    noise = rng.normal(int(offsets[-1]))
    values = (np.repeat(b0, n_visits) + np.repeat(slope, n_visits) * SCHEDULE[position]
              + np.repeat(sigma, n_visits) * noise)
    return dict(b0=b0, b1=b1, event_time=event, censor_time=censor, n_visits=n_visits, values=values)


def _assemble(ids, subgroup, arm, accrual, block, lam) -> TrialDataset:
    return TrialDataset(
        ids=np.asarray(ids, dtype=np.int64), subgroup=np.asarray(subgroup, dtype=np.int8),
        arm=np.asarray(arm, dtype=np.int8), accrual=np.asarray(accrual, dtype=float),
        b0=block["b0"], b1=block["b1"], event_time=block["event_time"], censor_time=block["censor_time"],
        offsets=np.concatenate([[0], np.cumsum(block["n_visits"])]).astype(np.int64),
        values=block["values"], lam=lam,
    )


def sample_subject(params: JointModelParams, subgroup: int, arm: int, accrual_time: float, rng: RngStream,
                   subject_id: int = 0) -> Subject:
    block = _draw_block(params, np.array([subgroup]), np.array([arm]), rng)
    return _assemble([subject_id], [subgroup], [arm], [accrual_time], block, params.lam).subject(0)


def simulate_population(params: JointModelParams, n_max: int, accrual_rate: float, rng: RngStream) -> TrialDataset:
    if n_max < 1 or not accrual_rate > 0:
        raise ParameterError(f"need n_max >= 1 and accrual_rate > 0, got {n_max!r}, {accrual_rate!r}")
    accrual = np.sort(rng.uniform(n_max)) * (n_max / accrual_rate)
    subgroup = np.where(rng.bernoulli(params.lam, n_max), 1, 2)
    arm = randomise_arms(subgroup, rng)
    block = _draw_block(params, subgroup, arm, rng)
    return _assemble(np.arange(n_max), subgroup, arm, accrual, block, params.lam)


def enrich_population(dataset: TrialDataset, params: JointModelParams, selection: Selection,
                      from_time: float, rng: RngStream) -> TrialDataset:
    """
    Replace everyone accrued after from_time with fresh subjects from the
    selected subgroup, keeping their ids and accrual times.
    """
    selection = Selection(selection)
    if selection in (Selection.F, Selection.NONE):
        return dataset
    late = dataset.accrual > from_time
    n_late = int(late.sum())
    if n_late == 0:
        return dataset
    target = int(selection.group.value)
    new_subgroup = np.full(n_late, target)
    new_arm = randomise_arms(new_subgroup, rng)
    block = _draw_block(params, new_subgroup, new_arm, rng)

    keep = ~late
    n_visits = np.concatenate([dataset.n_visits[keep], block["n_visits"]])
    owner = np.repeat(np.arange(dataset.n), dataset.n_visits)
    kept_values = dataset.values[keep[owner]]
    merged = dict(
        b0=np.concatenate([dataset.b0[keep], block["b0"]]),
        b1=np.concatenate([dataset.b1[keep], block["b1"]]),
        event_time=np.concatenate([dataset.event_time[keep], block["event_time"]]),
        censor_time=np.concatenate([dataset.censor_time[keep], block["censor_time"]]),
        n_visits=n_visits,
        values=np.concatenate([kept_values, block["values"]]),
    )
    log.debug("Population enriched", selection=selection.value, replaced=n_late, from_time=from_time)
    return _assemble(
        np.concatenate([dataset.ids[keep], dataset.ids[late]]),
        np.concatenate([dataset.subgroup[keep], new_subgroup]),
        np.concatenate([dataset.arm[keep], new_arm]),
        np.concatenate([dataset.accrual[keep], dataset.accrual[late]]),
        merged, dataset.lam,
    )


@dataclass(frozen=True)
class AnalysisSnapshot:
    """
    Data as seen at an interim calendar time: one row per accrued subject.

    `start` indexes the shared `values` array; a subject's first n_obs readings
    were taken at SCHEDULE[:n_obs].
    """
    calendar_time: float
    ids: np.ndarray
    subgroup: np.ndarray
    arm: np.ndarray
    accrual: np.ndarray
    time: np.ndarray
    status: np.ndarray
    n_obs: np.ndarray
    start: np.ndarray
    values: np.ndarray
    event_counts: Dict[Group, int]
    shortfall: bool = False

    @property
    def n(self) -> int:
        return int(self.ids.size)

    def measurements(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        m = int(self.n_obs[i])
        return SCHEDULE[:m], self.values[self.start[i]:self.start[i] + m]

    def restrict(self, group: Group) -> "AnalysisSnapshot":
        group = Group(group)
        if group is Group.F:
            return self
        keep = self.subgroup == int(group.value)
        counts = {g: (v if g is group else 0) for g, v in self.event_counts.items()}
        return AnalysisSnapshot(self.calendar_time, self.ids[keep], self.subgroup[keep], self.arm[keep],
                                self.accrual[keep], self.time[keep], self.status[keep], self.n_obs[keep],
                                self.start[keep], self.values, counts, self.shortfall)


def _observed_event_calendar(dataset: TrialDataset) -> np.ndarray:
    return np.where(observed_events(dataset.event_time, dataset.censor_time), dataset.accrual + dataset.event_time, np.inf)


def snapshot_at_time(dataset: TrialDataset, calendar_time: float, shortfall: bool = False) -> AnalysisSnapshot:
    entered = dataset.accrual <= calendar_time
    follow = calendar_time - dataset.accrual[entered]
    event, censor = dataset.event_time[entered], dataset.censor_time[entered]
    status = observed_events(event, censor) & (dataset.accrual[entered] + event <= calendar_time)
    time = np.where(status, event, np.minimum(np.minimum(event, censor), follow))
    n_visits = np.diff(dataset.offsets)[entered]
    n_obs = np.minimum(n_visits, np.searchsorted(SCHEDULE, follow, side="right"))
    subgroup = dataset.subgroup[entered]
    counts = {
        Group.S1: int(np.sum(status & (subgroup == 1))),
        Group.S2: int(np.sum(status & (subgroup == 2))),
        Group.F: int(np.sum(status)),
    }
    return AnalysisSnapshot(
        calendar_time=float(calendar_time), ids=dataset.ids[entered], subgroup=subgroup,
        arm=dataset.arm[entered], accrual=dataset.accrual[entered], time=time, status=status,
        n_obs=n_obs, start=dataset.offsets[:-1][entered], values=dataset.values,
        event_counts=counts, shortfall=shortfall,
    )


def end_of_data_time(dataset: TrialDataset) -> float:
    return float(np.max(dataset.accrual + np.minimum(dataset.event_time, dataset.censor_time)))


def snapshot_at_events(dataset: TrialDataset, group: Group, target_events: int) -> AnalysisSnapshot:
    """
    Censor the population at the calendar time of the target_events-th event
    in `group`; simultaneous events are ordered by subject id.
    """
    if target_events < 1:
        raise ValueError(f"target_events must be positive, got {target_events!r}")
    calendar = _observed_event_calendar(dataset)
    in_group = dataset.mask(group) & np.isfinite(calendar)
    order = np.lexsort((dataset.ids[in_group], calendar[in_group]))
    times = calendar[in_group][order]
    if times.size < target_events:
        log.debug("Not enough events for analysis", group=Group(group).value, wanted=target_events, available=int(times.size))
        return snapshot_at_time(dataset, end_of_data_time(dataset), shortfall=True)
    return snapshot_at_time(dataset, float(times[target_events - 1]))


def export_dataset(data: Union[TrialDataset, AnalysisSnapshot], directory: Path, prefix: str = "trial") -> Tuple[Path, Path]:
    """
    Write `<prefix>_measurements.csv` and `<prefix>_survival.csv`. A full
    dataset is exported as observed at the end of follow-up.
    """
    snap = data if isinstance(data, AnalysisSnapshot) else snapshot_at_time(data, end_of_data_time(data))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rep = np.repeat(np.arange(snap.n), snap.n_obs)
    position = np.arange(rep.size) - np.repeat(np.cumsum(snap.n_obs) - snap.n_obs, snap.n_obs)
    measurements = pd.DataFrame({
        "subject_id": snap.ids[rep],
        "subgroup": snap.subgroup[rep],
        "arm": snap.arm[rep],
        "accrual_time": snap.accrual[rep],
        "visit_time": SCHEDULE[position],
        "value": snap.values[snap.start[rep] + position],
    })
    survival = pd.DataFrame({"subject_id": snap.ids, "time": snap.time, "status": snap.status.astype(int)})
    m_path = directory / f"{prefix}_measurements.csv"
    s_path = directory / f"{prefix}_survival.csv"
    measurements.to_csv(m_path, index=False, encoding="utf-8")
    survival.to_csv(s_path, index=False, encoding="utf-8")
    return m_path, s_path
