"""
Monte Carlo harness: replicate trials over scenario grids and methods,
aggregate operating characteristics with Monte Carlo standard errors, and
scan (theta1, theta2) configurations for strong familywise error control.

Replicate r of every scenario draws from RngStream(seed, r). Tallies are
plain integer counts, so shards over disjoint replicate ranges merge exactly.
"""

import io
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table

from enrichment import __version__
from enrichment.config import ScanConfig, StudyConfig, config_hash
from enrichment.design import (
    DesignSpec,
    EventsPlan,
    Group,
    Selection,
    ThetaConfig,
    TrialDesign,
    calibrate_m,
    plan_events,
)
from enrichment.errors import EnrichmentError, ParameterError
from enrichment.numerics import RngStream
from enrichment.simdata import JointModelParams
from enrichment.trial import ANALYTIC, Recruitment, TrialOutcome, run_replicate

log = structlog.get_logger(__name__)

# Published (d1_stage1, d_total) pairs keyed by (gamma, sigma, phi2).
PUBLISHED_DESIGNS: Dict[Tuple[float, float, float], Tuple[int, int]] = {
    (0.0, 0.0, 5.0): (41, 180), (0.4, 0.0, 5.0): (40, 170), (0.8, 0.0, 5.0): (42, 170), (1.2, 0.0, 5.0): (44, 175),
    (0.0, 0.5, 5.0): (41, 178), (0.4, 0.5, 5.0): (41, 165), (0.8, 0.5, 5.0): (43, 175), (1.2, 0.5, 5.0): (48, 190),
    (0.0, 1.0, 5.0): (41, 170), (0.4, 1.0, 5.0): (42, 180), (0.8, 1.0, 5.0): (49, 215), (1.2, 1.0, 5.0): (62, 271),
    (0.0, 1.5, 5.0): (44, 195), (0.4, 1.5, 5.0): (49, 190), (0.8, 1.5, 5.0): (60, 250), (1.2, 1.5, 5.0): (80, 350),
    (0.0, 1.0, 0.0): (41, 160), (0.4, 1.0, 0.0): (40, 175), (0.8, 1.0, 0.0): (42, 200), (1.2, 1.0, 0.0): (61, 266),
    (0.0, 1.0, 2.5): (41, 165), (0.4, 1.0, 2.5): (42, 178), (0.8, 1.0, 2.5): (50, 195), (1.2, 1.0, 2.5): (69, 302),
    (0.0, 1.0, 7.5): (41, 180), (0.4, 1.0, 7.5): (45, 190), (0.8, 1.0, 7.5): (50, 200), (1.2, 1.0, 7.5): (70, 300),
}

DEFAULT_SCAN_GRID: List[Tuple[float, float]] = [
    (0.0, 0.0), (0.0, -0.5), (-0.5, 0.0), (-0.5, -0.5), (-1.5, -1.5), (0.0, 0.5),
    (0.0, 1.0), (0.0, 2.0), (-0.5, 1.0), (-0.5, 2.0), (0.5, 0.0), (1.0, 0.0),
]

CALIBRATION_STREAM = 1 << 40
_NANO = 10 ** 9


@dataclass(frozen=True)
class Scenario:
    gamma: float
    sigma: float
    phi2: float

    @property
    def label(self) -> str:
        return f"gamma={self.gamma:g},sigma={self.sigma:g},phi2={self.phi2:g}"

    @property
    def key(self) -> Tuple[float, float, float]:
        return (float(self.gamma), float(self.sigma), float(self.phi2))


def scenario_grid(config: StudyConfig) -> List[Scenario]:
    """The sigma series at phi2 = 5 and the phi2 series at sigma = 1, for every gamma."""
    grid: List[Scenario] = []
    for gamma in config.gamma_grid:
        for sc in [Scenario(gamma, s, 5.0) for s in config.sigma_grid] + [Scenario(gamma, 1.0, p) for p in config.phi2_grid]:
            if sc not in grid:
                grid.append(sc)
    return grid


@dataclass
class Tally:
    n: int = 0
    n_valid: int = 0
    n_invalid: int = 0
    n_failed: int = 0
    n_shortfall: int = 0
    n_stage2: int = 0
    n_select_s1: int = 0
    n_select_s2: int = 0
    n_select_f: int = 0
    n_select_none: int = 0
    n_reject: int = 0
    n_reject_s1: int = 0
    n_false_reject: int = 0
    events_sum: int = 0
    stop_nanoyears: int = 0
    visits_nano: int = 0

    def add(self, outcome: TrialOutcome, truth: ThetaConfig) -> None:
        self.n += 1
        self.n_shortfall += int(outcome.shortfall)
        if not outcome.valid:
            self.n_invalid += 1
            return
        self.n_valid += 1
        self.n_stage2 += int(outcome.stage == 2)
        sel = outcome.selection
        self.n_select_s1 += int(sel is Selection.S1)
        self.n_select_s2 += int(sel is Selection.S2)
        self.n_select_f += int(sel is Selection.F)
        self.n_select_none += int(sel is Selection.NONE)
        if outcome.rejects:
            self.n_reject += 1
            self.n_reject_s1 += int(sel is Selection.S1)
            self.n_false_reject += int(truth.is_null(sel.group))
        self.events_sum += int(outcome.events_at_stop)
        if math.isfinite(outcome.stop_time):
            self.stop_nanoyears += int(round(outcome.stop_time * _NANO))
        if math.isfinite(outcome.visits_per_patient):
            self.visits_nano += int(round(outcome.visits_per_patient * _NANO))

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def derived(self) -> Dict[str, float]:
        def rate(k, n):
            return k / n if n else math.nan

        def se(p, n):
            return math.sqrt(p * (1.0 - p) / n) if n and math.isfinite(p) else math.nan

        power = rate(self.n_reject_s1, self.n_select_s1)
        joint = rate(self.n_reject_s1, self.n_valid)
        fwer = rate(self.n_false_reject, self.n_valid)
        out = {
            "power": power, "power_se": se(power, self.n_select_s1),
            "select_and_reject": joint, "select_and_reject_se": se(joint, self.n_valid),
            "fwer": fwer, "fwer_se": se(fwer, self.n_valid),
            "invalid_rate": rate(self.n_invalid, self.n), "invalid_rate_se": se(rate(self.n_invalid, self.n), self.n),
            "shortfall_rate": rate(self.n_shortfall, self.n),
            "mean_events": rate(self.events_sum, self.n_valid),
            "mean_stop_time": rate(self.stop_nanoyears / _NANO, self.n_valid),
            "mean_visits": rate(self.visits_nano / _NANO, self.n_valid),
        }
        for name, count in (("s1", self.n_select_s1), ("s2", self.n_select_s2), ("f", self.n_select_f),
                            ("none", self.n_select_none)):
            p = rate(count, self.n_valid)
            out[f"p_select_{name}"], out[f"p_select_{name}_se"] = p, se(p, self.n_valid)
        return out


_TALLY_FIELDS = [f.name for f in fields(Tally)]


class ReportCell(BaseModel):
    scenario: str
    gamma: float
    sigma: float
    phi2: float
    effect: str
    method: str
    d1_stage1: int
    d_total: int
    counts: Dict[str, int] = Field(default_factory=dict)

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.scenario, self.effect, self.method)

    @property
    def tally(self) -> Tally:
        return Tally(**self.counts)

    def row(self) -> Dict[str, object]:
        out = self.model_dump(exclude={"counts"})
        out.update(self.counts)
        out.update(self.tally.derived())
        return out


class StudyReport(BaseModel):
    cells: List[ReportCell] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)
    failures: List[str] = Field(default_factory=list)
    manifest: Dict[str, str] = Field(default_factory=dict)

    def merge(self, other: "StudyReport") -> "StudyReport":
        merged: Dict[Tuple[str, str, str], ReportCell] = {c.key: c for c in self.cells}
        for cell in other.cells:
            if cell.key in merged:
                mine = merged[cell.key]
                merged[cell.key] = mine.model_copy(update={"counts": asdict(mine.tally + cell.tally)})
            else:
                merged[cell.key] = cell
        notes = list(dict.fromkeys(self.notes + other.notes))
        return StudyReport(cells=list(merged.values()), notes=notes, failures=self.failures + other.failures,
                           manifest=self.manifest or other.manifest)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.row() for c in self.cells])

    def plot_data(self) -> pd.DataFrame:
        """Long format (scenario, method, power, se) with a monotonicity flag per power-vs-gamma series."""
        df = self.frame()
        if df.empty:
            return pd.DataFrame(columns=["scenario", "gamma", "sigma", "phi2", "method", "power", "se", "series_monotone"])
        df = df.rename(columns={"power_se": "se"})[["scenario", "gamma", "sigma", "phi2", "method", "power", "se"]]

        def monotone(series: pd.DataFrame) -> bool:
            p = series.sort_values("gamma")["power"].dropna().to_numpy()
            d = np.diff(p)
            return bool(np.all(d >= 0) or np.all(d <= 0))

        flags = {key: monotone(g) for key, g in df.groupby(["sigma", "phi2", "method"])}
        df["series_monotone"] = [flags[(s, p, m)] for s, p, m in zip(df["sigma"], df["phi2"], df["method"])]
        return df

    def summary_table(self) -> Table:
        methods = sorted({c.method for c in self.cells})
        table = Table(title="Power by scenario (d1_stage1, d_total)")
        for col in ("phi2", "sigma", "gamma", "design") + tuple(methods):
            table.add_column(col, justify="right")
        rows: Dict[Tuple[float, float, float], Dict[str, ReportCell]] = {}
        for cell in self.cells:
            rows.setdefault((cell.phi2, cell.sigma, cell.gamma), {})[cell.method] = cell
        for (phi2, sigma, gamma), by_method in sorted(rows.items()):
            any_cell = next(iter(by_method.values()))
            values = []
            for m in methods:
                cell = by_method.get(m)
                d = cell.tally.derived() if cell else None
                values.append(f"{d['power']:.3f} ({d['power_se']:.3f})" if d and math.isfinite(d["power"]) else "-")
            table.add_row(f"{phi2:g}", f"{sigma:g}", f"{gamma:g}",
                          f"({any_cell.d1_stage1},{any_cell.d_total})", *values)
        return table

    def write_csv(self, path: Path) -> Path:
        header = "# " + " ".join(f"{k}={v}" for k, v in self.manifest.items())
        buf = io.StringIO()
        self.frame().to_csv(buf, index=False, lineterminator="\n")
        _write_text(path, header + "\n" + buf.getvalue())
        return path

    @classmethod
    def read_csv(cls, path: Path) -> "StudyReport":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot read study report {path}: {e}") from e
        first, _, body = text.partition("\n")
        manifest = dict(part.split("=", 1) for part in first.lstrip("# ").split() if "=" in part) \
            if first.startswith("#") else {}
        if not first.startswith("#"):
            body = text
        df = pd.read_csv(io.StringIO(body)) if body.strip() else pd.DataFrame()
        cells = [
            ReportCell(scenario=r["scenario"], gamma=r["gamma"], sigma=r["sigma"], phi2=r["phi2"],
                       effect=r["effect"], method=r["method"], d1_stage1=int(r["d1_stage1"]),
                       d_total=int(r["d_total"]), counts={k: int(r[k]) for k in _TALLY_FIELDS})
            for r in df.to_dict("records")
        ]
        return cls(cells=cells, manifest=manifest)


def _write_text(path: Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def emit_report(report: StudyReport, directory: Path, formats: Sequence[str] = ("csv", "plot", "summary")) -> List[Path]:
    directory = Path(directory)
    written = []
    if "csv" in formats:
        written.append(report.write_csv(directory / "study.csv"))
    if "plot" in formats:
        buf = io.StringIO()
        report.plot_data().to_csv(buf, index=False, lineterminator="\n")
        path = directory / "plot_data.csv"
        _write_text(path, buf.getvalue())
        written.append(path)
    if "summary" in formats:
        console = Console(record=True, width=160, file=io.StringIO())
        console.print(report.summary_table())
        for note in report.notes + report.failures:
            console.print(note)
        path = directory / "summary.txt"
        _write_text(path, console.export_text())
        written.append(path)
    log.info("Study report written", files=[str(p) for p in written])
    return written


@dataclass(frozen=True)
class _Chunk:
    params: Optional[JointModelParams]
    design: TrialDesign
    methods: Tuple[str, ...]
    seed: int
    replicates: Tuple[int, int]
    recruitment: Recruitment
    truth: ThetaConfig
    analytic: bool


def _run_chunk(chunk: _Chunk) -> Tuple[Dict[str, Tally], List[str]]:
    tallies = {m: Tally() for m in chunk.methods}
    errors: List[str] = []
    theta = chunk.truth if chunk.analytic else None
    for r in range(*chunk.replicates):
        try:
            outcomes = run_replicate(chunk.params, chunk.design, chunk.methods, chunk.seed, r,
                                     chunk.recruitment, theta)
        except EnrichmentError as e:
            for m in chunk.methods:
                tallies[m].n += 1
                tallies[m].n_failed += 1
            errors.append(f"replicate {r}: {type(e).__name__}: {e}")
            continue
        for outcome in outcomes:
            tallies[outcome.method].add(outcome, chunk.truth)
    return tallies, errors


def run_replicates(params: Optional[JointModelParams], design: TrialDesign, methods: Sequence[str], seed: int,
                   start: int, count: int, recruitment: Recruitment, truth: ThetaConfig,
                   analytic: bool = False, jobs: int = 1) -> Tuple[Dict[str, Tally], List[str]]:
    """Replicates [start, start + count) split into chunks; merged tallies are order independent."""
    methods = (ANALYTIC,) if analytic else tuple(methods)
    n_chunks = max(1, min(count, jobs * 4))
    edges = np.linspace(start, start + count, n_chunks + 1).round().astype(int)
    chunks = [_Chunk(params, design, methods, seed, (int(lo), int(hi)), recruitment, truth, analytic)
              for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    total = {m: Tally() for m in methods}
    errors: List[str] = []

    def collect(i: int, result: Tuple[Dict[str, Tally], List[str]]) -> None:
        tallies, errs = result
        for m, t in tallies.items():
            total[m] = total[m] + t
        errors.extend(errs)
        log.info("Replicate chunk complete", chunk=i, of=len(chunks))

    if jobs <= 1:
        for i, chunk in enumerate(chunks, 1):
            collect(i, _run_chunk(chunk))
        return total, errors

    with ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(_run_chunk, c) for c in chunks]
        for i, future in enumerate(as_completed(futures), 1):
            collect(i, future.result())
    return total, errors


def design_for(scenario: Scenario, spec: DesignSpec, config: StudyConfig) -> TrialDesign:
    if config.designs == "table" and scenario.key in PUBLISHED_DESIGNS:
        d1, d_total = PUBLISHED_DESIGNS[scenario.key]
        return TrialDesign(spec, EventsPlan.from_event_counts(spec, d1, d_total))
    null = JointModelParams.scenario("null", spec.lam, gamma=scenario.gamma, sigma2=scenario.sigma ** 2,
                                     phi2=scenario.phi2)
    m = calibrate_m(null, RngStream(config.seed, CALIBRATION_STREAM), method=config.calibration_method.value)
    return TrialDesign(spec, plan_events(spec, m))


def _truth(spec: DesignSpec, effect: str) -> ThetaConfig:
    return spec.theta_alt if effect == "alternative" else spec.theta_null


def run_study(config: StudyConfig, jobs: int = 1) -> StudyReport:
    spec = config.design_spec()
    truth = _truth(spec, config.scenario)
    recruitment = Recruitment(config.n_max, config.accrual_rate)
    methods = [m.value for m in config.methods]
    report = StudyReport(manifest={"seed": str(config.seed), "config_sha256": config_hash(config),
                                   "version": __version__})
    for scenario in scenario_grid(config):
        try:
            params = JointModelParams.scenario(config.scenario, spec.lam, gamma=scenario.gamma,
                                               sigma2=scenario.sigma ** 2, phi2=scenario.phi2)
        except ParameterError as e:
            report.notes.append(f"{scenario.label}: skipped, {e}")
            log.warning("Scenario skipped", scenario=scenario.label, reason=str(e))
            continue
        try:
            design = design_for(scenario, spec, config)
        except EnrichmentError as e:
            report.failures.append(f"{scenario.label}: design failed, {e}")
            log.error("Scenario design failed", scenario=scenario.label, error=str(e))
            continue
        log.info("Running scenario", scenario=scenario.label, d1_stage1=design.plan.d1_stage1,
                 d_total=design.plan.d_total, replicates=config.replicates)
        tallies, errors = run_replicates(params, design, methods, config.seed, config.replicate_start,
                                         config.replicates, recruitment, truth, config.analytic_z, jobs)
        if errors:
            report.failures.append(f"{scenario.label}: {len(errors)} replicate(s) failed, first: {errors[0]}")
        for method, tally in tallies.items():
            report.cells.append(ReportCell(
                scenario=scenario.label, gamma=scenario.gamma, sigma=scenario.sigma, phi2=scenario.phi2,
                effect=config.scenario, method=method, d1_stage1=design.plan.d1_stage1,
                d_total=design.plan.d_total, counts=asdict(tally),
            ))
    return report


class ScanRow(BaseModel):
    theta1: float
    theta2: float
    n: int
    true_null_rejections: int
    rate: float
    se: float
    reference_rate: float
    reference_se: float
    within_tolerance: bool


def within_strong_control(rate: float, se: float, reference_rate: float) -> bool:
    """One-sided: the rate may exceed the global null rate by at most two of its own standard errors."""
    return bool(rate <= reference_rate + 2.0 * se)


def fwer_strong_control_scan(config: ScanConfig, jobs: int = 1) -> List[ScanRow]:
    """
    Rate of rejecting a true null at each (theta1, theta2), checked against the
    global null rate with `within_strong_control`.
    """
    spec = config.design_spec()
    design = TrialDesign(spec, EventsPlan.from_event_counts(spec, config.d1_stage1, config.d_total))
    rates: Dict[Tuple[float, float], Tally] = {}

    def run(theta: ThetaConfig) -> Tally:
        tallies, _ = run_replicates(None, design, (), config.seed, config.replicate_start, config.replicates,
                                    Recruitment(), theta, analytic=True, jobs=jobs)
        return tallies[ANALYTIC]

    thetas = config.thetas(DEFAULT_SCAN_GRID)
    for theta in thetas:
        rates[(theta.theta1, theta.theta2)] = run(theta)
        log.info("Scan point complete", theta1=theta.theta1, theta2=theta.theta2)
    reference = rates.get((0.0, 0.0)) or run(spec.theta_null)
    ref = reference.derived()
    rows = []
    for (t1, t2), tally in rates.items():
        d = tally.derived()
        rows.append(ScanRow(theta1=t1, theta2=t2, n=tally.n, true_null_rejections=tally.n_false_reject,
                            rate=d["fwer"], se=d["fwer_se"], reference_rate=ref["fwer"],
                            reference_se=ref["fwer_se"],
                            within_tolerance=within_strong_control(d["fwer"], d["fwer_se"], ref["fwer"])))
    return rows


def write_scan(rows: Iterable[ScanRow], path: Path, manifest: Dict[str, str]) -> Path:
    buf = io.StringIO()
    pd.DataFrame([r.model_dump() for r in rows]).to_csv(buf, index=False, lineterminator="\n")
    _write_text(path, "# " + " ".join(f"{k}={v}" for k, v in manifest.items()) + "\n" + buf.getvalue())
    return path
