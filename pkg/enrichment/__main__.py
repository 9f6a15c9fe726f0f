import argparse
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial, reduce
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
import structlog
from rich import print
from rich.table import Table

from enrichment import __version__
from enrichment.config import (
    ALL_METHODS,
    CalibrateConfig,
    ReportConfig,
    ScanConfig,
    Settings,
    SimulateConfig,
    StudyConfig,
    config_hash,
    load_config,
)
from enrichment.design import DesignReport, EventsPlan, MConstants, Selection, TrialDesign, calibrate_m, plan_events
from enrichment.errors import ConfigError, EnrichmentError, NumericalError, ParameterError
from enrichment.numerics import RngStream
from enrichment.simdata import JointModelParams, export_dataset, simulate_population
from enrichment.study import (
    CALIBRATION_STREAM,
    StudyReport,
    emit_report,
    fwer_strong_control_scan,
    run_study,
    write_scan,
)
from enrichment.trial import Recruitment, TrialOutcome, run_replicate

log = structlog.get_logger("enrichment")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

CONFIGS = {
    "calibrate": CalibrateConfig,
    "simulate": SimulateConfig,
    "study": StudyConfig,
    "fwer-scan": ScanConfig,
    "report": ReportConfig,
}


def configure_logging(out: Path, verbosity: int, default_level: str) -> None:
    if verbosity > 1:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.getLevelName(default_level.upper())
        level = level if isinstance(level, int) else logging.WARNING
    out.mkdir(parents=True, exist_ok=True)
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.WriteLoggerFactory(
            file=(out / "enrichment").with_suffix(".log").open("wt")
        ),
    )


def manifest(doc) -> Dict[str, str]:
    return {"seed": str(getattr(doc, "seed", "")), "config_sha256": config_hash(doc), "version": __version__}


def write_frame(df: pd.DataFrame, path: Path, header: Dict[str, str]) -> Path:
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\n")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n" + buf.getvalue(),
                    encoding="utf-8", newline="\n")
    return path


def cmd_calibrate(cfg: CalibrateConfig, out: Path, jobs: int, args) -> int:
    spec = cfg.design_spec()
    log.info("Selection threshold solved", zeta=spec.zeta, info1_req=spec.info1_req)
    if cfg.m is not None:
        m = MConstants.common(cfg.m)
    else:
        m = calibrate_m(cfg.joint_params(), RngStream(cfg.seed, CALIBRATION_STREAM), method=cfg.method.value,
                        n_patients=cfg.n_patients, accrual_rate=cfg.accrual_rate,
                        n_snapshots=cfg.n_snapshots, min_events=cfg.min_events)
    plan = plan_events(spec, m)
    report = DesignReport.build(spec, plan)
    path = out / "design.json"
    report.save(path)

    table = Table(title="Design")
    table.add_column("field")
    table.add_column("value", justify="right")
    for key, value in report.model_dump(by_alias=True).items():
        table.add_row(key, ", ".join(f"{v:.6g}" for v in value) if isinstance(value, list) else f"{value:.6g}")
    print(table)
    print(f"Design report written to {path}")
    return EXIT_OK


def _simulate_chunk(params: Optional[JointModelParams], design: TrialDesign, methods: List[str], seed: int,
                    recruitment: Recruitment, theta, replicates: range) -> List[TrialOutcome]:
    outcomes = []
    for r in replicates:
        outcomes.extend(run_replicate(params, design, methods, seed, r, recruitment, theta))
    return outcomes


def cmd_simulate(cfg: SimulateConfig, out: Path, jobs: int, args) -> int:
    if cfg.design_report is not None:
        design = DesignReport.load(cfg.design_report).to_design()
    else:
        spec = cfg.design_spec()
        design = TrialDesign(spec, EventsPlan.from_event_counts(spec, cfg.d1_stage1, cfg.d_total))
    spec = design.spec
    params = cfg.joint_params(spec.lam)
    truth = spec.theta_alt if cfg.scenario == "alternative" else spec.theta_null
    theta = truth if cfg.analytic_z else None
    recruitment = Recruitment(cfg.n_max, cfg.accrual_rate)
    methods = [m.value for m in cfg.methods]
    replicates = range(cfg.replicate_start, cfg.replicate_start + cfg.replicates)

    run_chunk = partial(_simulate_chunk, params, design, methods, cfg.seed, recruitment, theta)
    if jobs <= 1:
        outcomes = run_chunk(replicates)
    else:
        chunks = [replicates[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            outcomes = [o for part in executor.map(run_chunk, chunks) for o in part]
        outcomes.sort(key=lambda o: (o.replicate, methods.index(o.method) if o.method in methods else 0))
    log.info("Trials simulated", replicates=len(replicates), outcomes=len(outcomes))

    if args.export_data and not cfg.analytic_z:
        rng = RngStream(cfg.seed, cfg.replicate_start)
        dataset = simulate_population(params, recruitment.n_max, recruitment.accrual_rate, rng)
        export_dataset(dataset, out, prefix=f"replicate_{cfg.replicate_start}")

    df = pd.DataFrame([o.row() for o in outcomes])
    path = write_frame(df, out / "outcomes.csv", manifest(cfg))

    table = Table(title=f"{len(replicates)} replicates, scenario {cfg.scenario}")
    for col in ("method", "valid", "rejections", "selected S1"):
        table.add_column(col, justify="right")
    for method in dict.fromkeys(o.method for o in outcomes):
        valid = [o for o in outcomes if o.method == method and o.valid]
        table.add_row(method, str(len(valid)), str(sum(o.rejects for o in valid)),
                      str(sum(o.selection is Selection.S1 for o in valid)))
    print(table)
    print(f"Outcomes written to {path}")
    return EXIT_OK


def cmd_study(cfg: StudyConfig, out: Path, jobs: int, args) -> int:
    report = run_study(cfg, jobs=jobs)
    emit_report(report, out)
    print(report.summary_table())
    for note in report.notes:
        print(f"[yellow]{note}[/yellow]")
    for failure in report.failures:
        print(f"[red]{failure}[/red]")
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_fwer_scan(cfg: ScanConfig, out: Path, jobs: int, args) -> int:
    rows = fwer_strong_control_scan(cfg, jobs=jobs)
    path = write_scan(rows, out / "fwer_scan.csv", manifest(cfg))
    table = Table(title="Rejection of a true null")
    for col in ("theta1", "theta2", "rate", "se", "global null", "ok"):
        table.add_column(col, justify="right")
    for r in rows:
        table.add_row(f"{r.theta1:g}", f"{r.theta2:g}", f"{r.rate:.4f}", f"{r.se:.4f}",
                      f"{r.reference_rate:.4f}", "yes" if r.within_tolerance else "[red]no[/red]")
        if not r.within_tolerance:
            log.warning("Error rate above global null", theta1=r.theta1, theta2=r.theta2, rate=r.rate,
                        reference=r.reference_rate)
    print(table)
    print(f"Scan written to {path}")
    return EXIT_OK


def cmd_report(cfg: ReportConfig, out: Path, jobs: int, args) -> int:
    merged = reduce(StudyReport.merge, (StudyReport.read_csv(p) for p in cfg.inputs))
    emit_report(merged, out)
    print(merged.summary_table())
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "fwer-scan": cmd_fwer_scan,
    "report": cmd_report,
}

HELP = {
    "calibrate": "Solve the design and write design.json",
    "simulate": "Simulate trials and write one outcome row per replicate and method",
    "study": "Power and error rates over a scenario grid",
    "fwer-scan": "Rejection rate of a true null over (theta1, theta2)",
    "report": "Merge study CSVs from disjoint replicate ranges",
}


def parse_methods(value: str) -> List[str]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    if names == ["all"]:
        return list(ALL_METHODS)
    unknown = [n for n in names if n not in ALL_METHODS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown method(s) {unknown}; choose from {ALL_METHODS} or 'all'")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enrichment",
                                     description="Design and simulate two-stage adaptive enrichment trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("-c", "--config", type=Path, help="JSON configuration document")
        p.add_argument("--seed", type=int, help="Base seed for every random stream")
        p.add_argument("--replicates", type=int, help="Number of replicates")
        p.add_argument("--replicate-start", type=int, help="First replicate index (for sharding)")
        p.add_argument("-j", "--jobs", type=int, help="Worker processes (default: ENRICHMENT_JOBS or all cores)")
        p.add_argument("-o", "--out", type=Path, help="Output directory")
        p.add_argument("-m", "--methods", type=parse_methods, help="Comma-separated analysis methods, or 'all'")
        p.add_argument("--analytic-z", action="store_const", const=True, default=None,
                       help="Draw test statistics from their planned joint law instead of simulating data")
        p.add_argument("--export-data", action="store_true", help="simulate: also write the first replicate's data")
        p.add_argument("-v", "--verbosity", action="count", default=0,
                       help="Increase log verbosity (-v for INFO, -vv for DEBUG)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings.from_env()
    model = CONFIGS[args.command]
    flags = {"seed": args.seed, "replicates": args.replicates, "replicate_start": args.replicate_start,
             "jobs": args.jobs, "out": args.out, "methods": args.methods, "analytic_z": args.analytic_z}
    ignored = [k for k, v in flags.items() if v is not None and k not in model.model_fields]
    overrides = {k: v for k, v in flags.items() if k in model.model_fields}
    try:
        cfg = load_config(model, args.config, **overrides)
    except ConfigError as e:
        print(f"[red]Configuration error:[/red] {e}")
        return EXIT_CONFIG

    out = Path(cfg.out or settings.out)
    try:
        configure_logging(out, args.verbosity, settings.log_level)
    except OSError as e:
        print(f"[red]Cannot write to {out}:[/red] {e}")
        return EXIT_CONFIG
    if ignored:
        log.warning("Flags not used by this command", command=args.command, flags=ignored)
    jobs = getattr(cfg, "jobs", None) or settings.jobs
    log.info("Starting command", command=args.command, config=str(args.config), out=str(out), jobs=jobs)

    try:
        code = COMMANDS[args.command](cfg, out, jobs, args)
    except (ConfigError, ParameterError) as e:
        print(f"[red]Configuration error:[/red] {e}")
        log.error("Configuration error", error=str(e))
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"[red]Numerical failure:[/red] {type(e).__name__}: {e}")
        log.error("Numerical failure", error=str(e), kind=type(e).__name__)
        return EXIT_NUMERIC
    except EnrichmentError as e:
        print(f"[red]Error:[/red] {type(e).__name__}: {e}")
        log.error("Command failed", error=str(e), kind=type(e).__name__)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"[red]I/O error:[/red] {e}")
        log.error("I/O error", error=str(e))
        return EXIT_CONFIG
    log.info("Command finished", command=args.command, exit_code=code)
    return code


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
