"""Command line interface: fit, calibrate, study, monitor, simulate.

Exit codes are stable: 0 ok, 2 input or parse problem, 3 fit failure,
4 calibration failure, 5 invalid shift. Every output file embeds a run
manifest whose argv re-runs the command bit-identically (payload bytes).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as fio
from .calibrate import calibrate_h
from .chart import ChartConfig, run_stream
from .errors import (
    CalibrationError,
    DataFormatError,
    FitError,
    ModelConfigError,
    ShiftError,
)
from .likelihood import expected_score_covariance, fit_mle
from .mc import PatientGenerator
from .model import model_hash
from .shifts import (
    ShiftSpec,
    StudyGrid,
    apply_shift,
    in_control_generator,
    run_arl_study,
    sample_patients,
    validate_shift_targets,
)
from .version import __version__


def _err(msg: str) -> None:
    print(f"score-mewma: {msg}", file=sys.stderr)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _target_arl(text: str) -> float:
    value = float(text)
    if not value > 1.0:
        raise argparse.ArgumentTypeError("target ARL must exceed 1")
    return value


def _chart_sigma(model, params, args):
    mode = getattr(args, "sigma_mode", "exact")
    cov = expected_score_covariance(
        model.spec,
        params,
        model.covariates,
        mc_fallback=(mode == "mc"),
        enum_limit=0 if mode == "mc" else 16,
        mc_samples=getattr(args, "sigma_samples", 100_000),
        seed=getattr(args, "seed", 0) or 0,
    )
    return cov


def _load_model_and_params(args):
    model = fio.load_model_config(args.model_config)
    params = fio.load_params_file(args.params, model.spec)
    return model, params


def cmd_fit(args) -> int:
    model = fio.load_model_config(args.model_config)
    data = fio.read_patient_csv(args.data_csv, model.spec)
    fit = fit_mle(model.spec, data)
    payload = {
        "model_hash": model_hash(model),
        "n_records": len(data),
        "log_likelihood": fit.log_likelihood,
        "converged": fit.converged,
        "params": fit.params.as_dict(),
        "std_errors": {n: float(se) for n, se in zip(fit.params.names, fit.std_errors)},
        "nodes": {
            r.node_id: {"iterations": r.iterations, "converged": r.converged, "score_max": r.score_max}
            for r in fit.node_reports
        },
    }
    manifest = fio.make_manifest("fit", args.argv, model_hash(model), seed=None, config={})
    fio.write_json_report(args.out, manifest, payload)
    return 0


def cmd_calibrate(args) -> int:
    model, params = _load_model_and_params(args)
    sigma = _chart_sigma(model, params, args)
    config = ChartConfig(
        sigma_s=sigma.values,
        r=args.r,
        h=None,
        covariance_mode=args.covariance_mode,
        warmup=args.warmup,
        coord_names=params.names,
    )
    reps = args.reps
    schedule = tuple(sorted({max(100, reps // 10), max(500, reps // 3), reps}))
    max_rl = args.max_rl if args.max_rl else int(round(20 * args.target_arl))
    result = calibrate_h(
        in_control_generator(model),
        params,
        config,
        target_arl=args.target_arl,
        rel_tolerance=args.rel_tolerance,
        reps_schedule=schedule,
        seed=args.seed,
        max_rl=max_rl,
        threads=args.threads,
    )
    echo = {
        "target_arl": args.target_arl,
        "r": args.r,
        "warmup": args.warmup,
        "covariance_mode": args.covariance_mode,
        "sigma_s_mode": sigma.mode,
        "rel_tolerance": args.rel_tolerance,
        "reps_schedule": list(schedule),
        "max_rl": max_rl,
        "seed": args.seed,
    }
    payload = {
        "model_hash": model_hash(model),
        "h": result.h,
        "achieved_arl": result.achieved_arl.as_dict(),
        "iterations": result.iterations,
        "bracket": list(result.bracket),
        "warnings": list(result.warnings),
        "config": echo,
    }
    manifest = fio.make_manifest("calibrate", args.argv, model_hash(model), seed=args.seed, config=echo)
    fio.write_json_report(args.out, manifest, payload)
    return 0


def _parse_targets(text: str) -> tuple[str, ...]:
    targets = tuple(t.strip() for t in text.split(",") if t.strip())
    if not targets:
        raise ShiftError("no shift targets given")
    return targets


def cmd_study(args) -> int:
    model, params = _load_model_and_params(args)
    targets = _parse_targets(args.targets)
    validate_shift_targets(model.spec, params, args.shift, targets)
    placeholder = 1.0 if args.shift == "mean-odds" else 0.0
    template = ShiftSpec(kind=args.shift, targets=targets, c=placeholder)
    c_values = fio.parse_c_grid(args.c_grid)
    sigma = _chart_sigma(model, params, args)
    config = ChartConfig(
        sigma_s=sigma.values,
        r=args.r,
        h=args.h,
        covariance_mode=args.covariance_mode,
        warmup=args.warmup,
        coord_names=params.names,
    )
    grid = StudyGrid(shift=template, c_values=tuple(c_values), reps=args.reps, chart=config, max_rl=args.max_rl)
    rows = run_arl_study(in_control_generator(model), params, grid, seed=args.seed, threads=args.threads)
    echo = {
        "shift": args.shift,
        "targets": list(targets),
        "c_grid": args.c_grid,
        "reps": args.reps,
        "h": args.h,
        "r": args.r,
        "warmup": args.warmup,
        "covariance_mode": args.covariance_mode,
        "sigma_s_mode": sigma.mode,
        "max_rl": args.max_rl,
        "seed": args.seed,
    }
    manifest = fio.make_manifest("study", args.argv, model_hash(model), seed=args.seed, config=echo)
    fio.write_study_csv(args.out, manifest, rows)
    if args.emit_plot_data:
        fio.write_plot_csv(args.emit_plot_data, manifest, rows)
    return 0


def cmd_monitor(args) -> int:
    model, params = _load_model_and_params(args)
    sigma = _chart_sigma(model, params, args)
    config = ChartConfig(
        sigma_s=sigma.values,
        r=args.r,
        h=args.h,
        covariance_mode=args.covariance_mode,
        warmup=args.warmup,
        coord_names=params.names,
    )
    echo = {
        "h": args.h,
        "r": args.r,
        "warmup": args.warmup,
        "covariance_mode": args.covariance_mode,
        "sigma_s_mode": sigma.mode,
    }
    manifest = fio.make_manifest("monitor", args.argv, model_hash(model), seed=None, config=echo)

    infile = sys.stdin if args.data_csv == "-" else open(args.data_csv, "r", encoding="utf-8")
    outfile = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8", newline="\n")
    try:
        fio._write_manifest_line(outfile, manifest)
        outfile.write("t,t2,signal,post_signal\n")
        outfile.flush()
        rows = fio.iter_patient_rows(infile, model.spec)
        records = (record for _, record in rows)
        signalled = False
        for t, t2, signal in run_stream(model.spec, params, config, records):
            outfile.write(f"{t},{t2!r},{int(signal)},{int(signalled)}\n")
            outfile.flush()
            signalled = signalled or signal
    finally:
        if infile is not sys.stdin:
            infile.close()
        if outfile is not sys.stdout:
            outfile.close()
    return 0


def cmd_simulate(args) -> int:
    model, params = _load_model_and_params(args)
    # generation follows the supplied params, not the config's bundled values
    generator = PatientGenerator(spec=model.spec, params=params, covariates=model.covariates)
    shift_echo = None
    if args.shift or args.targets or args.c is not None:
        if not (args.shift and args.targets and args.c is not None):
            raise ShiftError("--shift, --targets and --c must be given together")
        targets = _parse_targets(args.targets)
        validate_shift_targets(model.spec, params, args.shift, targets)
        generator = apply_shift(generator, ShiftSpec(kind=args.shift, targets=targets, c=args.c))
        shift_echo = {"shift": args.shift, "targets": list(targets), "c": args.c}
    data = sample_patients(generator, args.n, np.random.default_rng(args.seed))
    echo = {"n": args.n, "seed": args.seed}
    if shift_echo:
        echo.update(shift_echo)
    manifest = fio.make_manifest("simulate", args.argv, model_hash(model), seed=args.seed, config=echo)
    fio.write_patient_csv(args.out, model.spec, data, manifest)
    return 0


def _add_chart_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=float, default=0.1, help="EWMA smoothing weight (default 0.1)")
    p.add_argument("--warmup", type=_positive_int, default=1, help="patients before signals count")
    p.add_argument(
        "--covariance-mode",
        choices=["exact-recursive", "asymptotic"],
        default="exact-recursive",
        help="chart covariance: time-varying recursion or its limit",
    )
    p.add_argument("--sigma-mode", choices=["exact", "mc"], default="exact",
                   help="score covariance by exact enumeration or Monte Carlo")
    p.add_argument("--sigma-samples", type=_positive_int, default=100_000,
                   help="samples for --sigma-mode mc")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: SCORE_MEWMA_THREADS or auto)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="score-mewma",
        description="Score-based MEWMA monitoring of multistage procedures with binary outcomes.",
    )
    parser.add_argument("--version", action="version", version=f"score-mewma {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit reference coefficients to a patient CSV")
    p.add_argument("model_config")
    p.add_argument("data_csv")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="find the control limit for a target in-control ARL")
    p.add_argument("model_config")
    p.add_argument("params")
    p.add_argument("--target-arl", type=_target_arl, required=True)
    p.add_argument("--reps", type=_positive_int, default=10_000, help="final-stage replications")
    p.add_argument("--rel-tolerance", type=float, default=0.02)
    p.add_argument("--max-rl", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_chart_options(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("study", help="out-of-control ARL table over a shift grid")
    p.add_argument("model_config")
    p.add_argument("params")
    p.add_argument("--shift", required=True,
                   choices=["coefficient", "coefficient-pair", "mean-additive", "mean-odds"])
    p.add_argument("--targets", required=True, help="comma-separated coefficient or outcome names")
    p.add_argument("--c-grid", required=True, help="list a,b,c or range start:stop:step")
    p.add_argument("--h", type=float, required=True, help="calibrated control limit")
    p.add_argument("--reps", type=_positive_int, default=5000)
    p.add_argument("--max-rl", type=_positive_int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-plot-data", metavar="PATH", default=None)
    _add_chart_options(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("monitor", help="stream a patient CSV through the chart")
    p.add_argument("model_config")
    p.add_argument("params")
    p.add_argument("data_csv", nargs="?", default="-", help="patient CSV path or - for stdin")
    p.add_argument("--h", type=float, required=True)
    _add_chart_options(p)
    p.add_argument("-o", "--out", required=True, help="trace CSV path or - for stdout")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("simulate", help="write a synthetic patient CSV")
    p.add_argument("model_config")
    p.add_argument("params")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", default=None,
                   choices=["coefficient", "coefficient-pair", "mean-additive", "mean-odds"])
    p.add_argument("--targets", default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = tuple(argv)
    try:
        return args.func(args)
    except (ModelConfigError, DataFormatError) as exc:
        _err(str(exc))
        return 2
    except FileNotFoundError as exc:
        _err(f"file not found: {exc.filename}")
        return 2
    except FitError as exc:
        _err(str(exc))
        return 3
    except CalibrationError as exc:
        _err(str(exc))
        return 4
    except ShiftError as exc:
        _err(str(exc))
        return 5


def rerun_from_manifest(output_path: str, out: str) -> int:
    """Re-run the command recorded in an output file's manifest.

    The recorded argv is replayed with its output redirected to ``out``;
    payloads must come out byte-identical.
    """
    manifest = fio.read_manifest(output_path)
    if manifest is None:
        raise DataFormatError(f"{output_path}: no run manifest found")
    argv = list(manifest["argv"])
    for flag in ("-o", "--out"):
        if flag in argv:
            argv[argv.index(flag) + 1] = out
            break
    else:
        argv += ["-o", out]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
