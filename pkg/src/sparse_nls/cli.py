"""``sparse-nls`` command line: fit, select, simulate, bench.

Exit codes: 0 success, 1 input error, 2 numerical stall (the solver or the
selection loop stopped without meeting its convergence criterion).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import STUDIES, StudyError, load_study_config
from .models import (
    DataError,
    Dataset,
    ExpSumModel,
    HeadNeckSurrogate,
    ModelEvaluationError,
    expsum_design,
    expsum_model,
    generate_reference,
    headneck_surrogate,
    read_csv,
    simulate,
    write_csv,
)
from .params import ParameterSpec, SpecError, load_spec, named, vector_from_mapping
from .report import (
    ReportError,
    build_report,
    file_sha256,
    fit_payload,
    now,
    selection_payload,
    write_report,
)
from .selection import InfeasibleTargetError, SelectionConfig, SelectionError, select
from .solver import MultistartError, SolverConfig, fit_multistart, write_trace

EXIT_OK, EXIT_INPUT, EXIT_STALL = 0, 1, 2
MODEL_CLASSES = {"expsum": ExpSumModel, "headneck": HeadNeckSurrogate}


class InputError(ValueError):
    pass


class StallError(RuntimeError):
    pass


# ---------------------------------------------------------------- argument helpers

def parse_mapping(text: str | None) -> dict[str, float]:
    """``name=value,...``, an inline JSON object, or a path to a JSON object file."""
    if not text:
        return {}
    src = text
    if Path(text).is_file():
        src = Path(text).read_text()
    src = src.strip()
    if src.startswith("{"):
        try:
            doc = json.loads(src)
        except json.JSONDecodeError as exc:
            raise InputError(f"{text}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        try:
            return {str(k): float(v) for k, v in doc.items()}
        except (TypeError, ValueError) as exc:
            raise InputError(f"{text}: values must be numbers ({exc})") from None
    out = {}
    for item in filter(None, (s.strip() for s in src.split(","))):
        name, sep, value = item.partition("=")
        if not sep:
            raise InputError(f"expected name=value, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise InputError(f"not a number for {name.strip()!r}: {value!r}") from None
    return out


def guess_model(spec: ParameterSpec) -> str:
    names = spec.names
    if names == headneck_surrogate().spec.names:
        return "headneck"
    if len(names) % 2 == 0 and names == expsum_model(len(names)).spec.names:
        return "expsum"
    raise InputError(f"cannot infer the model from parameters {names}; pass --model")


def build_model(args):
    """Model from ``--model`` and/or ``--spec``, with ``--typical`` applied."""
    if args.spec is None and args.model is None:
        raise InputError("one of --spec or --model is required")
    if args.spec is not None:
        if not Path(args.spec).is_file():
            raise InputError(f"spec file not found: {args.spec}")
        spec = load_spec(args.spec)
        kind = args.model or guess_model(spec)
        model = MODEL_CLASSES[kind](spec)
        spec_name = spec.name
    else:
        model = expsum_model() if args.model == "expsum" else headneck_surrogate()
        spec_name = model.spec.name
    typical = parse_mapping(args.typical)
    if typical:
        model = type(model)(model.spec.with_typical(typical))
    return model, spec_name


def env_jobs(jobs: int) -> int:
    env = os.environ.get("SPARSE_NLS_JOBS")
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise InputError(f"SPARSE_NLS_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise InputError("jobs must be at least 1")
    return jobs


def solver_config(args) -> SolverConfig:
    radius = np.inf if args.unregularized else args.radius
    try:
        return SolverConfig(radius=radius, max_outer=args.max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def load_data(path) -> tuple[Dataset, str]:
    return read_csv(path), file_sha256(path)


def model_config(model, spec_name: str) -> dict:
    return {"model": model.name, "spec_name": spec_name, "spec": model.spec.to_json()}


def print_fit(res) -> None:
    print(f"status: {res.status}  iterations: {res.outer_iters}  S_n: {res.sse:.6g}  VAF: {res.vaf:.2f}%")
    print("active: " + (", ".join(res.active) or "(none)"))


def print_rounds(trace) -> None:
    print(f"{'round':>5}  {'T':>12}  {'NumParams':>9}")
    for i, (t, k) in enumerate(trace, start=1):
        print(f"{i:>5}  {t:>12.6g}  {k:>9d}")


# ---------------------------------------------------------------- subcommands

def cmd_fit(args, argv) -> int:
    started, t0 = now(), time.perf_counter()
    model, spec_name = build_model(args)
    data, digest = load_data(args.data)
    cfg = solver_config(args)
    jobs = env_jobs(args.jobs)
    if args.starts < 1:
        raise InputError("--starts must be at least 1")
    res = fit_multistart(model, data, cfg, n_starts=args.starts, seed=args.seed, jobs=jobs)
    print_fit(res)
    if args.trace:
        write_trace(res, args.trace)
    config = {**model_config(model, spec_name), "data_sha256": digest,
              "radius": cfg.radius, "unregularized": bool(args.unregularized),
              "starts": args.starts, "seed": args.seed, "max_iter": args.max_iter}
    report = build_report("fit", argv, config, spec_name, fit_payload(res),
                          {"vaf": res.vaf}, started, time.perf_counter() - t0,
                          {"solver_wall_time_s": res.wall_time})
    if args.out:
        write_report(report, args.out)
    return EXIT_OK if res.converged else EXIT_STALL


def cmd_select(args, argv) -> int:
    started, t0 = now(), time.perf_counter()
    model, spec_name = build_model(args)
    if args.nstar > model.spec.size:
        raise InputError(f"--nstar {args.nstar} exceeds the {model.spec.size} free parameters")
    try:
        scfg = SelectionConfig(args.nstar, t_init=args.t_init, select_threshold=args.threshold)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    data, digest = load_data(args.data)
    try:
        out = select(model, data, scfg, SolverConfig())
    except SelectionError as exc:
        print_rounds(exc.round_trace)
        raise StallError(str(exc)) from None
    print_rounds(out.round_trace)
    print(f"T = {out.radius:.6g}  selected: {', '.join(out.selected)}")
    print_fit(out.result)
    config = {**model_config(model, spec_name), "data_sha256": digest, "n_star": args.nstar,
              "t_init": args.t_init, "threshold": args.threshold}
    report = build_report("select", argv, config, spec_name, selection_payload(out),
                          {"vaf": out.result.vaf}, started, time.perf_counter() - t0)
    if args.out:
        write_report(report, args.out)
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    started, t0 = now(), time.perf_counter()
    model, spec_name = build_model(args)
    if args.n < 2:
        raise InputError("--n must be at least 2")
    if args.sigma < 0:
        raise InputError("--sigma must be non-negative")
    theta0 = parse_mapping(args.theta0)
    try:
        d = vector_from_mapping(model.spec, theta0)
    except SpecError as exc:
        raise InputError(str(exc)) from None
    if model.name == "headneck":
        inputs = generate_reference(args.n / args.sample_rate, args.sample_rate, seed=args.seed)
    else:
        inputs = expsum_design(args.n, args.x_max, args.sample_rate)
    data = simulate(model, inputs, d, args.sigma, np.random.default_rng([args.seed, 1]))
    write_csv(data, args.out)
    print(f"wrote {len(data)} samples ({len(data) / args.sample_rate:g} s) to {args.out}")
    config = {**model_config(model, spec_name), "theta0": named(model.spec, d), "n": args.n,
              "sigma": args.sigma, "seed": args.seed, "sample_rate": args.sample_rate}
    payload = {"model": model.name, "n": args.n, "sample_rate": args.sample_rate,
               "sigma": args.sigma, "seed": args.seed, "theta0": named(model.spec, d),
               "data_sha256": file_sha256(args.out)}
    report = build_report("simulate", argv, config, spec_name, payload, None,
                          started, time.perf_counter() - t0)
    if args.report:
        write_report(report, args.report)
    return EXIT_OK


def study_metrics(rep) -> dict:
    if rep.kind != "bias_variance":
        return {}
    n = max(int(k) for k in rep.summary)
    cells = [c for c in rep.tables["cells"] if c["n"] == n and c["method"] == "lasso"]
    return {"bias": {c["param"]: c["bias"] for c in cells},
            "variance": {c["param"]: c["variance"] for c in cells},
            "improvement": rep.summary[str(n)]["improvement"]}


def cmd_bench(args, argv) -> int:
    started, t0 = now(), time.perf_counter()
    if not Path(args.config).is_file():
        raise InputError(f"study config not found: {args.config}")
    try:
        kind, cfg = load_study_config(args.config)
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from None
    rep = STUDIES[kind](cfg, jobs=env_jobs(args.jobs))
    print(json.dumps(rep.summary, indent=2, sort_keys=True, default=float))
    if rep.timing:
        print(f"timing: {json.dumps({k: v for k, v in rep.timing.items() if k != 'trials'})}")
    if args.tables:
        for path in rep.write_tables(args.tables):
            print(f"wrote {path}")
    report = build_report("bench", argv, {"study": kind, **cfg.to_json()}, None, rep.to_json(),
                          study_metrics(rep), started, time.perf_counter() - t0,
                          {"study": rep.timing})
    if args.out:
        write_report(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; argparse's default status 2 is reserved for stalls
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _model_args(p):
    p.add_argument("--spec", help="parameter spec JSON (array of {name, min, max, typical|fixed})")
    p.add_argument("--model", choices=sorted(MODEL_CLASSES),
                   help="model; inferred from the spec's parameter names when omitted")
    p.add_argument("--typical", help="typical-value overrides: name=value,... or a JSON object/file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sparse-nls",
                                 description="L1-ball constrained Levenberg-Marquardt estimation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one dataset at a fixed radius")
    p.add_argument("--data", required=True, help="t,x,y CSV")
    _model_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--radius", type=float, help="L1 radius T on the normalized deviations")
    g.add_argument("--unregularized", action="store_true", help="no L1 constraint")
    p.add_argument("--starts", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=200, help="outer LM iterations per start")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace", help="write the per-iteration trace CSV here")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose the radius giving --nstar sensitive parameters")
    p.add_argument("--data", required=True, help="t,x,y CSV")
    _model_args(p)
    p.add_argument("--nstar", type=int, required=True)
    p.add_argument("--t-init", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="write a synthetic t,x,y dataset")
    _model_args(p)
    p.add_argument("--theta0", default="", help="true normalized deviations: name=value,... or JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.05, help="noise sd as a fraction of the clean RMS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=float, default=60.0)
    p.add_argument("--x-max", type=float, default=5.0, help="exp-sum design range")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--report", help="report JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run a Monte Carlo study or timing benchmark")
    p.add_argument("config", help="study config JSON with a 'study' key")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--tables", help="directory for per-table CSV files")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (InputError, DataError, SpecError, InfeasibleTargetError, ReportError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (StallError, ModelEvaluationError, MultistartError, StudyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_STALL


if __name__ == "__main__":
    sys.exit(main())
