"""Command-line front end: ``tcbct {simulate,reconstruct,pipeline,metrics,export}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config, io, metrics
from .errors import ConfigError, DivergenceError, FormatError, TcbctError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
PRIOR_ALIASES = {"none": "none", "fdk": "fdk", "sqs": "sqs_coarse", "sqs_coarse": "sqs_coarse",
                 "inr": "inr"}

log = logging.getLogger("tcbct")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap on worker threads; 1 gives bitwise-reproducible runs")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _load_phantom(source: str, scale: float):
    from .phantom import builtin_head_phantom, load_phantom

    ph = builtin_head_phantom() if source == "builtin" else load_phantom(source)
    return ph.scaled(scale) if scale != 1.0 else ph


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .projector import simulate_projections

    geom = config.load_geometry(args.geometry)
    ph = _load_phantom(args.phantom, args.scale)
    p = simulate_projections(ph, geom, noise_sigma=args.noise, seed=args.seed)
    io.write_projections(args.out, p)
    print(f"wrote={args.out}\nshape={'x'.join(map(str, p.data.shape))}\nmax={float(p.data.max()):.9g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .fdk import FilterSpec, fdk_reconstruct
    from .sqs import SqsConfig, sqs_reconstruct

    p = io.read_projections(args.inp)
    grid = config.load_grid(args.grid, args.section)
    filt = FilterSpec(args.filter)
    if args.method == "fdk":
        vol = fdk_reconstruct(p, grid, filt)
    else:
        cfg = SqsConfig(n_iters=args.iters, lam=args.lam, delta=args.delta,
                        nonneg=not args.allow_negative, init=args.init)
        vol, trace = sqs_reconstruct(p, grid, cfg, filt)
        print(f"objective_initial={trace[0].total:.9g}\nobjective_final={trace[-1].total:.9g}")
    io.write_volume(args.out, vol)
    print(f"wrote={args.out}")
    return EXIT_OK


def _experiment(args):
    exp = config.load_experiment(args.config, PRIOR_ALIASES[args.prior] if args.prior else None)
    pipe = exp.pipeline
    if args.steps is not None:
        pipe = dataclasses.replace(pipe, train=dataclasses.replace(pipe.train, steps=args.steps))
    if args.iters is not None:
        pipe = dataclasses.replace(pipe, sqs_fine=dataclasses.replace(pipe.sqs_fine, n_iters=args.iters))
    return exp, pipe


def cmd_pipeline(args) -> int:
    from .correction import PipelineError, run_pipeline
    from .phantom import voxelize
    from .projector import simulate_projections

    exp, pipe = _experiment(args)
    truth = None
    if args.inp:
        p = io.read_projections(args.inp)
        if p.geom != exp.geometry:
            log.warning("projection file geometry differs from [geometry] in %s; using the file's", args.config)
    else:
        ph = _load_phantom(exp.phantom.source, exp.phantom.scale)
        p = simulate_projections(ph, exp.geometry, exp.phantom.noise, exp.phantom.seed)
        truth = voxelize(ph, pipe.fine_grid, 2)
    if args.truth:
        truth = io.read_volume(args.truth)

    try:
        vol, report = run_pipeline(p, pipe)
    except PipelineError as exc:
        log.error("pipeline failed in stage %s", exc.stage)
        raise (exc.__cause__ or exc) from None
    io.write_volume(args.out, vol)
    if args.checkpoint and report.model is not None:
        io.write_checkpoint(args.checkpoint, report.model)

    lines = {"prior": pipe.prior_kind, "volume": str(args.out)}
    for stage in ("prior", "mask", "correct", "reconstruct"):
        lines[f"time_{stage}_s"] = float(report.timings.get(stage, 0.0))
    lines["time_total_s"] = float(sum(report.timings.values()))
    lines["fine_iters"] = len(report.fine_trace) - 1
    lines["objective_initial"] = report.fine_trace[0].total
    lines["objective_final"] = report.fine_trace[-1].total
    if report.inr_losses:
        lines["inr_steps"] = len(report.inr_losses)
        lines["inr_loss_initial"] = float(report.inr_losses[0])
        lines["inr_loss_final"] = float(np.mean(report.inr_losses[-50:]))
    if truth is not None:
        roi = metrics.interior_roi(pipe.fine_grid)
        lines["mae_interior"] = metrics.mae(vol, truth, roi)
        lines["rmse_interior"] = metrics.rmse(vol, truth, roi)
        lines["mae_all"] = metrics.mae(vol, truth)

    text = metrics.format_metrics(lines)
    report_path = Path(args.report)
    report_path.write_text(text)
    sys.stdout.write(text)

    if not args.no_figures:
        from .plotting import comparison_figure, trace_figure

        stem = report_path.with_suffix("")
        panels = {"truth": truth} if truth is not None else {}
        panels[f"prior={pipe.prior_kind}"] = vol
        figs = [comparison_figure(panels, f"{stem}_slices.png", args.wl, args.ww)]
        traces = {"fine": [o.total for o in report.fine_trace]}
        if report.coarse_trace:
            traces["coarse"] = [o.total for o in report.coarse_trace]
        figs.append(trace_figure(traces, f"{stem}_objective.png", "objective"))
        if report.inr_losses:
            figs.append(trace_figure({"inr": report.inr_losses}, f"{stem}_inr_loss.png", "L1 loss"))
        for f in figs:
            print(f"figure={f}")
    return EXIT_OK


def _parse_roi(text: str, grid):
    if text == "all":
        return None
    if text == "interior":
        return metrics.interior_roi(grid)
    if text.startswith("box:"):
        try:
            vals = [float(v) for v in text[4:].split(",")]
        except ValueError:
            raise ConfigError(f"box roi has a non-numeric entry: {text!r}") from None
        if len(vals) != 6:
            raise ConfigError("box roi needs six comma-separated numbers")
        return metrics.BoxRoi(tuple(vals[:3]), tuple(vals[3:]))
    raise ConfigError(f"unknown roi {text!r}; use all, interior or box:x0,y0,z0,x1,y1,z1")


def cmd_metrics(args) -> int:
    a, b = io.read_volume(args.a), io.read_volume(args.b)
    roi = _parse_roi(args.roi, a.grid)
    vals = {"rmse": metrics.rmse(a, b, roi), "mae": metrics.mae(a, b, roi)}
    if args.peak is not None:
        vals["psnr"] = metrics.psnr(a, b, args.peak, roi)
    sys.stdout.write(metrics.format_metrics(vals))
    return EXIT_OK


def cmd_export(args) -> int:
    vol = io.read_volume(args.inp)
    io.export_slice(vol, args.axis, args.index, args.wl, args.ww, args.out)
    print(f"wrote={args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcbct", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="analytic projections of a phantom")
    p.add_argument("--phantom", default="builtin", help="phantom file, or 'builtin'")
    p.add_argument("--scale", type=float, default=1.0, help="isotropic phantom scale about the origin")
    p.add_argument("--geometry", required=True, help="INI file with a [geometry] section")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma on line integrals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output projection file")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="FDK or SQS reconstruction on one grid")
    p.add_argument("--method", required=True, choices=("fdk", "sqs"))
    p.add_argument("--in", dest="inp", required=True, help="input projection file")
    p.add_argument("--grid", required=True, help="INI file with a [grid] or [fine_grid] section")
    p.add_argument("--section", default=None, help="grid section name to read")
    p.add_argument("--out", required=True, help="output volume file")
    p.add_argument("--iters", type=int, default=100, help="SQS iterations")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="regularization weight")
    p.add_argument("--delta", type=float, default=1e-3, help="Huber transition (mm^-1)")
    p.add_argument("--init", choices=("zero", "fdk"), default="zero")
    p.add_argument("--allow-negative", action="store_true", help="drop the nonnegativity constraint")
    p.add_argument("--filter", choices=("ramp", "ramp_hann"), default="ramp_hann")
    _common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("pipeline", help="two-grid truncation-corrected reconstruction")
    p.add_argument("--prior", choices=tuple(PRIOR_ALIASES), default=None,
                   help="coarse prior; overrides [pipeline] prior")
    p.add_argument("--config", required=True, help="experiment INI (geometry, grids, solvers)")
    p.add_argument("--in", dest="inp", default=None,
                   help="projection file; simulated from [phantom] when omitted")
    p.add_argument("--truth", default=None, help="ground-truth volume on the fine grid")
    p.add_argument("--out", required=True, help="output volume file")
    p.add_argument("--report", required=True, help="key=value report; figures go beside it")
    p.add_argument("--checkpoint", default=None, help="save the trained INR here")
    p.add_argument("--steps", type=int, default=None, help="override INR training steps")
    p.add_argument("--iters", type=int, default=None, help="override fine SQS iterations")
    p.add_argument("--wl", type=float, default=0.02, help="figure window level")
    p.add_argument("--ww", type=float, default=0.03, help="figure window width")
    p.add_argument("--no-figures", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("metrics", help="compare two volumes on the same grid")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--roi", default="all", help="all, interior, or box:x0,y0,z0,x1,y1,z1")
    p.add_argument("--peak", type=float, default=None, help="peak value for PSNR")
    _common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export", help="window one slice into a 16-bit PGM")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--axis", required=True, choices=io.AXES)
    p.add_argument("--index", required=True, type=int)
    p.add_argument("--wl", required=True, type=float, help="window level")
    p.add_argument("--ww", required=True, type=float, help="window width")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .projector import set_threads

    set_threads(args.threads)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TcbctError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
