"""Command-line driver: phantom, project, degrade, recon, metrics, tune, experiment."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import GridGeometry, ReconConfig, Volume, read_sinogram, read_volume, write_sinogram, write_volume
from .experiment import (METHODS, as_f32, degrade_sinogram, deterministic_reports, evaluate,
                         load_scenario, make_phantom, project_volume, reconstruct, run_scenario)
from .metrics import RoiSpec, phantom_roi, report_table
from .projector import build_system_matrix
from .sdr import grid_search_lambda2, l_curve_tune_lambda1

log = logging.getLogger("sdrct")


class StageError(RuntimeError):
    pass


class _Outputs:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self):
        self.paths = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self):
        for p in self.paths:
            for q in (p, p.with_name(p.name + ".json")):
                if q.is_file():
                    q.unlink()


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SDR_CT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise SystemExit(f"SDR_CT_THREADS must be an integer, got {env!r}")
        if n >= 1:
            return n
    return os.cpu_count() or 1


def parse_grid(text: str) -> list:
    """``a:b:c`` (start:step:stop, inclusive) or a comma-separated list."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, step, stop = parts
            if step <= 0 or stop < start:
                raise ValueError
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + k * step, 12) for k in range(n)]
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"cannot parse grid {text!r}; use start:step:stop or a comma list") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise ValueError(f"cannot parse grid {text!r}")
    return values


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _write_trace(path, trace) -> None:
    _write_csv(path, ["iteration", "relative_change"],
               [[k + 1, f"{v:.9g}"] for k, v in enumerate(trace)])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom(args, out: _Outputs) -> int:
    data = make_phantom(args.size, args.variant)
    g = GridGeometry(args.size, 1, args.size)
    write_volume(Volume(g, data), out.add(args.out))
    print(f"phantom {args.size}x{args.size}x{args.size}, values in [{data.min():g}, {data.max():g}]")
    return 0


def cmd_project(args, out: _Outputs) -> int:
    vol = read_volume(args.volume)
    sino = project_volume(vol.data, args.angles, args.step)
    write_sinogram(sino, out.add(args.out))
    g = sino.geometry
    print(f"sinogram dims [{g.detector_count}, {g.angle_count}, {g.slice_count}]")
    return 0


def cmd_degrade(args, out: _Outputs) -> int:
    sino = read_sinogram(args.sino)
    sino = degrade_sinogram(sino, args.sigma, args.max_shift, args.seed)
    write_sinogram(sino, out.add(args.out))
    print(f"masked fraction {sino.mask.invalid_fraction:.6f}")
    return 0


def _recon_config(args) -> ReconConfig:
    kw = dict(threads=_threads(args))
    for name, key in [("lambda1", "lambda1"), ("lambda2", "lambda2"), ("alpha", "alpha"),
                      ("max_iter", "max_outer_iterations"), ("tol", "convergence_threshold"),
                      ("fusion_signs", "fusion_signs"), ("tv_grad_variant", "tv_grad_variant"),
                      ("subsets", "ossirt_subsets")]:
        value = getattr(args, name, None)
        if value is not None:
            kw[key] = value
    return ReconConfig(**kw)


def cmd_recon(args, out: _Outputs) -> int:
    sino = read_sinogram(args.sino)
    config = _recon_config(args)
    run = reconstruct(args.method, sino, config)
    g = sino.geometry
    vol = Volume(GridGeometry(g.side_length, 1, g.slice_count, g.pixel_size), run.volume)
    write_volume(vol, out.add(args.out))
    if args.method != "fbp":
        trace = args.trace or str(args.out) + ".trace.csv"
        _write_trace(out.add(trace), run.trace)
    print(f"{args.method}: {run.iterations} iterations")
    return 0


def _load_roi(spec: str, side_length: int, slice_index: int) -> RoiSpec:
    if spec == "phantom" or spec.startswith("phantom:"):
        variant = spec.split(":", 1)[1] if ":" in spec else "modified"
        return phantom_roi(side_length, slice_index, variant)
    with np.load(spec) as z:
        return RoiSpec(z["target"], z["background"])


def cmd_metrics(args, out: _Outputs) -> int:
    recon = read_volume(args.recon)
    wanted = {m.strip().lower() for m in args.metrics.split(",")} if args.metrics else None
    truth = read_volume(args.truth).data if args.truth else None
    if wanted:
        unknown = wanted - {"snr", "ssim", "cnr", "nrss"}
        if unknown:
            raise ValueError(f"unknown metric(s): {', '.join(sorted(unknown))}")
        for m in ("snr", "ssim"):
            if m in wanted and truth is None:
                raise ValueError(f"{m.upper()} requires --truth")
        if "cnr" in wanted and not args.roi:
            raise ValueError("CNR requires --roi")
    S = recon.data.shape[0]
    k = S // 2 - 1 if args.roi_slice is None else args.roi_slice
    roi = _load_roi(args.roi, recon.geometry.side_length, k) if args.roi else None
    rep = evaluate(recon.data, truth, roi, k, method=Path(args.recon).name, scenario="mid20",
                   iterations=0, seconds=math.nan)
    fields = {"snr": "snr_db", "ssim": "ssim", "cnr": "cnr", "nrss": "nrss"}
    if wanted is not None:
        rep = replace(rep, **{v: math.nan for m, v in fields.items() if m not in wanted})
    rows = []
    for l in range(S):
        values = {v: rep.per_slice[v][l] if v in rep.per_slice and not math.isnan(getattr(rep, v))
                  else math.nan for v in ("snr_db", "ssim", "nrss")}
        rows.append(replace(rep, scenario=f"slice{l}", cnr=math.nan, **values))
    text = report_table(rows + [rep])
    if args.out:
        out.add(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_tune(args, out: _Outputs) -> int:
    grid = parse_grid(args.grid)
    sino = read_sinogram(args.sino)
    config = _recon_config(args)
    W = build_system_matrix(sino.geometry.with_slices(1))
    if args.param == "lambda1":
        if len(grid) < 3:
            raise ValueError("curvature undefined: lambda1 tuning needs at least 3 grid points")
        l = sino.geometry.slice_count // 2 - 1 if args.slice is None else args.slice
        l = max(l, 0)
        selected, rows = l_curve_tune_lambda1(*sino.slice_rays(l), W, grid, config)
        header = ["lambda1", "residual", "tv"]
        body = [[f"{a:g}", f"{b:.9g}", f"{c:.9g}"] for a, b, c in rows]
    else:
        truth = read_volume(args.truth).data if args.truth else None
        selected, rows = grid_search_lambda2(sino, W, grid, config, truth=truth)
        header = ["lambda2", "score"]
        body = [[f"{a:g}", f"{b:.9g}"] for a, b in rows]
    _write_csv(out.add(args.out), header, body)
    print(f"selected {args.param} = {selected:g}")
    return 0


def cmd_experiment(args, out: _Outputs) -> int:
    sc = load_scenario(args.config)
    if args.output_dir:
        sc = replace(sc, output_dir=args.output_dir)
    sc = replace(sc, recon=replace(sc.recon, threads=_threads(args)))
    outdir = Path(sc.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    stage = ["setup"]

    def hook(name):
        stage[0] = name
        log.info("stage %s", name)

    try:
        res = run_scenario(sc, hook)
        stage[0] = "report"
        out.add(outdir / "table.csv").write_text(report_table(deterministic_reports(res.reports)))
        _write_csv(out.add(outdir / "timings.csv"), ["method", "seconds"],
                   [[r.method, f"{r.seconds:.3f}"] for r in res.runs])
        _write_csv(out.add(outdir / "traces.csv"), ["method", "iteration", "relative_change"],
                   [[r.method, k + 1, f"{v:.9g}"] for r in res.runs for k, v in enumerate(r.trace)])
        if sc.figures and not args.no_figures:
            stage[0] = "figures"
            from .plotting import plot_slices, plot_traces
            k = sc.side_length // 2 - 1
            plot_traces({r.method: r.trace for r in res.runs if r.trace}, out.add(outdir / "traces.png"))
            images = {"truth": res.truth[k]}
            images.update({r.method: as_f32(r.volume[k]) for r in res.runs})
            plot_slices(images, out.add(outdir / "slices.png"), vmax=float(res.truth[k].max()))
    except Exception as exc:
        raise StageError(f"stage '{stage[0]}' failed: {exc}") from exc
    sys.stdout.write(report_table(res.reports))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _min_size(text: str) -> int:
    n = int(text)
    if n < 8:
        raise argparse.ArgumentTypeError("size must be at least 8")
    return n


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdrct", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a 3D Shepp-Logan volume")
    p.add_argument("--size", type=_min_size, required=True, help="edge length L (>= 8)")
    p.add_argument("--variant", choices=["modified", "standard"], default="modified")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="simulate clean parallel-beam projections")
    p.add_argument("--volume", required=True)
    p.add_argument("--angles", type=_positive_int, required=True)
    p.add_argument("--step", type=float, default=0.5, help="sampling step along each ray")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("degrade", help="add blank edges and Gaussian noise")
    p.add_argument("--sino", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--max-shift", type=int, default=None,
                   help="largest edge loss per side (default: 5%% of the detector)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    def recon_options(p):
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--max-iter", type=_positive_int)
        p.add_argument("--tol", type=float, help="early-stop threshold on the relative change")
        p.add_argument("--subsets", type=_positive_int, help="OSSIRT subset count")
        p.add_argument("--fusion-signs", choices=["consistent", "as_printed"])
        p.add_argument("--tv-grad-variant", choices=["symmetric", "as_printed"])
        p.add_argument("--threads", type=_positive_int)

    p = sub.add_parser("recon", help="reconstruct a sinogram stack")
    p.add_argument("--sino", required=True)
    p.add_argument("--method", required=True,
                   help=f"one of: {', '.join(METHODS)}")
    recon_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="relative-change CSV (default: <out>.trace.csv)")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("metrics", help="score a reconstruction")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth")
    p.add_argument("--roi", help="'phantom[:variant]' or an .npz with target/background masks")
    p.add_argument("--roi-slice", type=int, help="slice used for CNR (default L/2-1)")
    p.add_argument("--metrics", help="comma list of snr,ssim,cnr,nrss to require")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("tune", help="scan a regularisation weight")
    p.add_argument("--sino", required=True)
    p.add_argument("--param", choices=["lambda1", "lambda2"], required=True)
    p.add_argument("--grid", required=True, help="start:step:stop or a comma list")
    p.add_argument("--truth", help="score lambda2 by SNR against this volume")
    p.add_argument("--slice", type=int, help="slice for the lambda1 L-curve")
    recon_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("experiment", help="run a full scenario from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--threads", type=_positive_int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "recon" and args.method not in METHODS:
        parser.error(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    out = _Outputs()
    try:
        return args.func(args, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a clean exit code
        out.cleanup()
        print(f"sdrct {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
