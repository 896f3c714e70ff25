"""voxelkit command line: benchmarks, pipelines and phantom synthesis.

Exit codes: 0 success, 2 I/O failure, 3 backends disagree, 4 bad input
structure, 5 invalid numerical input.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import deconv, iosynth, metrics, segmentation, transform
from .bench import MIN_REPEATS, MIN_WARMUP, TimingReport, TimingRow, time_call
from .core import ACCELERATED, REFERENCE, NdImage, to_backend
from .errors import (
    BadMagic,
    DegenerateImage,
    EvenExtent,
    HeaderMismatch,
    NegativeInput,
    PlacementFailure,
    ShapeMismatch,
    TruncatedPayload,
    UnnormalizedPsf,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_MISMATCH = 3
EXIT_STRUCTURE = 4
EXIT_NUMERICAL = 5

RESCALE_TOL = 1e-4
DECONV_TOL = 1e-3

log = logging.getLogger("voxelkit")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument helpers


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _at_least(minimum: int):
    def parse(text: str) -> int:
        v = int(text)
        if v < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {v}")
        return v
    return parse


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _backends(choice: str) -> list:
    return [REFERENCE, ACCELERATED] if choice == "both" else [REFERENCE if choice == "reference" else ACCELERATED]


def _common(p: argparse.ArgumentParser, fmt: bool = True) -> None:
    p.add_argument("--backend", choices=("reference", "accelerated", "both"), default="both")
    p.add_argument("--repeats", type=_at_least(MIN_REPEATS), default=MIN_REPEATS,
                   help=f"timed runs per measurement (>= {MIN_REPEATS})")
    p.add_argument("--warmup", type=_at_least(MIN_WARMUP), default=MIN_WARMUP,
                   help=f"discarded runs before timing (>= {MIN_WARMUP})")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    if fmt:
        p.add_argument("--format", choices=("csv", "json"), default="csv")


def _read(path: Path) -> NdImage:
    try:
        return iosynth.read_volume(path)
    except (OSError, BadMagic, HeaderMismatch, TruncatedPayload) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _write_volume(path: Path, img: NdImage, axes: str | None = None) -> None:
    try:
        iosynth.write_volume(path, img, axes)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _outdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", EXIT_IO) from None
    return path


def _emit_report(report: TimingReport, out: Path, stem: str, fmt: str) -> None:
    report.fill_speedups()
    text = report.render(fmt)
    _write_text(out / f"{stem}.{fmt}", text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# bench-rescale


def _bench_volume(shape: tuple[int, ...], seed: int) -> NdImage:
    # blob radii shrink with the volume so small smoke-test shapes still fit
    m = min(shape)
    spec = iosynth.SynthSpec(shape=shape, n_objects=20, seed=seed, gap=1.0,
                             radius_range=(min(6.0, max(1.0, m / 8)), min(10.0, max(1.5, m / 5))))
    try:
        return iosynth.generate_blobs(spec)[0]
    except PlacementFailure:
        raise CliError(f"cannot fit the benchmark phantom into shape {shape}", EXIT_STRUCTURE) from None


def cmd_bench_rescale(args) -> int:
    out = _outdir(args.out)
    if args.input is not None:
        img = _read(args.input)
        source = str(args.input)
    else:
        img = _bench_volume(tuple(args.shape), args.seed)
        source = "synthetic"
    if img.elem not in ("f32", "u16"):
        raise CliError(f"rescale benchmark needs an intensity image, got {img.elem}", EXIT_STRUCTURE)
    for order in args.orders:
        if not 0 <= order <= 5:
            raise CliError(f"orders must lie in 0..5, got {order}", EXIT_STRUCTURE)
    report = TimingReport()
    diffs: dict[str, float] = {}
    backends = _backends(args.backend)
    for order in args.orders:
        outputs = {}
        for be in backends:
            x = to_backend(img, be)
            median_s, res = time_call(lambda: transform.upscale2x_downscale(x, order), args.repeats, args.warmup)
            outputs[be] = res.data
            report.add(TimingRow("rescale", "upscale2x_downscale", be.value, img.shape,
                                 {"order": order, "factors": [2.0, 0.5], "source": source, "seed": args.seed},
                                 args.repeats, args.warmup, median_s))
            log.info("order %d %s %.4fs", order, be.value, median_s)
        if len(outputs) == 2:
            a, b = (outputs[be].astype(np.float64) for be in backends)
            diffs[str(order)] = float(np.max(np.abs(a - b)))
    report.extra = {"max_abs_diff": diffs, "tolerance": RESCALE_TOL}
    _emit_report(report, out, "bench_rescale", args.format)
    rows = ["order,max_abs_diff,tolerance,ok"]
    rows += [f"{o},{d!r},{RESCALE_TOL},{int(d <= RESCALE_TOL)}" for o, d in diffs.items()]
    _write_text(out / "bench_rescale_agreement.csv", "\n".join(rows) + "\n")
    bad = {o: d for o, d in diffs.items() if not d <= RESCALE_TOL}
    if bad:
        raise CliError(f"backends disagree beyond {RESCALE_TOL}: {bad}", EXIT_MISMATCH)
    return EXIT_OK


# ---------------------------------------------------------------------------
# segment


def _split_channels(img: NdImage) -> tuple[NdImage, NdImage, NdImage]:
    if img.ndim != 4 or img.shape[0] != 3:
        raise CliError(f"segment needs a CZYX volume with 3 channels (membrane, mito, DNA), got shape {img.shape}",
                       EXIT_STRUCTURE)
    chans = [img.derive(img.data[c], spacing=img.spacing[1:] if img.spacing else None) for c in range(3)]
    return chans[0], chans[1], chans[2]


def _run_pipeline(membrane, mito, dna):
    timer = segmentation.StageTimer()
    nuclei = segmentation.segment_nuclei(dna, timer)
    rows_n = [("nuclei/" + n, s) for n, s in timer.rows]
    timer.rows.clear()
    cells = segmentation.segment_cells(membrane, mito, dna, nuclei, timer)
    rows_c = [("cells/" + n, s) for n, s in timer.rows]
    return nuclei, cells, rows_n + rows_c


def cmd_segment(args) -> int:
    out = _outdir(args.out)
    truth = None
    if args.input is not None:
        membrane, mito, dna = _split_channels(_read(args.input))
        source = str(args.input)
    else:
        spec = iosynth.PHANTOM_SPEC
        spec = iosynth.SynthSpec(**{**spec.__dict__, "seed": args.seed})
        truth = iosynth.generate_cell_phantom(spec)
        membrane, mito, dna = truth.membrane, truth.mito, truth.dna
        source = "synthetic"
    report = TimingReport()
    results = {}
    for be in _backends(args.backend):
        chans = [to_backend(c, be) for c in (membrane, mito, dna)]
        stage_times: dict[str, list[float]] = {}
        res = None
        for run in range(args.warmup + args.repeats):
            res = _run_pipeline(*chans)
            if run >= args.warmup:
                for name, s in res[2]:
                    stage_times.setdefault(name, []).append(s)
        results[be] = res
        for name, times in stage_times.items():
            report.add(TimingRow("segment", name, be.value, dna.shape, {"source": source, "seed": args.seed},
                                 args.repeats, args.warmup, float(np.median(times))))
    first = next(iter(results.values()))
    nuclei, cells = first[0], first[1]
    _write_volume(out / "nuclei.ndiv", nuclei)
    _write_volume(out / "cells.ndiv", cells)
    _emit_report(report, out, "segment_timings", args.format)
    if truth is not None:
        reports = [
            metrics.MetricReport("ap_nuclei", metrics.average_precision(nuclei, truth.nuclei), {"iou_threshold": 0.5}),
            metrics.MetricReport("ap_cells", metrics.average_precision(cells, truth.cells), {"iou_threshold": 0.5}),
        ]
        for name, inten, pred, gt in (("nuclei", dna, nuclei, truth.nuclei), ("cells", membrane, cells, truth.cells)):
            p, s = metrics.masked_quality(inten, inten, pred, gt)
            reports.append(metrics.MetricReport(f"masked_psnr_{name}", p, {"channel": "dna" if name == "nuclei" else "membrane"}))
            reports.append(metrics.MetricReport(f"masked_ssim_{name}", s, {"channel": "dna" if name == "nuclei" else "membrane"}))
        _write_text(out / "segment_metrics.json", metrics.reports_to_json(reports))
    if len(results) == 2:
        (n0, c0, _), (n1, c1, _) = results.values()
        if not (np.array_equal(n0.data, n1.data) and np.array_equal(c0.data, c1.data)):
            raise CliError("reference and accelerated label images differ", EXIT_MISMATCH)
    return EXIT_OK


# ---------------------------------------------------------------------------
# deconvolve


def _psf_from_args(args, ndim: int) -> NdImage:
    if args.psf is not None:
        return _read(args.psf)
    sigmas = args.gaussian
    if len(sigmas) != ndim:
        raise CliError(f"--gaussian needs {ndim} sigmas, got {len(sigmas)}", EXIT_STRUCTURE)
    shape = [2 * math.ceil(3 * s) + 1 for s in sigmas] if args.psf_shape is None else args.psf_shape
    return iosynth.gaussian_psf(shape, sigmas)


def cmd_deconvolve(args) -> int:
    out = _outdir(args.out)
    truth = None
    if args.input is not None:
        observed = _read(args.input)
        source = str(args.input)
    else:
        ph = iosynth.generate_deconv_phantom(noise_seed=args.seed)
        observed, truth = ph.observed, ph.truth
        source = "synthetic"
        if args.psf is None and args.gaussian is None:
            args.gaussian, args.psf_shape = [1.0, 2.0, 2.0], list(ph.psf.shape)
    if args.psf is None and args.gaussian is None:
        raise CliError("give --psf PATH or --gaussian SZ,SY,SX", EXIT_STRUCTURE)
    psf = _psf_from_args(args, observed.ndim)
    rule = deconv.StoppingRule(args.metric, args.rel_tol, args.patience, args.max_iters)
    traces = {}
    report = TimingReport()
    estimate = None
    for be in _backends(args.backend):
        o, k = to_backend(observed, be), to_backend(psf, be)
        median_s, (est, trace) = time_call(lambda: deconv.richardson_lucy(o, k, rule, args.init),
                                           args.repeats, args.warmup)
        report.add(TimingRow("deconvolve", "richardson_lucy", be.value, observed.shape,
                             {"metric": rule.metric, "rel_tol": rule.rel_tol, "patience": rule.patience,
                              "max_iters": rule.max_iters, "init": args.init, "source": source,
                              "seed": args.seed, "iters": len(trace)},
                             args.repeats, args.warmup, median_s))
        traces[be] = trace
        suffix = "" if len(_backends(args.backend)) == 1 else f"_{be.value}"
        _write_volume(out / f"estimate{suffix}.ndiv", est)
        _write_text(out / f"trace{suffix}.csv", trace.to_csv())
        if estimate is None:
            estimate = est
    first = next(iter(traces.values()))
    summary = {
        "schema": 1,
        "iters_run": len(first),
        "final_metric": _json_float(first.values[-1]),
        "stop_reason": first.stop_reason,
        "metric": rule.metric,
        "source": source,
    }
    if truth is not None:
        summary["si_psnr_observed"] = _json_float(metrics.si_psnr(observed, truth))
        summary["si_psnr_estimate"] = _json_float(metrics.si_psnr(estimate, truth))
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit_report(report, out, "deconvolve_timings", args.format)
    if len(traces) == 2:
        a, b = (t.values for t in traces.values())
        n = min(len(a), len(b))
        for va, vb in zip(a[:n], b[:n]):
            if not _close(va, vb, DECONV_TOL):
                raise CliError(f"per-iteration metrics differ beyond {DECONV_TOL}: {va} vs {vb}", EXIT_MISMATCH)
    return EXIT_OK


def _json_float(v: float):
    return v if math.isfinite(v) else str(v)


def _close(a: float, b: float, rtol: float) -> bool:
    if a == b:
        return True
    if not (math.isfinite(a) and math.isfinite(b)):
        return False
    return abs(a - b) <= rtol * max(abs(a), abs(b))


# ---------------------------------------------------------------------------
# synth and export-slice


def cmd_synth(args) -> int:
    out = _outdir(args.out)
    spec = iosynth.SynthSpec(shape=tuple(args.shape), n_objects=args.n_objects,
                             radius_range=(args.radius_min, args.radius_max), seed=args.seed,
                             noise_sigma=args.noise, anisotropy=args.anisotropy, gap=args.gap)
    if args.kind == "cells":
        ph = iosynth.generate_cell_phantom(spec)
        stack = np.stack([ph.membrane.data, ph.mito.data, ph.dna.data])
        _write_volume(out / "image.ndiv", NdImage(stack), "CZYX")
        _write_volume(out / "nuclei.ndiv", ph.nuclei)
        _write_volume(out / "labels.ndiv", ph.cells)
    else:
        img, lab = iosynth.generate_blobs(spec)
        _write_volume(out / "image.ndiv", img)
        _write_volume(out / "labels.ndiv", lab)
    return EXIT_OK


def cmd_export_slice(args) -> int:
    out = _outdir(args.out)
    img = _read(args.input)
    if not -img.ndim <= args.axis < img.ndim:
        raise CliError(f"axis {args.axis} out of range for a {img.ndim}-D image", EXIT_STRUCTURE)
    n = img.shape[args.axis]
    if not -n <= args.index < n:
        raise CliError(f"index {args.index} out of range for extent {n}", EXIT_STRUCTURE)
    iosynth.export_slice(img, args.axis, args.index, out / f"{args.input.stem}_axis{args.axis}_{args.index}.pgm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-rescale", help="time 2x upscale then 0.5x downscale per spline order")
    _common(p)
    p.add_argument("--input", type=Path, help="NDIV volume (default: synthetic blobs)")
    p.add_argument("--shape", type=_int_list, default=[60, 256, 256], help="synthetic volume shape")
    p.add_argument("--orders", type=_int_list, default=[0, 1, 2, 3, 4, 5])
    p.set_defaults(func=cmd_bench_rescale)

    p = sub.add_parser("segment", help="nuclei and cell segmentation of a membrane/mito/DNA volume")
    _common(p)
    p.add_argument("--input", type=Path, help="CZYX NDIV with channels membrane, mito, DNA (default: phantom)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("deconvolve", help="Richardson-Lucy deconvolution with metric-based stopping")
    _common(p)
    p.add_argument("--input", type=Path, help="NDIV volume (default: blurred synthetic phantom)")
    p.add_argument("--psf", type=Path, help="NDIV point spread function")
    p.add_argument("--gaussian", type=_float_list, help="Gaussian PSF sigmas per axis, e.g. 1,2,2")
    p.add_argument("--psf-shape", type=_int_list, help="Gaussian PSF extents (odd; default 2*ceil(3*sigma)+1)")
    p.add_argument("--metric", choices=deconv.METRICS, default="frc_resolution")
    p.add_argument("--rel-tol", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--init", choices=("observed", "flat"), default="observed")
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("synth", help="write a synthetic phantom and its labels")
    _common(p, fmt=False)
    p.add_argument("--kind", choices=("blobs", "cells"), default="blobs")
    p.add_argument("--shape", type=_int_list, default=[32, 128, 128])
    p.add_argument("--n-objects", type=int, default=20)
    p.add_argument("--radius-min", type=float, default=6.0)
    p.add_argument("--radius-max", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--anisotropy", type=float, default=1.0)
    p.add_argument("--gap", type=float, default=2.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-slice", help="write one plane of a volume as an 8-bit PGM")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(func=cmd_export_slice)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (UnnormalizedPsf, NegativeInput, DegenerateImage) as exc:
        log.error("invalid numerical input: %s", exc)
        return EXIT_NUMERICAL
    except (ShapeMismatch, EvenExtent) as exc:
        log.error("bad input structure: %s", exc)
        return EXIT_STRUCTURE
    except ValueError as exc:
        log.error("bad input: %s", exc)
        return EXIT_STRUCTURE
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
