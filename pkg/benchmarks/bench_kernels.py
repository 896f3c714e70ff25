"""Time the compiled kernels against the pure-Python reference.

    python benchmarks/bench_kernels.py --shape 60,256,256 --out runs/

Each kernel runs on both backends with the same input; the report has one
row per (kernel, backend) and the accelerated rows carry the speedup.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from voxelkit import HAVE_COMPILED, deconv, filters, segmentation, transform
from voxelkit.bench import MIN_REPEATS, MIN_WARMUP, TimingReport, TimingRow, time_call
from voxelkit.core import ACCELERATED, REFERENCE, NdImage, thread_count, to_backend
from voxelkit.filters import StructuringElement
from voxelkit.iosynth import SynthSpec, gaussian_psf, generate_blobs


def _workloads(img: NdImage) -> dict:
    psf = gaussian_psf((9, 17, 17), (1.0, 2.0, 2.0))
    counts = img.derive(np.maximum(img.data, 0) * 1000 + 10)
    mask = img.derive(img.data > 0.5)

    def rl(x):
        p = deconv.prepare_problem(to_backend(counts, x.backend), to_backend(psf, x.backend))
        return lambda: deconv.rl_step(p.observed, p.observed, p.forward, p.backward)

    return {
        "gaussian": ({"sigma": 2.0}, lambda x: lambda: filters.gaussian(x, 2.0)),
        "median": ({"se": "ball", "radius": 3}, lambda x: lambda: filters.median(x, StructuringElement.ball(3, 3))),
        "rescale": ({"order": 3, "factors": [2.0, 0.5]}, lambda x: lambda: transform.upscale2x_downscale(x, 3)),
        "rl_step": ({"psf": list(psf.shape)}, rl),
        "distance_transform": ({}, lambda x: lambda: segmentation.distance_transform(to_backend(mask, x.backend))),
        "connected_components": ({"connectivity": "face"},
                                 lambda x: lambda: segmentation.connected_components(to_backend(mask, x.backend))),
    }


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", default="60,256,256", help="volume shape, e.g. 30,128,128")
    ap.add_argument("--kernels", help="comma-separated subset (default: all)")
    ap.add_argument("--repeats", type=int, default=MIN_REPEATS)
    ap.add_argument("--warmup", type=int, default=MIN_WARMUP)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--format", choices=("csv", "json"), default="csv")
    ap.add_argument("--out", type=Path, help="directory for bench_kernels.<format> (default: stdout only)")
    args = ap.parse_args(argv)

    shape = tuple(int(s) for s in args.shape.split(","))
    m = min(shape)
    spec = SynthSpec(shape=shape, n_objects=20, seed=args.seed, gap=1.0,
                     radius_range=(min(6.0, max(1.0, m / 8)), min(10.0, max(1.5, m / 5))))
    img = generate_blobs(spec)[0]
    work = _workloads(img)
    chosen = args.kernels.split(",") if args.kernels else list(work)
    unknown = sorted(set(chosen) - set(work))
    if unknown:
        ap.error(f"unknown kernels {unknown}; choose from {sorted(work)}")

    report = TimingReport(extra={"compiled": HAVE_COMPILED, "threads": thread_count()})
    for name in chosen:
        params, make = work[name]
        for be in (REFERENCE, ACCELERATED):
            median_s, _ = time_call(make(to_backend(img, be)), args.repeats, args.warmup)
            report.add(TimingRow("kernels", name, be.value, shape, params, args.repeats, args.warmup, median_s))
            print(f"{name:>22} {be.value:>11} {median_s:8.3f}s", file=sys.stderr)
    report.fill_speedups()
    text = report.render(args.format)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"bench_kernels.{args.format}").write_text(text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
