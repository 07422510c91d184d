"""Command-line entry point: ``run``, ``bench`` and ``selftest``.

Exit codes: 0 ok, 1 contract/parse/I-O error, 2 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bench import bench_ecmi_vs_qkv, emit_report
from .errors import FusionError, ParseError
from .pipeline import (
    FusionConfig,
    RunReport,
    Toggles,
    generate_synthetic_scene,
    init_params,
    load_kitti_frame,
    run_pipeline,
)

log = logging.getLogger("latentfusion")

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2

# Benchmark acceptance window
ECMI_SLOPE = (0.85, 1.15)
QKV_SLOPE = (1.7, 2.3)
MIN_SPEEDUP = 4.0
SPEEDUP_AT = 8192


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "json"


def discover_frames(root: Path) -> list[tuple[Path, Path]]:
    """(cloud, calib) pairs from a KITTI ``velodyne/`` + ``calib/`` layout or a flat directory."""
    cloud_dir = root / "velodyne" if (root / "velodyne").is_dir() else root
    calib_dir = root / "calib" if (root / "calib").is_dir() else root
    pairs = []
    for cloud in sorted(cloud_dir.glob("*.bin")):
        calib = calib_dir / f"{cloud.stem}.txt"
        if not calib.is_file():
            raise ParseError(f"{cloud}: no calibration file {calib}")
        pairs.append((cloud, calib))
    if not pairs:
        raise ParseError(f"{root}: no *.bin point clouds found")
    return pairs


def _config(args) -> FusionConfig:
    return FusionConfig(channels=tuple(args.channels), latent_n=args.latent_n)


def _kitti_summary(job):
    cloud, calib, config, toggles, param_seed = job
    # one BLAS thread per worker; frames run in parallel instead
    with threadpool_limits(limits=1):
        frame = load_kitti_frame(cloud, calib, config)
        out = run_pipeline(frame, init_params(config, param_seed), toggles, config)
    return frame.name, out


def cmd_run(args) -> int:
    config = _config(args)
    toggles = Toggles.parse(args.toggles)
    meta = {
        "source": "synthetic" if args.synthetic else "kitti",
        "seed": args.seed,
        "objects": args.objects,
        "param_seed": args.param_seed,
        "toggles": toggles.label(),
        "config": config.to_dict(),
    }
    report = RunReport(meta)
    if args.synthetic:
        frame = generate_synthetic_scene(args.seed, args.objects, config)
        with threadpool_limits(limits=1):
            out = run_pipeline(frame, init_params(config, args.param_seed), toggles, config)
        report.add(frame.name, out, args.timings)
    else:
        jobs = [(c, k, config, toggles, args.param_seed) for c, k in discover_frames(Path(args.frame_dir))]
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                results = list(pool.map(_kitti_summary, jobs))
        else:
            results = [_kitti_summary(job) for job in jobs]
        for name, out in results:
            report.add(name, out, args.timings)
    path = Path(args.out)
    emit_report(report, _format_for(path, args.format), path)
    for fr in report.frames:
        counts = ", ".join(str(st["n_voxels"]) for st in fr["stages"])
        log.info("%s: voxels per stage [%s]", fr["frame"], counts)
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_bench(args) -> int:
    report = bench_ecmi_vs_qkv(args.sizes, args.latent_n, args.channels, args.reps, args.seed, args.chunk_rows)
    path = Path(args.out)
    emit_report(report, _format_for(path, args.format), path)
    for row in report.rows:
        log.info("N=%6d  ecmi %.5fs  qkv %.5fs  x%.1f", row.N, row.ecmi_median_s, row.qkv_median_s, row.speedup)
    if report.ecmi_slope is not None:
        log.info("slopes: ecmi %.3f  qkv %.3f", report.ecmi_slope.slope, report.qkv_slope.slope)
    if not args.check:
        return EXIT_OK
    checks = []
    if report.ecmi_slope is not None:
        checks.append(("ecmi slope", ECMI_SLOPE[0] <= report.ecmi_slope.slope <= ECMI_SLOPE[1]))
        checks.append(("qkv slope", QKV_SLOPE[0] <= report.qkv_slope.slope <= QKV_SLOPE[1]))
    if any(r.N == SPEEDUP_AT for r in report.rows):
        checks.append((f"speedup at N={SPEEDUP_AT}", report.speedup_at(SPEEDUP_AT) >= MIN_SPEEDUP))
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_CHECK


def cmd_selftest(args) -> int:
    from .selftest import gradient_suite, oracle_suite

    results = oracle_suite(args.seeds) + gradient_suite()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the fusion pipeline and write a stage report")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--frame-dir", help="KITTI-style directory (velodyne/*.bin, calib/*.txt)")
    src.add_argument("--synthetic", action="store_true", help="generate a synthetic scene")
    run.add_argument("--seed", type=int, default=7, help="synthetic scene seed")
    run.add_argument("--objects", type=int, default=5, help="objects in the synthetic scene")
    run.add_argument("--param-seed", type=int, default=0, help="parameter initialization seed")
    run.add_argument("--toggles", default="saf,sam,lfm", help="enabled components, or 'none'")
    run.add_argument("--channels", type=_int_list, default=[16, 32, 64, 64])
    run.add_argument("--latent-n", type=int, default=8)
    run.add_argument("--workers", type=int, default=1, help="parallel frames (KITTI mode)")
    run.add_argument("--timings", action="store_true", help="include wall times (breaks byte-identity)")
    run.add_argument("--format", choices=("json", "csv"))
    run.add_argument("--out", default="report.json")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="time latent fusion against QKV cross attention")
    bench.add_argument("--sizes", type=_int_list, default=[1024, 2048, 4096, 8192, 16384])
    bench.add_argument("--latent-n", type=int, default=16)
    bench.add_argument("--channels", type=int, default=64)
    bench.add_argument("--reps", type=int, default=7)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--chunk-rows", type=int, default=2048, help="query rows per QKV block")
    bench.add_argument("--check", action="store_true", help="exit 2 if the scaling checks fail")
    bench.add_argument("--format", choices=("json", "csv"))
    bench.add_argument("--out", default="bench.csv")
    bench.set_defaults(func=cmd_bench)

    selftest = sub.add_parser("selftest", help="oracle-equivalence and gradient suites")
    selftest.add_argument("--seeds", type=int, default=20)
    selftest.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (FusionError, OSError, ValueError) as exc:
        log.error("error: %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
