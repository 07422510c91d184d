"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a PASS/FAIL line (run with ``-s`` to see them inline); the
lines are repeated in the terminal summary.
"""

import re
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from latentfusion.align import DepthMlpParams, align_image_features
from latentfusion.autodiff import Tensor
from latentfusion.bench import bench_ecmi_vs_qkv
from latentfusion.errors import ParseError
from latentfusion.geometry import (
    FeatureMap,
    PixelCoords,
    bilinear_sample,
    parse_kitti_calib,
    project_points,
    serialize_kitti_calib,
)
from latentfusion.latent import EcmiParams, ecmi
from latentfusion.pipeline import (
    FusionConfig,
    generate_synthetic_scene,
    kitti_like_calibration,
    object_voxel_counts,
    read_kitti_cloud,
    write_kitti_cloud,
)
from latentfusion.selftest import gradient_suite, oracle_gap
from latentfusion.voxel import LinearParams, downsample_stage, pyramid_fuse, voxelize

DATA = Path(__file__).parent / "data"


def oracle_sample(values, stride, uv):
    h, w, c = values.shape
    out = np.zeros((len(uv), c))
    for m, (u, v) in enumerate(uv):
        x = min(max(u / stride, 0.0), w - 1)
        y = min(max(v / stride, 0.0), h - 1)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        ax, ay = x - x0, y - y0
        out[m] = (
            (1 - ax) * (1 - ay) * values[y0, x0] + ax * (1 - ay) * values[y0, x1]
            + (1 - ax) * ay * values[y1, x0] + ax * ay * values[y1, x1]
        )
    return out


def pixels(uv):
    uv = np.asarray(uv, dtype=np.float64)
    return PixelCoords(uv, np.ones(len(uv)), np.ones(len(uv), bool))


def test_1_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    worst = {}
    for N, c, n in ((64, 16, 4), (256, 32, 8)):
        worst[N] = max(oracle_gap(N, c, n, seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 10
    detail = f"rel err {worst[64]:.1e} / {worst[256]:.1e}, {elapsed:.1f}s"
    assert verdict("1 oracle equivalence (20 seeds, <1e-6, <10s)", ok, detail)


def test_2_gradient_integrity(verdict):
    t0 = time.perf_counter()
    results = gradient_suite(eps=1e-5, limit=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.value)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 60
    detail = f"{len(results)} checks, worst {worst.value:.1e} ({worst.name}), {elapsed:.1f}s"
    if failed:
        detail += f", failed: {', '.join(failed)}"
    assert verdict("2 gradient integrity (eps 1e-5, <1e-4, <60s)", ok, detail)


@pytest.mark.slow
def test_3_complexity(verdict):
    t0 = time.perf_counter()
    report = bench_ecmi_vs_qkv([1024, 2048, 4096, 8192, 16384], n=16, c=64, reps=7)
    elapsed = time.perf_counter() - t0
    e, q = report.ecmi_slope.slope, report.qkv_slope.slope
    speedup = report.speedup_at(8192)
    ok = 0.85 <= e <= 1.15 and 1.7 <= q <= 2.3 and speedup >= 4 and elapsed < 300
    detail = f"ecmi slope {e:.3f}, qkv slope {q:.3f}, speedup@8192 {speedup:.1f}x, {elapsed:.0f}s"
    assert verdict("3 complexity (slopes in window, >=4x at 8192, <5min)", ok, detail)


def test_4_identity_invariants(verdict):
    rng = np.random.default_rng(4)

    params = EcmiParams.init(rng, 16, 4)
    params = replace(params, w=Tensor(np.zeros_like(params.w.data)))
    f, v = Tensor(rng.normal(size=(64, 16))), Tensor(rng.normal(size=(64, 16)))
    ft, vt = ecmi(f, v, params)
    ecmi_ok = np.array_equal(ft.data, f.data) and np.array_equal(vt.data, v.data)

    config = FusionConfig()
    cloud = generate_synthetic_scene(4, 3, config).cloud
    chans = (8, 12, 16, 16)
    stages = [voxelize(cloud, config.voxel, LinearParams.init(rng, 4, chans[0]))]
    for j in range(3):
        stages.append(downsample_stage(stages[-1], LinearParams.init(rng, chans[j], chans[j + 1])))
    zeros = [Tensor(np.zeros((chans[j + 1], chans[j]))) for j in range(3)]
    fused = pyramid_fuse(stages, zeros)
    pyramid_ok = all(np.array_equal(a.features.data, b.features.data) for a, b in zip(fused, stages))

    calib = kitti_like_calibration()
    fine = stages[0]
    fmap = FeatureMap(Tensor(rng.normal(size=(93, 306, 8))), 4, 1)
    gate = DepthMlpParams.init(rng, 8)
    gate = replace(gate, fc2=LinearParams(Tensor(np.zeros_like(gate.fc2.weight.data)), Tensor(np.full(8, 800.0))))
    gated = align_image_features(fine, calib, fmap, gate)
    raw = bilinear_sample(fmap, project_points(fine.centers, calib))
    gate_ok = gated.valid.any() and np.array_equal(gated.values.data, raw.data)

    detail = f"ecmi {ecmi_ok}, pyramid {pyramid_ok}, gate {gate_ok}"
    assert verdict("4 identity invariants (exact equality)", ecmi_ok and pyramid_ok and gate_ok, detail)


def test_5_geometry(verdict):
    rng = np.random.default_rng(5)
    calib = parse_kitti_calib((DATA / "000000.txt").read_text())
    pts = np.column_stack([rng.uniform(2, 60, 200), rng.uniform(-20, 20, 200), rng.uniform(-2, 1, 200)])
    px = project_points(pts, calib)
    proj_err = 0.0
    for p, uv in zip(pts, px.uv):
        h = calib.cam_projection @ (calib.rect @ (calib.lidar_to_cam @ np.append(p, 1.0)))
        proj_err = max(proj_err, np.abs(h[:2] / h[2] - uv).max())

    vals = rng.normal(size=(24, 40, 6))
    uv = rng.uniform(-10, 330, size=(300, 2))
    got = bilinear_sample(FeatureMap(Tensor(vals), 8, 1), pixels(uv)).data
    bilinear_err = np.abs(got - oracle_sample(vals, 8, uv)).max()

    up_err = 0.0
    hw = (96, 160)
    for stride in (4, 8, 16, 32):
        hj, wj = -(-hw[0] // stride), -(-hw[1] // stride)
        gv, gu = np.meshgrid(np.arange(hj) * stride, np.arange(wj) * stride, indexing="ij")
        fu, fv, ph = rng.uniform(0.005, 0.03, size=(3, 4))
        smooth = np.sin(fu * gu[..., None] + ph) * np.cos(fv * gv[..., None])
        fmap = FeatureMap(Tensor(smooth), stride, 1)
        vv, uu = np.meshgrid(np.arange(hw[0], dtype=float), np.arange(hw[1], dtype=float), indexing="ij")
        full = bilinear_sample(fmap, pixels(np.column_stack([uu.ravel(), vv.ravel()]))).data.reshape(*hw, -1)
        q = rng.uniform(0, [hw[1] - 1, hw[0] - 1], size=(200, 2))
        up_err = max(up_err, np.abs(oracle_sample(full, 1, q) - bilinear_sample(fmap, pixels(q)).data).max())

    ok = proj_err < 1e-9 and bilinear_err < 1e-12 and up_err < 1e-6
    detail = f"projection {proj_err:.1e}px, bilinear {bilinear_err:.1e}, upsample-then-index {up_err:.1e}"
    assert verdict("5 geometry (1e-9 / 1e-12 / 1e-6)", ok, detail)


def _diagnostic(fn, pattern):
    try:
        fn()
    except ParseError as exc:
        return re.search(pattern, str(exc)) is not None
    return False


def test_6_parser_robustness(verdict, tmp_path):
    text = (DATA / "000000.txt").read_text()
    calib = parse_kitti_calib(text)
    again = parse_kitti_calib(serialize_kitti_calib(calib))
    calib_ok = all(
        getattr(again, k).tobytes() == getattr(calib, k).tobytes() for k in ("cam_projection", "rect", "lidar_to_cam")
    )
    cloud = read_kitti_cloud(DATA / "000000.bin")
    write_kitti_cloud(tmp_path / "copy.bin", cloud)
    cloud_ok = (tmp_path / "copy.bin").read_bytes() == (DATA / "000000.bin").read_bytes()

    (tmp_path / "short.bin").write_bytes(b"\x00" * 20)
    (tmp_path / "empty.bin").write_bytes(b"")
    without_p2 = "\n".join(ln for ln in text.splitlines() if not ln.startswith("P2:"))
    cases = {
        "short row": (lambda: parse_kitti_calib("R0_rect: 1 0 0 0 1 0 0 0 1\nP2: 1 2 3\n"),
                      r"line 2: P2 has 3 values, expected 12"),
        "missing key": (lambda: parse_kitti_calib(without_p2), r"missing calibration key 'P2'"),
        "non-numeric": (lambda: parse_kitti_calib(text.replace("9.999128000000e-01", "nine")), r"R0_rect"),
        "truncated cloud": (lambda: read_kitti_cloud(tmp_path / "short.bin"), r"multiple of 16"),
        "empty cloud": (lambda: read_kitti_cloud(tmp_path / "empty.bin"), r"empty"),
    }
    bad = [name for name, (fn, pat) in cases.items() if not _diagnostic(fn, pat)]
    ok = calib_ok and cloud_ok and not bad
    detail = f"calib round trip {calib_ok}, cloud round trip {cloud_ok}, diagnostics {len(cases) - len(bad)}/{len(cases)}"
    assert verdict("6 parser robustness (bit-exact, diagnostics)", ok, detail)


def test_7_structural_fidelity(verdict):
    cfg = FusionConfig()
    near_far = []
    for seed in range(5):
        frame = generate_synthetic_scene(seed, 0, cfg, placements=[(10.0, 1.0), (60.0, 1.0)])
        counts = object_voxel_counts(frame, cfg.voxel)
        near_far.append((counts[0][0], counts[1][0]))
    distance_ok = all(far < near for near, far in near_far)

    shrink_ok = True
    for seed in range(5):
        frame = generate_synthetic_scene(seed, 6, cfg)
        shrink_ok &= all(c[3] <= c[0] for c in object_voxel_counts(frame, cfg.voxel).values())

    detail = f"stage-1 counts (10m, 60m): {near_far}, stage-4 <= stage-1 for all objects {shrink_ok}"
    assert verdict("7 structural fidelity (far < near, stage 4 <= stage 1)", distance_ok and shrink_ok, detail)


def test_8_determinism(verdict, tmp_path):
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "latentfusion.cli", "run", "--synthetic", "--seed", "7", "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    assert verdict("8 determinism (run --synthetic --seed 7 twice)", ok, f"{len(outs[0])} bytes")
