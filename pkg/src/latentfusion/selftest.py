"""Oracle-equivalence and gradient suites shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .align import DepthMlpParams, depth_embedding
from .autodiff import Tensor, finite_diff_check, tree_replace, tree_tensors
from .geometry import FeatureMap, PixelCoords, bilinear_sample
from .latent import EcmiParams, QkvParams, dense_oracle_ecmi, ecmi, latent_fusion, qkv_cross_attention
from .pipeline import (
    FusionConfig,
    Frame,
    Toggles,
    init_params,
    kitti_like_calibration,
    procedural_fpn,
    run_pipeline,
    sample_box_points,
)
from .voxel import LinearParams


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    limit: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.limit)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (limit {self.limit:.0e})"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def oracle_gap(N: int, c: int, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    params = EcmiParams.init(rng, c, n)
    fs = Tensor(rng.normal(size=(N, c)))
    vs = Tensor(rng.normal(size=(N, c)))
    got = ecmi(fs, vs, params)
    want = dense_oracle_ecmi(fs, vs, params)
    return max(relative_error(g.data, w.data) for g, w in zip(got, want))


def oracle_suite(seeds: int = 20) -> list[CheckResult]:
    out = []
    for N, c, n in ((64, 16, 4), (256, 32, 8)):
        worst = max(oracle_gap(N, c, n, s) for s in range(seeds))
        out.append(CheckResult(f"ecmi vs dense oracle N={N} C={c} n={n} ({seeds} seeds)", worst, 1e-6))
    return out


# ---------------------------------------------------------------------------
# Gradient checks


def tiny_frame(config: FusionConfig, seed: int = 0) -> Frame:
    """A single close-range box: enough voxels for every stage, cheap to evaluate."""
    rng = np.random.default_rng(seed)
    pts = sample_box_points(rng, (11.0, 0.8), density=5000.0)
    fpn = procedural_fpn(config.image_size, config.image_strides, config.channels, seed, np.dtype(config.dtype))
    return Frame(pts.astype(np.float32), kitti_like_calibration(config.image_size), fpn, None, "tiny")


TINY_CONFIG = FusionConfig(channels=(4, 4, 4, 4), latent_n=1)


def pipeline_loss_fn(frame: Frame, params, config: FusionConfig, toggles: Toggles = Toggles(), seed: int = 1):
    """Scalar loss over all fused stages as a function of the parameter tensors.

    The image maps are appended after the parameters so that gradients reach
    the sampled features too.
    """
    leaves = tree_tensors(params)
    maps = list(frame.fpn_maps)
    probe = run_pipeline(frame, params, toggles, config)
    rng = np.random.default_rng(seed)
    weights = [Tensor(rng.normal(size=s.features.shape)) for s in probe.stages]

    def loss(*tensors):
        p = tree_replace(params, tensors[: len(leaves)])
        fmaps = tuple(m.with_values(t) for m, t in zip(maps, tensors[len(leaves):]))
        f = Frame(frame.cloud, frame.calib, fmaps, frame.labels, frame.name)
        out = run_pipeline(f, p, toggles, config)
        terms = [ad.total(ad.mul(s.features, w)) for s, w in zip(out.stages, weights)]
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return acc

    return loss, leaves + [m.values for m in maps]


def op_gradient_cases(rng: np.random.Generator, dtype=np.float64) -> dict:
    """Scalar-valued closures exercising every differentiable op, with inputs."""
    r = lambda *s: Tensor(rng.normal(size=s), dtype=dtype)  # noqa: E731

    def probe_like(rows: int, cols: int, seed: int) -> Tensor:
        return _probe(rows, cols, seed, dtype)

    seg = np.array([0, 1, 0, 2, 1])
    uv = rng.uniform(0, 30, size=(6, 2))
    pix = PixelCoords(uv, np.ones(6), np.array([True, True, False, True, True, True]))
    cases = {
        "matmul": (lambda a, b: ad.total(ad.mul(ad.matmul(a, b), probe_like(a.shape[0], b.shape[1], 0))), [r(3, 4), r(4, 2)]),
        "linear": (lambda x, w, b: ad.total(ad.mul(ad.linear(x, w, b), probe_like(5, 3, 1))), [r(5, 4), r(4, 3), r(3)]),
        "add_rows": (lambda x, b: ad.total(ad.tanh(ad.add_rows(x, b))), [r(3, 3), r(3)]),
        "add_sub_mul": (lambda a, b: ad.total(ad.mul(ad.sub(a, b), ad.add(a, b))), [r(3, 2), r(3, 2)]),
        "scale": (lambda x: ad.total(ad.tanh(ad.scale(x, 0.7))), [r(4, 2)]),
        "sigmoid": (lambda x: ad.total(ad.mul(ad.sigmoid(x), probe_like(3, 4, 2))), [r(3, 4)]),
        "tanh": (lambda x: ad.total(ad.mul(ad.tanh(x), probe_like(3, 4, 3))), [r(3, 4)]),
        "relu": (lambda x: ad.total(ad.mul(ad.relu(x), probe_like(3, 4, 4))), [r(3, 4)]),
        "softmax_rows": (lambda x: ad.total(ad.mul(ad.softmax(x, 1), probe_like(3, 5, 5))), [r(3, 5)]),
        "softmax_cols": (lambda x: ad.total(ad.mul(ad.softmax(x, 0), probe_like(3, 5, 6))), [r(3, 5)]),
        "layer_norm": (lambda x: ad.total(ad.mul(ad.layer_norm(x), probe_like(3, 6, 7))), [r(3, 6)]),
        "transpose": (lambda x: ad.total(ad.mul(ad.transpose(x), probe_like(3, 2, 8))), [r(2, 3)]),
        "reshape": (lambda x: ad.total(ad.mul(ad.reshape(x, (3, 4)), probe_like(3, 4, 9))), [r(2, 6)]),
        "gather_rows": (lambda x: ad.total(ad.mul(ad.gather_rows(x, [2, 0, 2, 1]), probe_like(4, 3, 10))), [r(3, 3)]),
        "scatter_add_rows": (lambda x: ad.total(ad.mul(ad.scatter_add_rows(x, [1, 1, 0], 3), probe_like(3, 2, 11))), [r(3, 2)]),
        "concat_rows": (lambda a, b: ad.total(ad.mul(ad.concat_rows([a, b]), probe_like(5, 2, 12))), [r(2, 2), r(3, 2)]),
        "scale_rows": (lambda x: ad.total(ad.mul(ad.scale_rows(x, [0.5, -2.0, 3.0]), probe_like(3, 2, 13))), [r(3, 2)]),
        "segment_max": (lambda x: ad.total(ad.mul(ad.segment_max(x, seg, 3), probe_like(3, 4, 14))), [r(5, 4)]),
        "bilinear_sample": (
            lambda m: ad.total(ad.mul(bilinear_sample(FeatureMap(m, 4, 1), pix), probe_like(6, 3, 15))),
            [r(8, 9, 3)],
        ),
        "depth_embedding": (
            lambda c, a, b, w, d: ad.total(ad.mul(depth_embedding(c, _depth(a, b, w, d)), probe_like(6, 3, 16))),
            [r(6, 3), r(3, 4), r(4), r(4, 3), r(3)],
        ),
    }
    return cases


def _probe(rows: int, cols: int, seed: int, dtype=np.float64) -> Tensor:
    return Tensor(np.random.default_rng(1000 + seed).normal(size=(rows, cols)), dtype=dtype)


def _depth(a, b, w, d) -> DepthMlpParams:
    return DepthMlpParams(LinearParams(a, b), LinearParams(w, d))


def fusion_gradient_case(seed: int = 0):
    """ecmi + fuse head under a weighted-sum loss; returns (fn, inputs)."""
    rng = np.random.default_rng(seed)
    c, n, N = 6, 2, 12
    params = EcmiParams.init(rng, c, n)
    leaves = tree_tensors(params)
    f_img, v_lidar = Tensor(rng.normal(size=(N, c))), Tensor(rng.normal(size=(N, c)))
    weight = _probe(N, c, 99)

    def loss(f, v, *tensors):
        p = tree_replace(params, tensors)
        return ad.total(ad.mul(latent_fusion(f, v, p), weight))

    return loss, [f_img, v_lidar] + leaves


def qkv_gradient_case(seed: int = 0):
    rng = np.random.default_rng(seed)
    c, N = 5, 7
    params = QkvParams.init(rng, c)
    weight = _probe(N, c, 98)

    def loss(f, v, wq, wk, wv):
        return ad.total(ad.mul(qkv_cross_attention(f, v, QkvParams(wq, wk, wv), chunk_rows=3), weight))

    return loss, [Tensor(rng.normal(size=(N, c))), Tensor(rng.normal(size=(N, c))), params.wq, params.wk, params.wv]


def gradient_suite(eps: float = 1e-5, limit: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(0)
    out = []
    for name, (fn, inputs) in op_gradient_cases(rng).items():
        out.append(CheckResult(f"grad {name}", finite_diff_check(fn, inputs, eps), limit))
    fn, inputs = fusion_gradient_case()
    out.append(CheckResult("grad ecmi+fuse_head", finite_diff_check(fn, inputs, eps), limit))
    fn, inputs = qkv_gradient_case()
    out.append(CheckResult("grad qkv_cross_attention", finite_diff_check(fn, inputs, eps), limit))
    config = TINY_CONFIG
    frame = tiny_frame(config)
    params = init_params(config, seed=0)
    fn, inputs = pipeline_loss_fn(frame, params, config)
    n_params = len(tree_tensors(params))
    # feature maps are large; probe a fixed subset of their entries
    err_params = finite_diff_check(lambda *t: fn(*t, *inputs[n_params:]), inputs[:n_params], eps)
    err_maps = finite_diff_check(lambda *t: fn(*inputs[:n_params], *t), inputs[n_params:], eps, max_coords=40)
    out.append(CheckResult("grad stage pipeline (params)", err_params, limit))
    out.append(CheckResult("grad stage pipeline (image maps)", err_maps, limit))
    return out


def run_all(seeds: int = 20) -> list[CheckResult]:
    return oracle_suite(seeds) + gradient_suite()

