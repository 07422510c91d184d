"""Multi-stage fusion pipeline, synthetic scenes and KITTI frame loading."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .align import DepthMlpParams, align_image_features
from .autodiff import Tensor
from .errors import ContractError, ParseError
from .geometry import KITTI_IMAGE_SIZE, Calibration, FeatureMap, parse_kitti_calib
from .latent import EcmiParams, latent_fusion
from .voxel import (
    LinearParams,
    PyramidParams,
    VoxelConfig,
    VoxelSet,
    downsample_stage,
    lateral_weights,
    parent_groups,
    pyramid_fuse,
    voxel_means,
    voxelize,
)

GROUND_Z = -1.73
CAR_DIMS = (3.9, 1.6, 1.5)
MIN_GROUND_POINTS = 3000


@dataclass(frozen=True)
class FusionConfig:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    image_strides: tuple[int, int, int, int] = (4, 8, 16, 32)
    latent_n: int = 8
    image_size: tuple[int, int] = KITTI_IMAGE_SIZE
    tie_pyramid: bool = False
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return {
            "voxel_size": list(self.voxel.voxel_size),
            "range_min": list(self.voxel.range_min),
            "range_max": list(self.voxel.range_max),
            "channels": list(self.channels),
            "image_strides": list(self.image_strides),
            "latent_n": self.latent_n,
            "image_size": list(self.image_size),
            "tie_pyramid": self.tie_pyramid,
            "dtype": self.dtype,
        }


@dataclass(frozen=True)
class Toggles:
    """Component switches: scale-aligned fusion, space alignment, latent fusion."""

    saf: bool = True
    sam: bool = True
    lfm: bool = True

    @classmethod
    def parse(cls, text: str) -> "Toggles":
        names = {s.strip().lower() for s in text.split(",") if s.strip()}
        names.discard("none")
        unknown = names - {"saf", "sam", "lfm"}
        if unknown:
            raise ValueError(f"unknown toggles: {sorted(unknown)}")
        return cls("saf" in names, "sam" in names, "lfm" in names)

    def label(self) -> str:
        on = [k for k in ("saf", "sam", "lfm") if getattr(self, k)]
        return ",".join(on) if on else "none"


@dataclass(frozen=True)
class PipelineParams:
    lift: LinearParams
    downsample: tuple[LinearParams, ...]
    pyramid: PyramidParams
    depth: tuple[DepthMlpParams, ...]
    fusion: tuple[EcmiParams, ...]
    early_adapter: Tensor


def init_params(config: FusionConfig, seed: int = 0) -> PipelineParams:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    ch = config.channels
    lift = LinearParams.init(rng, 4, ch[0], dtype, gain=0.2)
    down = tuple(LinearParams.init(rng, ch[j], ch[j + 1], dtype) for j in range(3))
    if config.tie_pyramid:
        pyramid = PyramidParams((), tied=True)
    else:
        pyramid = PyramidParams(
            tuple(Tensor(rng.normal(0.0, 0.5 / math.sqrt(ch[j + 1]), size=(ch[j + 1], ch[j])), dtype=dtype) for j in range(3))
        )
    depth = tuple(DepthMlpParams.init(rng, c, dtype=dtype) for c in ch)
    fusion = tuple(EcmiParams.init(rng, c, config.latent_n, dtype) for c in ch)
    adapter = Tensor(rng.normal(0.0, 1.0 / math.sqrt(ch[3]), size=(ch[3], ch[0])), dtype=dtype)
    return PipelineParams(lift, down, pyramid, depth, fusion, adapter)


@dataclass(frozen=True)
class Frame:
    cloud: np.ndarray
    calib: Calibration
    fpn_maps: tuple[FeatureMap, ...]
    labels: np.ndarray | None = None
    name: str = "synthetic"


@dataclass(frozen=True)
class StageStats:
    stage: int
    n_voxels: int
    valid_fraction: float
    fused: bool


@dataclass
class PipelineOutput:
    stages: list[VoxelSet]
    stats: list[StageStats]
    timings: dict[str, float]
    level_reads: list[tuple[int, int]]


def _check_frame(frame: Frame, config: FusionConfig) -> None:
    if len(frame.fpn_maps) != 4:
        raise ContractError(f"frame needs 4 pyramid levels, got {len(frame.fpn_maps)}")
    for j, fmap in enumerate(frame.fpn_maps, start=1):
        if fmap.level != j:
            raise ContractError(f"pyramid slot {j} holds level {fmap.level}")
        if fmap.channels != config.channels[j - 1]:
            raise ContractError(f"level {j} has {fmap.channels} channels, stage {j} has {config.channels[j - 1]}")


def run_pipeline(
    frame: Frame,
    params: PipelineParams,
    toggles: Toggles = Toggles(),
    config: FusionConfig = FusionConfig(),
) -> PipelineOutput:
    """Voxelize, fuse each stage with its image level, then run the pyramid block.

    With ``saf`` off only stage 1 is fused, against the deepest image level
    (through ``early_adapter``), and the pyramid block is skipped. ``sam``
    off drops the depth gate; ``lfm`` off replaces latent fusion by a sum.
    """
    _check_frame(frame, config)
    log: list[int] = []
    maps = [FeatureMap(m.values, m.stride, m.level, log) for m in frame.fpn_maps]
    timings = {"voxelize": 0.0, "align": 0.0, "fusion": 0.0, "downsample": 0.0, "pyramid": 0.0}
    reads: list[tuple[int, int]] = []
    stats: list[StageStats] = []
    fused_stages: list[VoxelSet] = []

    t0 = time.perf_counter()
    voxels = voxelize(frame.cloud, config.voxel, params.lift)
    timings["voxelize"] += time.perf_counter() - t0

    for j in range(1, 5):
        if j > 1:
            t0 = time.perf_counter()
            voxels = downsample_stage(fused_stages[-1], params.downsample[j - 2])
            timings["downsample"] += time.perf_counter() - t0
        if not toggles.saf and j > 1:
            fused_stages.append(voxels)
            stats.append(StageStats(j, len(voxels), 0.0, False))
            continue

        t0 = time.perf_counter()
        fmap = maps[j - 1] if toggles.saf else maps[3]
        before = len(log)
        img = align_image_features(
            voxels,
            frame.calib,
            fmap,
            params.depth[j - 1] if toggles.sam else None,
            enforce_scale_alignment=toggles.saf,
            channel_adapter=None if toggles.saf else params.early_adapter,
        )
        reads.extend((j, level) for level in log[before:])
        timings["align"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if toggles.lfm:
            fused = latent_fusion(img.values, voxels.features, params.fusion[j - 1])
        else:
            fused = ad.add(img.values, voxels.features)
        timings["fusion"] += time.perf_counter() - t0

        fused_stages.append(voxels.with_features(fused))
        stats.append(StageStats(j, len(voxels), float(np.mean(img.valid)), True))

    if toggles.saf:
        t0 = time.perf_counter()
        fused_stages = pyramid_fuse(fused_stages, lateral_weights(params.pyramid, list(params.downsample)))
        timings["pyramid"] += time.perf_counter() - t0
    return PipelineOutput(fused_stages, stats, timings, reads)


# ---------------------------------------------------------------------------
# Synthetic scenes


def kitti_like_calibration(image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> Calibration:
    h, w = image_size
    f = 721.5377
    p2 = [[f, 0.0, w / 2.0, 44.857], [0.0, f, h / 2.0 - 12.0, 0.2164], [0.0, 0.0, 1.0, 0.002746]]
    r0 = np.eye(3)
    # LiDAR x-forward, y-left, z-up to camera x-right, y-down, z-forward
    tr = [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]]
    return Calibration.from_kitti(p2, r0, tr, image_size)


def procedural_fpn(
    image_size: tuple[int, int],
    strides: tuple[int, ...],
    channels: tuple[int, ...],
    seed: int = 0,
    dtype=np.float64,
) -> tuple[FeatureMap, ...]:
    """Smooth sinusoidal fields standing in for an image backbone.

    Deeper levels use lower spatial frequencies. Node (r, c) of a level with
    stride s holds the field value at pixel (c * s, r * s).
    """
    rng = np.random.default_rng(seed)
    h, w = image_size
    maps = []
    for level, (s, c) in enumerate(zip(strides, channels), start=1):
        hj, wj = -(-h // s), -(-w // s)
        u = np.arange(wj) * s / w
        v = np.arange(hj) * s / h
        fu = rng.uniform(0.5, 3.0, size=c) / level
        fv = rng.uniform(0.5, 3.0, size=c) / level
        pu, pv = rng.uniform(0, 2 * np.pi, size=(2, c))
        vals = np.sin(2 * np.pi * fu * u[None, :, None] + pu) * np.cos(2 * np.pi * fv * v[:, None, None] + pv)
        maps.append(FeatureMap(Tensor(vals, dtype=dtype), s, level))
    return tuple(maps)


def sample_box_points(
    rng: np.random.Generator,
    center_xy: tuple[float, float],
    dims: tuple[float, float, float] = CAR_DIMS,
    density: float = 2.0e5,
) -> np.ndarray:
    """Points on the sensor-facing faces of a box standing on the ground.

    The point count falls off with the squared range, like a spinning LiDAR.
    """
    x, y = center_xy
    dist = math.hypot(x, y)
    count = int(np.clip(round(density / dist**2), 3, 4000))
    l, wd, ht = dims
    near_x = x - l / 2
    side_y = y - math.copysign(wd / 2, y) if abs(y) > wd / 2 else None
    faces = [("front", wd * ht), ("top", l * wd)]
    if side_y is not None:
        faces.append(("side", l * ht))
    area = np.array([a for _, a in faces])
    which = rng.choice(len(faces), size=count, p=area / area.sum())
    a, b = rng.uniform(size=(2, count))
    pts = np.empty((count, 4))
    z0 = GROUND_Z
    for k, (name, _) in enumerate(faces):
        m = which == k
        if name == "front":
            pts[m, :3] = np.stack([np.full(m.sum(), near_x), y - wd / 2 + a[m] * wd, z0 + b[m] * ht], axis=1)
        elif name == "top":
            pts[m, :3] = np.stack([near_x + a[m] * l, y - wd / 2 + b[m] * wd, np.full(m.sum(), z0 + ht)], axis=1)
        else:
            pts[m, :3] = np.stack([near_x + a[m] * l, np.full(m.sum(), side_y), z0 + b[m] * ht], axis=1)
    pts[:, :3] += rng.normal(0.0, 0.01, size=(count, 3))
    pts[:, 3] = rng.uniform(0.2, 0.8, size=count)
    return pts


def _ground_points(rng: np.random.Generator, count: int) -> np.ndarray:
    r = rng.uniform(3.0, 70.0, size=count)
    az = rng.uniform(-np.pi / 2, np.pi / 2, size=count)
    pts = np.empty((count, 4))
    pts[:, 0] = r * np.cos(az)
    pts[:, 1] = r * np.sin(az)
    pts[:, 2] = GROUND_Z + rng.normal(0.0, 0.02, size=count)
    pts[:, 3] = rng.uniform(0.0, 0.3, size=count)
    return pts


def generate_synthetic_scene(
    seed: int,
    n_objects: int,
    config: FusionConfig = FusionConfig(),
    placements: list[tuple[float, float]] | None = None,
    ground_points: int = 6000,
) -> Frame:
    """Deterministic scene: a ground plane plus car-sized boxes.

    ``placements`` overrides the random object positions (and ``n_objects``).
    Point labels are the object index, or -1 for ground.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    if placements is None:
        xs = rng.uniform(8.0, 65.0, size=n_objects)
        ys = rng.uniform(-0.35, 0.35, size=n_objects) * xs
        placements = list(zip(xs.tolist(), ys.tolist()))
    clouds = [_ground_points(rng, max(ground_points, MIN_GROUND_POINTS))]
    labels = [np.full(clouds[0].shape[0], -1)]
    for k, xy in enumerate(placements):
        pts = sample_box_points(rng, xy)
        clouds.append(pts)
        labels.append(np.full(pts.shape[0], k))
    cloud = np.concatenate(clouds).astype(np.float32)
    fpn = procedural_fpn(config.image_size, config.image_strides, config.channels, seed, np.dtype(config.dtype))
    return Frame(cloud, kitti_like_calibration(config.image_size), fpn, np.concatenate(labels), f"synthetic-{seed}")


def stage_voxel_counts(points: np.ndarray, cfg: VoxelConfig) -> list[int]:
    """Occupied-voxel counts at strides 1, 2, 4, 8 for a set of points."""
    indices, _ = voxel_means(points, cfg)
    counts = [indices.shape[0]]
    stride = 1
    for _ in range(3):
        probe = VoxelSet(0, stride, indices, np.zeros((indices.shape[0], 3)), Tensor(np.zeros((indices.shape[0], 1))), cfg)
        indices, _ = parent_groups(probe)
        stride *= 2
        counts.append(indices.shape[0])
    return counts


def object_voxel_counts(frame: Frame, cfg: VoxelConfig) -> dict[int, list[int]]:
    if frame.labels is None:
        raise ContractError("frame carries no point labels")
    out = {}
    for k in np.unique(frame.labels):
        if k >= 0:
            out[int(k)] = stage_voxel_counts(frame.cloud[frame.labels == k], cfg)
    return out


# ---------------------------------------------------------------------------
# KITTI files


def read_kitti_cloud(path: str | Path) -> np.ndarray:
    """Little-endian float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ParseError(f"{path}: {len(raw)} bytes is not a multiple of 16 (4 x float32 per point)")
    if not raw:
        raise ParseError(f"{path}: empty point cloud")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)


def write_kitti_cloud(path: str | Path, cloud: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud, dtype="<f4").tobytes())


def load_kitti_frame(cloud_path: str | Path, calib_path: str | Path, config: FusionConfig = FusionConfig()) -> Frame:
    cloud = read_kitti_cloud(cloud_path)
    try:
        calib = parse_kitti_calib(Path(calib_path).read_text(), config.image_size)
    except ParseError as exc:
        raise ParseError(f"{calib_path}: {exc}") from None
    fpn = procedural_fpn(config.image_size, config.image_strides, config.channels, 0, np.dtype(config.dtype))
    return Frame(cloud, calib, fpn, None, Path(cloud_path).stem)


# ---------------------------------------------------------------------------
# Reports


def feature_digest(t: Tensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).hexdigest()


def stage_summary(out: PipelineOutput) -> list[dict]:
    rows = []
    for vs, st in zip(out.stages, out.stats):
        f = vs.features.data
        rows.append(
            {
                "stage": st.stage,
                "stride": vs.stride,
                "n_voxels": st.n_voxels,
                "channels": vs.channels,
                "fused": st.fused,
                "valid_fraction": st.valid_fraction,
                "feature_mean": float(f.mean()),
                "feature_std": float(f.std()),
                "feature_sha256": feature_digest(vs.features),
            }
        )
    return rows


RUN_CSV_HEADER = (
    "frame",
    "stage",
    "stride",
    "n_voxels",
    "channels",
    "fused",
    "valid_fraction",
    "feature_mean",
    "feature_std",
    "feature_sha256",
)


@dataclass
class RunReport:
    """Per-frame stage summaries. Timings are only kept when requested."""

    meta: dict
    frames: list[dict] = field(default_factory=list)

    csv_header = RUN_CSV_HEADER

    def add(self, name: str, out: PipelineOutput, include_timings: bool = False) -> None:
        entry = {"frame": name, "stages": stage_summary(out)}
        if include_timings:
            entry["timings"] = dict(out.timings)
        self.frames.append(entry)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "frames": self.frames}

    def csv_rows(self) -> list[tuple]:
        return [
            (fr["frame"],) + tuple(st[k] for k in RUN_CSV_HEADER[1:])
            for fr in self.frames
            for st in fr["stages"]
        ]
