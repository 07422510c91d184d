"""Voxelization, stride-2 stage downsampling and the top-down pyramid block.

Sparse convolutions are replaced by max-pooling children into their parent
voxel followed by a linear channel map; stride semantics are unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, EmptyFrameError, ShapeError


@dataclass(frozen=True)
class VoxelConfig:
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    range_min: tuple[float, float, float] = (0.0, -40.0, -3.0)
    range_max: tuple[float, float, float] = (70.4, 40.0, 1.0)

    def __post_init__(self) -> None:
        extent = np.subtract(self.range_max, self.range_min)
        cells = extent / np.asarray(self.voxel_size)
        if np.any(extent <= 0) or np.any(np.abs(cells - np.round(cells)) > 1e-9):
            raise ContractError(f"range extents {extent.tolist()} not divisible by voxel size {self.voxel_size}")

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        extent = np.subtract(self.range_max, self.range_min)
        return tuple(int(d) for d in np.round(extent / np.asarray(self.voxel_size)))

    def stage_dims(self, stride: int) -> tuple[int, int, int]:
        return tuple(-(-d // stride) for d in self.grid_dims)

    def centers(self, indices: np.ndarray, stride: int) -> np.ndarray:
        size = np.asarray(self.voxel_size) * stride
        return np.asarray(self.range_min) + (indices + 0.5) * size


@dataclass(frozen=True)
class VoxelSet:
    """Occupied voxels of one backbone stage, sorted by linearized grid index."""

    stage: int
    stride: int
    indices: np.ndarray
    centers: np.ndarray
    features: Tensor
    config: VoxelConfig

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "VoxelSet":
        if features.shape[0] != len(self):
            raise ShapeError(f"{features.shape[0]} feature rows for {len(self)} voxels")
        return replace(self, features=features)

    def linear_index(self) -> np.ndarray:
        return _linearize(self.indices, self.config.stage_dims(self.stride))


@dataclass(frozen=True)
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, dtype=np.float64, bias: bool = True, gain: float = 1.0):
        w = rng.normal(0.0, gain / np.sqrt(c_in), size=(c_in, c_out))
        b = rng.normal(0.0, 0.1, size=c_out) if bias else None
        return cls(Tensor(w, dtype=dtype), None if b is None else Tensor(b, dtype=dtype))


@dataclass(frozen=True)
class PyramidParams:
    """Lateral channel maps C_{j+1} -> C_j for j = 1..3 (bias-free).

    With ``tied`` set, the lateral maps are the transposed downsampling
    weights and the block owns no parameters of its own.
    """

    laterals: tuple[Tensor, ...] = ()
    tied: bool = False

    def param_count(self) -> int:
        return 0 if self.tied else int(sum(t.data.size for t in self.laterals))


def _linearize(indices: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    return (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]


def voxel_means(points: np.ndarray, cfg: VoxelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Grid indices and mean (x, y, z, intensity) of every occupied voxel."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    xyz = pts[:, :3]
    keep = np.all((xyz >= lo) & (xyz < hi), axis=1)
    pts = pts[keep]
    if pts.shape[0] == 0:
        raise EmptyFrameError("no LiDAR points inside the configured range")
    dims = np.asarray(cfg.grid_dims)
    idx = np.floor((pts[:, :3] - lo) / np.asarray(cfg.voxel_size)).astype(np.int64)
    idx = np.minimum(idx, dims - 1)
    keys, inverse = np.unique(_linearize(idx, cfg.grid_dims), return_inverse=True)
    counts = np.bincount(inverse, minlength=keys.size).astype(np.float64)
    sums = np.zeros((keys.size, 4))
    np.add.at(sums, inverse, pts)
    first = np.zeros(keys.size, dtype=np.int64)
    first[inverse[::-1]] = np.arange(inverse.size)[::-1]
    return idx[first], sums / counts[:, None]


def voxelize(cloud: np.ndarray, cfg: VoxelConfig, lift: LinearParams) -> VoxelSet:
    """Stage-1 voxels; features are mean point attributes mapped by ``lift``."""
    indices, means = voxel_means(cloud, cfg)
    attrs = Tensor(means, dtype=lift.weight.dtype)
    return VoxelSet(
        stage=1,
        stride=1,
        indices=indices,
        centers=cfg.centers(indices, 1),
        features=lift(attrs),
        config=cfg,
    )


def parent_groups(v: VoxelSet) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique parent indices and each child's parent row."""
    parents = v.indices // 2
    keys, inverse = np.unique(_linearize(parents, v.config.stage_dims(v.stride * 2)), return_inverse=True)
    first = np.zeros(keys.size, dtype=np.int64)
    first[inverse[::-1]] = np.arange(inverse.size)[::-1]
    return parents[first], inverse


def downsample_stage(v: VoxelSet, layer: LinearParams) -> VoxelSet:
    if v.stage >= 4:
        raise ContractError("stage 4 is the deepest stage")
    parent_idx, inverse = parent_groups(v)
    pooled = ad.segment_max(v.features, inverse, parent_idx.shape[0])
    stride = v.stride * 2
    return VoxelSet(
        stage=v.stage + 1,
        stride=stride,
        indices=parent_idx,
        centers=v.config.centers(parent_idx, stride),
        features=layer(pooled),
        config=v.config,
    )


def parent_rows(coarse: VoxelSet, fine: VoxelSet) -> np.ndarray:
    """Row in ``coarse`` holding the parent of every voxel in ``fine``."""
    if coarse.stride != 2 * fine.stride:
        raise ContractError(f"stride {coarse.stride} is not the parent of stride {fine.stride}")
    keys = coarse.linear_index()
    want = _linearize(fine.indices // 2, coarse.config.stage_dims(coarse.stride))
    rows = np.searchsorted(keys, want)
    rows_c = np.minimum(rows, keys.size - 1)
    orphan = keys[rows_c] != want
    if np.any(orphan):
        raise ContractError(f"{int(orphan.sum())} fine voxels have no parent in stage {coarse.stage}")
    return rows_c


def upsample_scatter(coarse: VoxelSet, fine: VoxelSet, lateral: Tensor) -> Tensor:
    """Parent features mapped by ``lateral`` (C_{j+1} x C_j), one row per fine voxel."""
    rows = parent_rows(coarse, fine)
    mapped = ad.matmul(coarse.features, lateral)
    return ad.gather_rows(mapped, rows)


def lateral_weights(pyramid: PyramidParams, downsample: list[LinearParams] | None = None) -> list[Tensor]:
    if pyramid.tied:
        if downsample is None:
            raise ContractError("tied pyramid needs the downsampling layers")
        return [ad.transpose(layer.weight) for layer in downsample]
    return list(pyramid.laterals)


def pyramid_fuse(stages: list[VoxelSet], laterals: list[Tensor]) -> list[VoxelSet]:
    """Top-down pass: out_4 = stage_4; out_j = stage_j + up(out_{j+1})."""
    if len(stages) != 4 or len(laterals) != 3:
        raise ContractError("pyramid_fuse takes 4 stages and 3 lateral maps")
    out: list[VoxelSet] = [stages[3]]
    for j in (2, 1, 0):
        up = upsample_scatter(out[0], stages[j], laterals[j])
        out.insert(0, stages[j].with_features(ad.add(stages[j].features, up)))
    return out
