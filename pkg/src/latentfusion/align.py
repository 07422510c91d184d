"""Depth-gated sampling of image features at projected voxel centers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .geometry import Calibration, FeatureMap, bilinear_sample, project_points
from .voxel import LinearParams, VoxelSet


@dataclass(frozen=True)
class DepthMlpParams:
    """fc1: 3 -> C_h, tanh, fc2: C_h -> C_j, sigmoid."""

    fc1: LinearParams
    fc2: LinearParams

    @property
    def out_channels(self) -> int:
        return self.fc2.weight.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, hidden: int | None = None, dtype=np.float64):
        hidden = channels if hidden is None else hidden
        # centers are in meters; keep the first layer out of tanh saturation
        return cls(
            LinearParams.init(rng, 3, hidden, dtype, gain=0.05),
            LinearParams.init(rng, hidden, channels, dtype),
        )


@dataclass(frozen=True)
class SparseImageFeatures:
    stage: int
    values: Tensor
    valid: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]


def depth_embedding(centers, params: DepthMlpParams) -> Tensor:
    c = ad.as_tensor(centers, dtype=params.fc1.weight.dtype)
    return ad.sigmoid(params.fc2(ad.tanh(params.fc1(c))))


def align_image_features(
    voxels: VoxelSet,
    calib: Calibration,
    fmap: FeatureMap,
    params: DepthMlpParams | None,
    *,
    enforce_scale_alignment: bool = True,
    channel_adapter: Tensor | None = None,
) -> SparseImageFeatures:
    """Image features at each voxel center, gated by the depth embedding.

    ``params=None`` skips the gate and returns the raw samples. Mismatched
    stage/level pairs raise unless ``enforce_scale_alignment`` is False.
    ``channel_adapter`` (C_map x C_out) maps sampled channels before gating.
    """
    if enforce_scale_alignment and fmap.level != voxels.stage:
        raise ContractError(f"stage {voxels.stage} voxels paired with level {fmap.level} image features")
    pixels = project_points(voxels.centers, calib)
    sampled = bilinear_sample(fmap, pixels)
    if channel_adapter is not None:
        sampled = ad.matmul(sampled, channel_adapter)
    if params is None:
        return SparseImageFeatures(voxels.stage, sampled, pixels.valid)
    if params.out_channels != sampled.shape[1]:
        raise ContractError(f"depth gate width {params.out_channels} != image channels {sampled.shape[1]}")
    gate = depth_embedding(voxels.centers, params)
    return SparseImageFeatures(voxels.stage, ad.mul(gate, sampled), pixels.valid)
