"""KITTI calibration, LiDAR-to-pixel projection and feature-map sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParseError

KITTI_IMAGE_SIZE = (370, 1224)  # (H, W)

_CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


@dataclass(frozen=True)
class Calibration:
    """Projection chain from LiDAR coordinates to image pixels.

    ``cam_projection`` is 3x4, ``rect`` and ``lidar_to_cam`` are 4x4
    homogeneous matrices, ``image_size`` is ``(H, W)``.
    """

    cam_projection: np.ndarray
    rect: np.ndarray
    lidar_to_cam: np.ndarray
    image_size: tuple[int, int] = KITTI_IMAGE_SIZE

    def __post_init__(self) -> None:
        for name, shape in (("cam_projection", (3, 4)), ("rect", (4, 4)), ("lidar_to_cam", (4, 4))):
            m = np.array(getattr(self, name), dtype=np.float64)
            if m.shape != shape:
                raise ContractError(f"{name} must be {shape}, got {m.shape}")
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def from_kitti(cls, p2, r0_rect, tr_velo_to_cam, image_size=KITTI_IMAGE_SIZE) -> "Calibration":
        rect = np.eye(4)
        rect[:3, :3] = np.asarray(r0_rect, dtype=np.float64).reshape(3, 3)
        tr = np.eye(4)
        tr[:3, :4] = np.asarray(tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        return cls(np.asarray(p2, dtype=np.float64).reshape(3, 4), rect, tr, image_size)

    @property
    def matrix(self) -> np.ndarray:
        """Composed 3x4 LiDAR-to-pixel matrix ``P2 @ R0 @ Tr``."""
        return self.cam_projection @ self.rect @ self.lidar_to_cam

    def validate(self) -> None:
        r = self.rect[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-4:
            raise ContractError("R0_rect is not orthonormal within 1e-4")
        if not np.array_equal(self.lidar_to_cam[3], [0.0, 0.0, 0.0, 1.0]):
            raise ContractError("Tr_velo_to_cam bottom row must be (0, 0, 0, 1)")
        if np.linalg.matrix_rank(self.matrix) < 3:
            raise ContractError("composed calibration matrix is rank deficient")


def parse_kitti_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> Calibration:
    """Parse the ``P2``, ``R0_rect`` and ``Tr_velo_to_cam`` lines of a KITTI calib file.

    Other keys (``P0``, ``Tr_imu_to_velo``, ...) are ignored.
    """
    values: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        tokens = rest.split()
        want = _CALIB_KEYS[key]
        if len(tokens) != want:
            raise ParseError(f"line {lineno}: {key} has {len(tokens)} values, expected {want}")
        try:
            values[key] = np.array([float(tok) for tok in tokens], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {key}: {exc}") from None
    for key in _CALIB_KEYS:
        if key not in values:
            raise ParseError(f"missing calibration key {key!r}")
    return Calibration.from_kitti(values["P2"], values["R0_rect"], values["Tr_velo_to_cam"], image_size)


def serialize_kitti_calib(calib: Calibration) -> str:
    """KITTI-style text that :func:`parse_kitti_calib` reads back bit-exactly."""

    def row(key: str, m: np.ndarray) -> str:
        return key + ": " + " ".join(repr(float(v)) for v in m.reshape(-1))

    return "\n".join(
        [
            row("P2", calib.cam_projection),
            row("R0_rect", calib.rect[:3, :3]),
            row("Tr_velo_to_cam", calib.lidar_to_cam[:3, :4]),
        ]
    ) + "\n"


@dataclass(frozen=True)
class PixelCoords:
    """Projected pixel positions, row-aligned with the input points.

    ``uv`` rows with non-positive depth are left at zero.
    """

    uv: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return self.uv.shape[0]


def project_points(centers: np.ndarray, calib: Calibration) -> PixelCoords:
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    homog = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    proj = homog @ calib.matrix.T
    depth = proj[:, 2]
    front = depth > 0
    safe = np.where(front, depth, 1.0)
    uv = np.where(front[:, None], proj[:, :2] / safe[:, None], 0.0)
    h, w = calib.image_size
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return PixelCoords(uv=uv, depth=depth, valid=front & inside)


@dataclass(frozen=True)
class FeatureMap:
    """One pyramid level: ``values`` is an H_j x W_j x C tensor.

    Node ``(r, c)`` of the level sits at full-resolution pixel
    ``(c * stride, r * stride)``.
    """

    values: Tensor
    stride: int
    level: int
    access_log: list | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.values.data.ndim != 3:
            raise ContractError(f"feature map must be H x W x C, got {self.values.shape}")
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: Tensor) -> "FeatureMap":
        return FeatureMap(values, self.stride, self.level, self.access_log)


def bilinear_taps(shape_hw: tuple[int, int], uv: np.ndarray, stride: int, valid: np.ndarray):
    """Flat indices and weights of the four neighbours for each sample.

    Coordinates are divided by ``stride`` and clamped to the level's node
    grid. Invalid samples get zero weights.
    """
    h, w = shape_hw
    x = np.clip(uv[:, 0] / stride, 0.0, w - 1)
    y = np.clip(uv[:, 1] / stride, 0.0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    keep = np.asarray(valid, dtype=bool)
    idx = [np.where(keep, i, 0) for i in idx]
    wts = [np.where(keep, t, 0.0) for t in wts]
    return idx, wts


def bilinear_sample(fmap: FeatureMap, pixels: PixelCoords) -> Tensor:
    """Sample ``fmap`` at full-resolution pixels; invalid rows come out zero."""
    if fmap.access_log is not None:
        fmap.access_log.append(fmap.level)
    h, w, c = fmap.values.shape
    flat = ad.reshape(fmap.values, (h * w, c))
    idx, wts = bilinear_taps((h, w), pixels.uv, fmap.stride, pixels.valid)
    out = None
    for i, t in zip(idx, wts):
        term = ad.scale_rows(ad.gather_rows(flat, i), t)
        out = term if out is None else ad.add(out, term)
    return out
