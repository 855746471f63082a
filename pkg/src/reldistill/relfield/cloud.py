"""Point clouds rendered out of a field, argmax selection and PLY I/O."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, EmptyResultError, ParseError
from .field import RaySampling, RelevancyField, render_image


@dataclass
class PointCloud:
    xyz: np.ndarray        # (n, 3)
    rgb: np.ndarray        # (n, 3) in [0, 1]
    relevancy: np.ndarray  # (n, C) in [0, 1]

    def __len__(self):
        return len(self.xyz)

    @property
    def channels(self) -> int:
        return self.relevancy.shape[1]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.rgb[idx], self.relevancy[idx])


def extract_point_cloud(field: RelevancyField, cameras, alpha_threshold: float = 0.5,
                        sampling: RaySampling = RaySampling()) -> PointCloud:
    """Render every pixel of every camera and unproject the confident ones.

    A kept pixel lands where its accumulated opacity reaches one half (the
    median termination distance), which stays on a surface at depth edges
    where the mean distance would fall in between. Thresholds below 0.5 are
    raised to 0.5 since the median is undefined there. Views are
    concatenated, not merged.
    """
    if len(cameras) == 0:
        raise DomainError("need at least one camera")
    xyz, rgb, rel = [], [], []
    for cam in cameras:
        img, dirs = render_image(field, cam, sampling)
        keep = (img.alpha >= max(alpha_threshold, 0.5)) & np.isfinite(img.median_depth)
        if not keep.any():
            continue
        a = img.alpha[keep]
        xyz.append(cam.center + dirs[keep] * img.median_depth[keep][:, None])
        rgb.append(np.clip(img.rgb[keep] / a[:, None], 0, 1))
        rel.append(np.clip(img.relevancy[keep], 0, 1))
    if not xyz:
        raise EmptyResultError("no pixel reached the alpha threshold; the point cloud is empty")
    return PointCloud(np.concatenate(xyz), np.concatenate(rgb), np.concatenate(rel))


def argmax_relevancy(cloud: PointCloud, channel: int = 0) -> np.ndarray:
    """Point with the highest relevancy in ``channel``; ties go to the lowest index."""
    if len(cloud) == 0:
        raise DomainError("empty point cloud")
    if not 0 <= channel < cloud.channels:
        raise DomainError(f"channel {channel} out of range")
    return cloud.xyz[int(np.argmax(cloud.relevancy[:, channel]))].copy()


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    from plyfile import PlyData, PlyElement

    C = cloud.channels
    dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
             ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    dtype += [(f"relevancy_{k}", "<f4") for k in range(C)]
    v = np.empty(len(cloud), dtype=dtype)
    v["x"], v["y"], v["z"] = cloud.xyz.T
    rgb8 = np.clip(np.round(cloud.rgb * 255), 0, 255).astype(np.uint8)
    v["red"], v["green"], v["blue"] = rgb8.T
    for k in range(C):
        v[f"relevancy_{k}"] = cloud.relevancy[:, k]
    PlyData([PlyElement.describe(v, "vertex")], text=not binary,
            byte_order="<").write(str(path))


def read_ply(path) -> PointCloud:
    from plyfile import PlyData

    try:
        v = PlyData.read(str(path))["vertex"].data
    except Exception as e:  # plyfile raises a mix of exception types
        raise ParseError(f"cannot read PLY {path}: {e}") from e
    names = v.dtype.names
    xyz = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if "red" in names:
        rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255
    else:
        rgb = np.zeros_like(xyz)
    chans = sorted((n for n in names if n.startswith("relevancy_")), key=lambda n: int(n.split("_")[1]))
    rel = np.stack([v[n] for n in chans], axis=1).astype(np.float64) if chans else np.zeros((len(xyz), 0))
    return PointCloud(xyz, rgb, rel)
