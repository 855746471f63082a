"""Pinhole cameras, rays, rigid transforms and projection.

Conventions, used everywhere in the package:

* World frame is right-handed with +z up.
* Camera frame follows the usual computer-vision layout: +x right, +y down
  (image rows grow downwards), +z forward along the optical axis.
* Continuous pixel coordinates place the image on ``[0, width] x [0, height]``;
  the center of integer pixel ``(i, j)`` is ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DomainError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise DomainError("image must be at least 8x8 pixels")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height)

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera with the image downsampled by an integer factor."""
        return CameraIntrinsics(
            self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
            self.width // factor, self.height // factor,
        )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world (or object-to-world) rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1) > _ORTHO_TOL:
            raise DomainError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_json(self) -> list:
        """4x4 row-major nested list."""
        return self.as_matrix().tolist()

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: RigidPose = field(default_factory=RigidPose.identity)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def forward(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    def scaled(self, factor: int) -> "Camera":
        return Camera(self.intrinsics.scaled(factor), self.pose)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise DomainError("ray bounds must satisfy 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def pixel_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """World-frame unit directions through continuous pixel coordinates, shape (..., 3)."""
    K = camera.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera.pose.rotation.T


def pixel_centers(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Continuous coordinates of every pixel center, shape (height, width, 2)."""
    u, v = np.meshgrid(np.arange(intrinsics.width) + 0.5, np.arange(intrinsics.height) + 0.5)
    return np.stack([u, v], axis=-1)


def ray_for_pixel(camera: Camera, pixel, bounds=(0.0, 10.0)) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    K = camera.intrinsics
    if not (0 <= u <= K.width and 0 <= v <= K.height):
        raise DomainError(f"pixel ({u}, {v}) outside a {K.width}x{K.height} image")
    d = pixel_directions(camera, np.array([u, v]))
    return Ray(camera.center.copy(), d, float(bounds[0]), float(bounds[1]))


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized projection; returns (pixels, depths) without any validity checks."""
    pc = camera.pose.inverse_transform(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.intrinsics.fx * pc[..., 0] / z + camera.intrinsics.cx
        v = camera.intrinsics.fy * pc[..., 1] / z + camera.intrinsics.cy
    return np.stack([u, v], axis=-1), z


def project(point, camera: Camera):
    """Project a world point. Depth is the distance along the camera forward axis."""
    point = np.asarray(point, dtype=np.float64)
    pixel, depth = project_points(camera, point)
    if not depth > 0:
        raise BehindCameraError("point lies at or behind the camera plane")
    return pixel, float(depth)


def unproject_points(camera: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    K = camera.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    pc = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx * depths, (pixels[..., 1] - K.cy) / K.fy * depths, depths],
        axis=-1,
    )
    return camera.pose.transform(pc)


def unproject(pixel, depth: float, camera: Camera) -> np.ndarray:
    if not (np.isfinite(depth) and depth > 0):
        raise DomainError("depth must be positive and finite")
    return unproject_points(camera, np.asarray(pixel, dtype=np.float64), depth)


def _unit(v, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not (np.isfinite(n) and n > 0):
        raise DomainError(f"{name} must have nonzero finite length")
    return v / n


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def antipodal_axis(a) -> np.ndarray:
    """Deterministic axis perpendicular to ``a``: a crossed with the least aligned world axis."""
    a = _unit(a)
    k = int(np.argmin(np.abs(a)))
    e = np.zeros(3)
    e[k] = 1.0
    return _unit(np.cross(a, e))


def rotation_between(a, b) -> np.ndarray:
    """Minimal-angle rotation taking direction ``a`` onto direction ``b``."""
    a = _unit(a, "a")
    b = _unit(b, "b")
    c = float(a @ b)
    if c >= 0:
        K = _skew(np.cross(a, b))
        return np.eye(3) + K + K @ K / (1.0 + c)
    # Obtuse case: two reflections. H_n maps a onto b exactly, H_w fixes b, so
    # the product stays accurate all the way to the antipode.
    n = _unit(a - b)
    w = a - c * b
    if np.linalg.norm(w) < 1e-12:
        w = np.cross(a, antipodal_axis(a))
    w = w - (w @ b) * b
    w = _unit(w)
    Hn = np.eye(3) - 2 * np.outer(n, n)
    Hw = np.eye(3) - 2 * np.outer(w, w)
    return Hw @ Hn


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    eye = np.asarray(eye, dtype=np.float64)
    f = _unit(np.asarray(target, dtype=np.float64) - eye, "viewing direction")
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, np.array([0.0, 1.0, 0.0]))
    right = _unit(right)
    down = np.cross(f, right)
    return RigidPose(np.stack([right, down, f], axis=1), eye)


def hemisphere_poses(n: int, radius: float, center=(0.0, 0.0, 0.0),
                     elevation=(30.0, 60.0), azimuth_offset: float = 0.0) -> list[RigidPose]:
    """Look-at poses on a spiral over the upper hemisphere.

    View ``i`` sits at azimuth ``offset + 360 i / n`` degrees with the elevation
    swept linearly across ``elevation``. A single view is placed straight above
    the center.
    """
    if n < 1:
        raise DomainError("need at least one pose")
    if not radius > 0:
        raise DomainError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    if n == 1:
        return [look_at(center + np.array([0.0, 0.0, radius]), center)]
    lo, hi = elevation
    poses = []
    for i in range(n):
        az = math.radians(azimuth_offset + 360.0 * i / n)
        el = math.radians(lo + (hi - lo) * i / (n - 1))
        eye = center + radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        poses.append(look_at(eye, center))
    return poses
