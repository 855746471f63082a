"""Dense voxel relevancy field and its volume renderer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from ..geomcore import Camera, Ray, pixel_centers, pixel_directions
from . import kernels

DENSITY, COLOR, RELEVANCY = "density", "color", "relevancy"


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def cubic_resolution(lo, hi, longest: int = 96) -> tuple:
    """Node counts giving (near) cubic voxels with ``longest`` nodes on the longest axis."""
    ext = np.asarray(hi, float) - np.asarray(lo, float)
    cell = ext.max() / (longest - 1)
    return tuple(max(2, int(round(e / cell)) + 1) for e in ext)


class RelevancyField:
    """Trilinear grid of raw logits over an axis-aligned box.

    Grid nodes sit on the box corners: node ``i`` along an axis is at
    ``lo + i * (hi - lo) / (n - 1)``. Activations are applied after
    interpolation: softplus for density, sigmoid for color and relevancy.
    """

    def __init__(self, lo, hi, resolution=(96, 96, 96), channels: int = 1, params=None,
                 init_density: float = -4.0, init_color: float = 0.0, init_relevancy: float = -4.0):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise DomainError("resolution must be >= 2 on every axis")
        if not np.all(self.hi > self.lo):
            raise DomainError("box max must exceed min")
        if channels < 1:
            raise DomainError("need at least one relevancy channel")
        self.channels = int(channels)
        shape = self.resolution + (kernels.N_GEO + self.channels,)
        if params is None:
            params = np.empty(shape)
            params[..., 0] = init_density
            params[..., 1:4] = init_color
            params[..., 4:] = init_relevancy
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != shape:
            raise DomainError(f"params shape {params.shape} does not match {shape}")
        self.params = params

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.resolution) - 1)

    @property
    def scale(self) -> np.ndarray:
        return 1.0 / self.voxel_size

    @property
    def res_array(self) -> np.ndarray:
        return np.asarray(self.resolution, dtype=np.int64)

    def node_position(self, i, j, k) -> np.ndarray:
        return self.lo + np.array([i, j, k]) * self.voxel_size

    def copy(self) -> "RelevancyField":
        return RelevancyField(self.lo, self.hi, self.resolution, self.channels, self.params.copy())

    def group_slice(self, group: str) -> slice:
        return {DENSITY: slice(0, 1), COLOR: slice(1, 4), RELEVANCY: slice(4, None)}[group]


def sample_field(field: RelevancyField, x):
    """Activated (density, color, relevancy) at points ``x`` of shape (3,) or (n, 3).

    Points outside the box read as empty: zero density, color and relevancy.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    logits = np.empty((len(pts), field.params.shape[-1]))
    inside = np.empty(len(pts), np.bool_)
    kernels.interpolate_logits(field.params, field.lo, field.scale, field.res_array, pts, logits, inside)
    sigma = np.where(inside, softplus(logits[:, 0]), 0.0)
    color = np.where(inside[:, None], sigmoid(logits[:, 1:4]), 0.0)
    rel = np.where(inside[:, None], sigmoid(logits[:, 4:]), 0.0)
    if single:
        return float(sigma[0]), color[0], rel[0]
    return sigma, color, rel


@dataclass(frozen=True)
class RaySampling:
    n_samples: int = 64
    stratified: bool = False
    t_near: float = 0.0
    t_far: float = 10.0
    min_transmittance: float = 1e-4
    skip_tau: float = 0.0  # samples thinner than this are treated as empty

    def __post_init__(self):
        if self.n_samples < 2:
            raise DomainError("need at least two samples per ray")
        if not 0 <= self.t_near < self.t_far:
            raise DomainError("sampling bounds must satisfy 0 <= t_near < t_far")


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray     # sum_i w_i t_i, ray distance (not normalized by alpha)
    alpha: np.ndarray
    relevancy: np.ndarray
    median_depth: np.ndarray  # distance where opacity reaches 0.5, NaN if never


def render_rays(field: RelevancyField, origins, dirs, sampling: RaySampling = RaySampling(),
                t_near=None, t_far=None, rng: np.random.Generator | None = None,
                with_relevancy: bool = True) -> RenderOutput:
    """Render a batch of rays. Samples are spread evenly over the part of
    ``[t_near, t_far]`` inside the field box; ``rng`` enables stratified jitter."""
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    n = len(dirs)
    origins = np.ascontiguousarray(np.broadcast_to(np.atleast_2d(origins), dirs.shape), dtype=np.float64)
    tn = np.full(n, sampling.t_near) if t_near is None else np.broadcast_to(np.asarray(t_near, float), (n,)).copy()
    tf = np.full(n, sampling.t_far) if t_far is None else np.broadcast_to(np.asarray(t_far, float), (n,)).copy()
    if sampling.stratified and rng is not None:
        jitter = rng.random((n, sampling.n_samples))
    else:
        jitter = np.empty((0, 0))
    out = RenderOutput(np.empty((n, 3)), np.empty(n), np.empty(n), np.empty((n, field.channels)), np.empty(n))
    kernels.render_forward(field.params, field.lo, field.hi, field.scale, field.res_array, origins, dirs,
                           tn, tf, sampling.n_samples, jitter, sampling.min_transmittance,
                           out.rgb, out.depth, out.alpha, out.relevancy, with_relevancy, out.median_depth,
                           sampling.skip_tau)
    return out


def render_ray(field: RelevancyField, ray: Ray, sampling: RaySampling = RaySampling()) -> RenderOutput:
    out = render_rays(field, ray.origin[None], ray.direction[None], sampling, ray.t_near, ray.t_far)
    return RenderOutput(out.rgb[0], float(out.depth[0]), float(out.alpha[0]), out.relevancy[0],
                        float(out.median_depth[0]))


def render_image(field: RelevancyField, camera: Camera, sampling: RaySampling = RaySampling(),
                 with_relevancy: bool = True) -> tuple[RenderOutput, np.ndarray]:
    """Render every pixel center. Returns the image-shaped output and the (H, W, 3) ray directions."""
    K = camera.intrinsics
    dirs = pixel_directions(camera, pixel_centers(K).reshape(-1, 2))
    out = render_rays(field, camera.center[None], dirs, sampling, with_relevancy=with_relevancy)
    H, W = K.height, K.width
    img = RenderOutput(out.rgb.reshape(H, W, 3), out.depth.reshape(H, W), out.alpha.reshape(H, W),
                       out.relevancy.reshape(H, W, -1), out.median_depth.reshape(H, W))
    return img, dirs.reshape(H, W, 3)


def render_depth_image(field: RelevancyField, camera: Camera, sampling: RaySampling = RaySampling(),
                       alpha_threshold: float = 0.5) -> np.ndarray:
    """z-depth image at the median termination distance, NaN where alpha is below the threshold."""
    img, dirs = render_image(field, camera, sampling, with_relevancy=False)
    z = img.median_depth * (dirs @ camera.forward)
    return np.where(img.alpha >= max(alpha_threshold, 0.5), z, np.nan)


def _check_shapes(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[None], target[None]
    return pred, target


def loss_rgb(pred, target) -> float:
    """Squared color error summed over channels, averaged over rays."""
    pred, target = _check_shapes(pred, target)
    return float(((pred - target) ** 2).sum(axis=-1).mean())


def loss_rel(pred, target) -> float:
    """Squared relevancy error summed over channels, averaged over rays."""
    pred, target = _check_shapes(pred, target)
    return float(((pred - target) ** 2).sum(axis=-1).mean())
