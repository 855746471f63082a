"""2D point annotations: a noisy ground-truth oracle, a remote point service
client, and conversion of points into soft relevancy masks."""
from __future__ import annotations

import base64
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ProtocolError, RemoteError, RemoteTimeoutError
from .geomcore import Camera, project_points, unproject_points
from .synthscene import GroundTruthView, SyntheticScene, gt_target_points, render_view

log = logging.getLogger(__name__)

SERVICE_SIZE = (640, 360)
TRAIN_DOWNSAMPLE = 4
DEFAULT_BLUR_SIGMA = 4.0


@dataclass(frozen=True)
class PointAnnotation:
    view_id: int
    channel: int
    pixel: tuple | None  # (u, v) continuous pixel coordinates; None when absent
    present: bool = True

    @classmethod
    def absent(cls, view_id: int, channel: int) -> "PointAnnotation":
        return cls(view_id, channel, None, False)

    def to_dict(self) -> dict:
        return {"view_id": self.view_id, "channel": self.channel,
                "pixel": None if self.pixel is None else list(self.pixel), "present": self.present}

    @classmethod
    def from_dict(cls, d: dict) -> "PointAnnotation":
        px = d.get("pixel")
        return cls(int(d["view_id"]), int(d["channel"]), None if px is None else tuple(px),
                   bool(d.get("present", px is not None)))


@dataclass(frozen=True)
class AnnotationNoise:
    jitter: float = 0.0
    outlier_rate: float = 0.0
    miss_rate: float = 0.0
    occlusion_aware: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.jitter < 0:
            raise DomainError("jitter sigma must be non-negative")
        for name in ("outlier_rate", "miss_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise DomainError(f"{name} must lie in [0, 1]")


def visible_centroid_pixel(scene: SyntheticScene, camera: Camera, prompt_id: str,
                           view: GroundTruthView) -> tuple | None:
    """Projected centroid of the target's visible surface in this view.

    If the projection falls outside the visible target pixels (concave or
    partly occluded targets) it is snapped to the nearest visible pixel center.
    Returns None when the target is not visible.
    """
    mask = view.target_mask(scene, prompt_id)
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask)
    centers = np.stack([cols + 0.5, rows + 0.5], axis=1)
    world = unproject_points(camera, centers, view.depth[rows, cols])
    (u, v), _ = project_points(camera, world.mean(axis=0))
    i, j = int(math.floor(v)), int(math.floor(u))
    if 0 <= i < mask.shape[0] and 0 <= j < mask.shape[1] and mask[i, j]:
        return float(u), float(v)
    k = int(np.argmin((centers[:, 0] - u) ** 2 + (centers[:, 1] - v) ** 2))
    return float(centers[k, 0]), float(centers[k, 1])


def oracle_points(scene: SyntheticScene, camera: Camera, prompt_id: str, noise: AnnotationNoise,
                  view_id: int = 0, channel: int = 0, view: GroundTruthView | None = None) -> PointAnnotation:
    """Simulated point prediction for one view.

    Draw order per (seed, view_id, channel): miss, then outlier, then jitter,
    so changing one rate never reshuffles the others' draws.
    """
    scene.target(prompt_id)
    if view is None:
        view = render_view(scene, camera)
    K = camera.intrinsics
    rng = np.random.default_rng([noise.seed, view_id, channel])
    u_miss, u_out = rng.random(2)
    rand_px = rng.random(2) * (K.width, K.height)
    jitter = rng.normal(0.0, 1.0, 2) * noise.jitter

    if u_miss < noise.miss_rate:
        return PointAnnotation.absent(view_id, channel)
    px = visible_centroid_pixel(scene, camera, prompt_id, view)
    if px is None:
        if noise.occlusion_aware:
            return PointAnnotation.absent(view_id, channel)
        # a model that cannot see the target still guesses where it is
        (u, v), z = project_points(camera, gt_target_points(scene, prompt_id, 2000).mean(axis=0))
        if not (z > 0 and 0 <= u <= K.width and 0 <= v <= K.height):
            return PointAnnotation.absent(view_id, channel)
        px = (float(u), float(v))
    if u_out < noise.outlier_rate:
        return PointAnnotation(view_id, channel, (float(rand_px[0]), float(rand_px[1])))
    u = float(np.clip(px[0] + jitter[0], 0, np.nextafter(K.width, 0)))
    v = float(np.clip(px[1] + jitter[1], 0, np.nextafter(K.height, 0)))
    return PointAnnotation(view_id, channel, (u, v))


def annotate_views(scene: SyntheticScene, cameras, views, prompt_ids, noise: AnnotationNoise):
    """Oracle annotations for every (view, channel). Returns [view][channel]."""
    out = [[oracle_points(scene, cam, pid, noise, view_id=i, channel=c, view=view)
            for c, pid in enumerate(prompt_ids)] for i, (cam, view) in enumerate(zip(cameras, views))]
    for c, pid in enumerate(prompt_ids):
        if not any(v.visible.get(pid, False) for v in views):
            log.warning("target %r is not visible in any view of the trajectory", pid)
    return out


def soft_mask(points, size, sigma: float = DEFAULT_BLUR_SIGMA) -> np.ndarray:
    """Peak-1 Gaussian bumps, max-combined, on a (height, width) grid.

    Each present point is snapped to the center of the pixel containing it,
    so the mask is exactly 1 at every annotated pixel.
    """
    if not sigma > 0:
        raise DomainError("blur sigma must be positive")
    width, height = size
    mask = np.zeros((height, width))
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    for p in points:
        if not p.present:
            continue
        cu = math.floor(min(p.pixel[0], width - 1e-9)) + 0.5
        cv = math.floor(min(p.pixel[1], height - 1e-9)) + 0.5
        gu = np.exp(-((u - cu) ** 2) / (2 * sigma**2))
        gv = np.exp(-((v - cv) ** 2) / (2 * sigma**2))
        np.maximum(mask, np.outer(gv, gu), out=mask)
    return mask


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-average by an integer factor over the two leading axes."""
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DomainError(f"image {w}x{h} not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


def training_masks(annotations, size=SERVICE_SIZE, sigma: float = DEFAULT_BLUR_SIGMA,
                   downsample: int = TRAIN_DOWNSAMPLE) -> list[np.ndarray]:
    """Per-view (H, W, C) soft masks at training resolution from ``annotations[view][channel]``.

    A slot holds one PointAnnotation or a list of them (a service may return
    several points). Masks are drawn at the annotation resolution and
    area-downsampled.
    """
    out = []
    for row in annotations:
        chans = [area_downsample(soft_mask(a if isinstance(a, (list, tuple)) else [a], size, sigma), downsample)
                 for a in row]
        out.append(np.stack(chans, axis=-1))
    return out


def training_inputs(cameras, images, annotations, sigma: float = DEFAULT_BLUR_SIGMA,
                    factor: int = TRAIN_DOWNSAMPLE):
    """Downscale cameras and images by ``factor`` and build the matching soft masks.

    ``images`` and ``annotations`` live at the full camera resolution.
    Returns (cameras, images, masks) at training resolution.
    """
    if not (len(cameras) == len(images) == len(annotations)):
        raise DomainError("cameras, images and annotations must align")
    tcams = [c.scaled(factor) for c in cameras]
    timgs = [area_downsample(np.asarray(im, dtype=np.float64), factor) for im in images]
    masks = [training_masks([row], (c.intrinsics.width, c.intrinsics.height), sigma, factor)[0]
             for c, row in zip(cameras, annotations)]
    return tcams, timgs, masks


# -- wire protocol -------------------------------------------------------------

def encode_png(image: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    from PIL import Image

    img = Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def encode_request(image: np.ndarray, prompt: str) -> dict:
    return {"prompt": prompt, "image_png_base64": encode_png(image)}


def encode_response(points) -> dict:
    return {"points": [[float(u), float(v)] for u, v in points]}


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def decode_response(body) -> list[tuple[float, float]]:
    """Validate ``{"points": [[u, v], ...]}`` with u, v in [0, 1]."""
    if not isinstance(body, dict) or set(body) != {"points"}:
        raise ProtocolError("response must be an object with exactly the key 'points'")
    pts = body["points"]
    if not isinstance(pts, list):
        raise ProtocolError("'points' must be a list")
    out = []
    for p in pts:
        if not (isinstance(p, list) and len(p) == 2 and all(_is_number(x) for x in p)):
            raise ProtocolError(f"malformed point {p!r}")
        if not all(0.0 <= x <= 1.0 for x in p):
            raise ProtocolError(f"point {p!r} outside the normalized range [0, 1]")
        out.append((float(p[0]), float(p[1])))
    return out


def remote_points(endpoint: str, image: np.ndarray, prompt: str, timeout: float = 30.0,
                  view_id: int = 0, channel: int = 0, client=None) -> list[PointAnnotation]:
    """Query a point service. Always returns at least one annotation
    (a single absent one when the service found nothing)."""
    import httpx

    height, width = np.asarray(image).shape[:2]
    payload = encode_request(image, prompt)
    try:
        if client is None:
            resp = httpx.post(endpoint, json=payload, timeout=timeout)
        else:
            resp = client.post(endpoint, json=payload, timeout=timeout)
        resp.raise_for_status()
    except httpx.TimeoutException as e:
        raise RemoteTimeoutError(f"point service timed out after {timeout}s") from e
    except httpx.HTTPError as e:
        raise RemoteError(f"point service request failed: {e}") from e
    try:
        body = resp.json()
    except ValueError as e:
        raise ProtocolError("response is not valid JSON") from e
    pts = decode_response(body)
    if not pts:
        return [PointAnnotation.absent(view_id, channel)]
    return [PointAnnotation(view_id, channel, (u * width, v * height)) for u, v in pts]
