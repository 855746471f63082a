"""Analytic tabletop scenes and an exact ray-tracing oracle.

Objects are groups of primitives sharing an ``object_id``; a primitive may carry
a ``part`` label (``"handle"``, ``"tip"``...), which is how part prompts are
grounded. The optional ground is a finite table top at ``z = 0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError
from .geomcore import Camera, CameraIntrinsics, Ray, hemisphere_poses, pixel_centers, pixel_directions

SHAPES = ("sphere", "box", "cylinder")


@dataclass(frozen=True)
class ScenePrimitive:
    """One analytic shape.

    ``params`` per shape:
      sphere:   center (3,), radius
      box:      min (3,), max (3,)
      cylinder: center (2,) in xy, z_min, z_max, radius (axis along z)
    """

    shape: str
    params: dict
    albedo: tuple
    object_id: int
    part: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.object_id <= 0:
            raise ConfigError("object_id must be a positive integer (0 is background)")
        p = self.params
        if self.shape == "sphere" and not p["radius"] > 0:
            raise ConfigError("sphere radius must be positive")
        if self.shape == "box" and not np.all(np.asarray(p["max"]) > np.asarray(p["min"])):
            raise ConfigError("box max must exceed min on every axis")
        if self.shape == "cylinder" and not (p["radius"] > 0 and p["z_max"] > p["z_min"]):
            raise ConfigError("cylinder needs positive radius and height")
        if not all(0 <= a <= 1 for a in self.albedo):
            raise ConfigError("albedo must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {"shape": self.shape}
        d.update({k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                  for k, v in self.params.items()})
        d.update(albedo=list(self.albedo), object_id=self.object_id, part=self.part)
        return d

    # -- geometry ---------------------------------------------------------------

    def contains(self, x: np.ndarray, eps: float = 0.0) -> np.ndarray:
        """Strict interior test (shrunk by ``eps``)."""
        p = self.params
        if self.shape == "sphere":
            return np.linalg.norm(x - np.asarray(p["center"]), axis=-1) < p["radius"] - eps
        if self.shape == "box":
            return np.all((x > np.asarray(p["min"]) + eps) & (x < np.asarray(p["max"]) - eps), axis=-1)
        r = np.linalg.norm(x[..., :2] - np.asarray(p["center"]), axis=-1)
        return (r < p["radius"] - eps) & (x[..., 2] > p["z_min"] + eps) & (x[..., 2] < p["z_max"] - eps)

    def intersect(self, o: np.ndarray, d: np.ndarray, t0: np.ndarray, t1: np.ndarray):
        """Nearest hit in (t0, t1) per ray -> (t, normal); t = inf where missed."""
        fn = {"sphere": _hit_sphere, "box": _hit_box, "cylinder": _hit_cylinder}[self.shape]
        return fn(self.params, o, d, t0, t1)

    def surface_area_samples(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` points uniformly distributed over the surface."""
        p = self.params
        if self.shape == "sphere":
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return np.asarray(p["center"]) + p["radius"] * v
        if self.shape == "box":
            lo, hi = np.asarray(p["min"], float), np.asarray(p["max"], float)
            ext = hi - lo
            areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
            face_axis = rng.choice(3, size=n, p=areas / areas.sum())
            side = rng.integers(0, 2, size=n)
            pts = lo + rng.random((n, 3)) * ext
            pts[np.arange(n), face_axis] = np.where(side == 1, hi[face_axis], lo[face_axis])
            return pts
        r, h = p["radius"], p["z_max"] - p["z_min"]
        areas = np.array([2 * math.pi * r * h, math.pi * r * r, math.pi * r * r])
        which = rng.choice(3, size=n, p=areas / areas.sum())
        theta = rng.random(n) * 2 * math.pi
        rad = np.where(which == 0, r, r * np.sqrt(rng.random(n)))
        z = np.select([which == 0, which == 1], [p["z_min"] + rng.random(n) * h, p["z_min"]], p["z_max"])
        c = np.asarray(p["center"], float)
        return np.stack([c[0] + rad * np.cos(theta), c[1] + rad * np.sin(theta), z], axis=1)

    def surface_distance(self, x: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to this primitive's surface."""
        p = self.params
        if self.shape == "sphere":
            return np.abs(np.linalg.norm(x - np.asarray(p["center"]), axis=-1) - p["radius"])
        if self.shape == "box":
            c = (np.asarray(p["min"]) + np.asarray(p["max"])) / 2
            h = (np.asarray(p["max"]) - np.asarray(p["min"])) / 2
            q = np.abs(x - c) - h
            outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0)
            return np.abs(outside + inside)
        c = np.asarray(p["center"])
        zc, hz = (p["z_min"] + p["z_max"]) / 2, (p["z_max"] - p["z_min"]) / 2
        q = np.stack([np.linalg.norm(x[..., :2] - c, axis=-1) - p["radius"], np.abs(x[..., 2] - zc) - hz], -1)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        return np.abs(outside + inside)


def _pick_root(ta, tb, t0, t1):
    """Smallest of two candidate roots lying inside (t0, t1)."""
    ta = np.where((ta > t0) & (ta < t1), ta, np.inf)
    tb = np.where((tb > t0) & (tb < t1), tb, np.inf)
    return np.minimum(ta, tb)


def _hit_sphere(p, o, d, t0, t1):
    c = np.asarray(p["center"], float)
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - p["radius"] ** 2
    disc = b * b - cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    t = _pick_root(-b - sq, -b + sq, t0, t1)
    t[~ok] = np.inf
    x = o + d * np.where(np.isfinite(t), t, 0)[:, None]
    n = (x - c) / p["radius"]
    return t, n


def _hit_box(p, o, d, t0, t1):
    lo, hi = np.asarray(p["min"], float), np.asarray(p["max"], float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    ta = np.where(np.isnan(ta), -np.inf, ta)
    tb = np.where(np.isnan(tb), np.inf, tb)
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = t_exit >= np.maximum(t_enter, 0)
    t = _pick_root(t_enter, t_exit, t0, t1)
    t[~hit] = np.inf
    entering = t == t_enter
    axis = np.where(entering, tmin.argmax(axis=1), tmax.argmin(axis=1))
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    sign = -np.sign(d[rows, axis])
    n[rows, axis] = np.where(entering, sign, -sign)
    return t, n


def _hit_cylinder(p, o, d, t0, t1):
    c = np.asarray(p["center"], float)
    r, z0, z1 = p["radius"], p["z_min"], p["z_max"]
    ox, oy = o[:, 0] - c[0], o[:, 1] - c[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = ox * d[:, 0] + oy * d[:, 1]
    cc = ox * ox + oy * oy - r * r
    disc = b * b - a * cc
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0))
    safe_a = np.where(a > 1e-15, a, 1)
    ts = []
    for root in ((-b - sq) / safe_a, (-b + sq) / safe_a):
        z = o[:, 2] + root * d[:, 2]
        ts.append(np.where(ok & (z >= z0) & (z <= z1), root, np.inf))
    t_side = _pick_root(ts[0], ts[1], t0, t1)
    with np.errstate(divide="ignore", invalid="ignore"):
        caps = []
        for zc in (z0, z1):
            tc = (zc - o[:, 2]) / d[:, 2]
            xc = ox + tc * d[:, 0]
            yc = oy + tc * d[:, 1]
            caps.append(np.where(np.isfinite(tc) & (xc * xc + yc * yc <= r * r), tc, np.inf))
    t_cap = _pick_root(caps[0], caps[1], t0, t1)
    t = np.minimum(t_side, t_cap)
    x = o + d * np.where(np.isfinite(t), t, 0)[:, None]
    n_side = np.stack([x[:, 0] - c[0], x[:, 1] - c[1], np.zeros(len(o))], 1) / r
    n_cap = np.zeros_like(o)
    n_cap[:, 2] = np.where(np.abs(x[:, 2] - z1) < np.abs(x[:, 2] - z0), 1.0, -1.0)
    n = np.where((t_side <= t_cap)[:, None], n_side, n_cap)
    return t, n


@dataclass(frozen=True)
class Ground:
    """Finite table top at z = 0, centered on the origin."""

    albedo: tuple = (0.55, 0.5, 0.45)
    half_extent: tuple = (0.25, 0.25)
    object_id: int = 100

    def intersect(self, o, d, t0, t1):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, 2] / d[:, 2]
        x = o + d * np.where(np.isfinite(t), t, 0)[:, None]
        inside = (np.abs(x[:, 0]) <= self.half_extent[0]) & (np.abs(x[:, 1]) <= self.half_extent[1])
        t = np.where(np.isfinite(t) & inside & (t > t0) & (t < t1), t, np.inf)
        n = np.zeros_like(o)
        n[:, 2] = np.where(o[:, 2] >= 0, 1.0, -1.0)
        return t, n


@dataclass(frozen=True)
class Target:
    object_id: int
    part: str | None = None
    text: str = ""


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    targets: dict = field(default_factory=dict)
    ground: Ground | None = None
    light_direction: tuple = (0.3, -0.4, 0.85)
    ambient: float = 0.35
    shadows: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple = ((-0.25, -0.25, -0.03), (0.25, 0.25, 0.22))
    name: str = "scene"
    object_names: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        ids = {p.object_id for p in self.primitives}
        if self.ground is not None and self.ground.object_id in ids:
            raise ConfigError("ground object_id collides with a primitive")
        for name, tgt in self.targets.items():
            prims = [p for p in self.primitives
                     if p.object_id == tgt.object_id and (tgt.part is None or p.part == tgt.part)]
            if not prims:
                raise ConfigError(f"target {name!r} resolves to no primitive")

    @property
    def object_ids(self) -> list[int]:
        return sorted({p.object_id for p in self.primitives})

    def target(self, prompt_id: str) -> Target:
        try:
            return self.targets[prompt_id]
        except KeyError:
            raise DomainError(f"unknown prompt id {prompt_id!r}") from None

    def target_primitive_mask(self, prompt_id: str) -> np.ndarray:
        """Boolean over primitives: which primitives make up the target."""
        t = self.target(prompt_id)
        return np.array([p.object_id == t.object_id and (t.part is None or p.part == t.part)
                         for p in self.primitives])

    def only(self, prim_mask) -> "SyntheticScene":
        """Sub-scene keeping selected primitives, no ground, no targets."""
        prims = tuple(p for p, keep in zip(self.primitives, prim_mask) if keep)
        return replace(self, primitives=prims, targets={}, ground=None)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "name": self.name,
            "bounds": {"min": list(self.bounds[0]), "max": list(self.bounds[1])},
            "background": list(self.background),
            "ground": None if self.ground is None else {
                "albedo": list(self.ground.albedo), "half_extent": list(self.ground.half_extent),
                "object_id": self.ground.object_id},
            "light": {"direction": list(self.light_direction), "ambient": self.ambient,
                      "shadows": self.shadows},
            "objects": {str(k): v for k, v in self.object_names.items()},
            "primitives": [p.to_dict() for p in self.primitives],
            "targets": {k: {"object_id": t.object_id, "part": t.part, "text": t.text}
                        for k, t in self.targets.items()},
        }


_PARAM_KEYS = {"sphere": ("center", "radius"), "box": ("min", "max"),
               "cylinder": ("center", "z_min", "z_max", "radius")}


def scene_from_dict(d: dict) -> SyntheticScene:
    try:
        if d.get("schema_version", 1) != 1:
            raise ConfigError(f"unsupported scene schema_version {d['schema_version']}")
        prims = []
        for pd in d["primitives"]:
            shape = pd["shape"]
            if shape not in _PARAM_KEYS:
                raise ConfigError(f"unknown shape {shape!r}")
            params = {k: pd[k] for k in _PARAM_KEYS[shape]}
            prims.append(ScenePrimitive(shape, params, tuple(pd["albedo"]), int(pd["object_id"]),
                                        pd.get("part")))
        g = d.get("ground")
        ground = None if g is None else Ground(tuple(g.get("albedo", (0.55, 0.5, 0.45))),
                                               tuple(g.get("half_extent", (0.25, 0.25))),
                                               int(g.get("object_id", 100)))
        light = d.get("light", {})
        targets = {k: Target(int(v["object_id"]), v.get("part"), v.get("text", k))
                   for k, v in d.get("targets", {}).items()}
        kw = {}
        if "bounds" in d:
            kw["bounds"] = (tuple(d["bounds"]["min"]), tuple(d["bounds"]["max"]))
        return SyntheticScene(
            primitives=tuple(prims), targets=targets, ground=ground,
            light_direction=tuple(light.get("direction", (0.3, -0.4, 0.85))),
            ambient=float(light.get("ambient", 0.35)),
            shadows=bool(light.get("shadows", True)),
            background=tuple(d.get("background", (0.0, 0.0, 0.0))),
            name=d.get("name", "scene"),
            object_names={int(k): v for k, v in d.get("objects", {}).items()},
            **kw,
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"malformed scene description: {e!r}") from e


def load_scene(path) -> SyntheticScene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def save_scene(scene: SyntheticScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def builtin_scene_path(name: str) -> Path:
    return Path(__file__).parent / "data" / "scenes" / f"{name}.json"


def builtin_scene(name: str) -> SyntheticScene:
    return load_scene(builtin_scene_path(name))


# -- oracle rendering ----------------------------------------------------------

@dataclass
class HitRecord:
    t: np.ndarray          # ray distance, inf on miss
    prim: np.ndarray       # primitive index, -1 background, len(primitives) = ground
    normal: np.ndarray
    rgb: np.ndarray
    object_id: np.ndarray


def _nearest(surfaces, o, d, t0, t1):
    best_t = np.full(len(d), np.inf)
    best_i = np.full(len(d), -1)
    best_n = np.zeros((len(d), 3))
    for i, s in enumerate(surfaces):
        t, n = s.intersect(o, d, t0, t1)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
        best_n[closer] = n[closer]
    return best_t, best_i, best_n


def trace_rays(scene: SyntheticScene, origins, directions, t_near=0.0, t_far=np.inf) -> HitRecord:
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(o, d.shape).copy()
    n_rays = len(d)
    t0 = np.broadcast_to(np.asarray(t_near, float), (n_rays,))
    t1 = np.broadcast_to(np.asarray(t_far, float), (n_rays,))
    surfaces = list(scene.primitives) + ([scene.ground] if scene.ground is not None else [])
    best_t, best_i, best_n = _nearest(surfaces, o, d, t0, t1)
    # flip normals to face the viewer
    flip = np.einsum("ij,ij->i", best_n, d) > 0
    best_n[flip] *= -1

    albedo = np.array([s.albedo for s in surfaces] + [scene.background], dtype=np.float64)
    ids = np.array([s.object_id for s in surfaces] + [0])
    light = np.asarray(scene.light_direction, float)
    light = light / np.linalg.norm(light)
    lit = np.clip(best_n @ light, 0, None)
    if scene.shadows:
        hit = np.flatnonzero((best_i >= 0) & (lit > 0))
        if len(hit):
            p = o[hit] + d[hit] * best_t[hit, None] + best_n[hit] * 1e-7
            ls = np.broadcast_to(light, p.shape)
            ts, _, _ = _nearest(surfaces, p, ls, np.full(len(hit), 1e-7), np.full(len(hit), np.inf))
            lit[hit[np.isfinite(ts)]] = 0.0
    shade = scene.ambient + (1 - scene.ambient) * lit
    rgb = albedo[best_i] * np.where(best_i >= 0, shade, 1.0)[:, None]
    return HitRecord(best_t, best_i, best_n, np.clip(rgb, 0, 1), ids[best_i])


def trace_ray(scene: SyntheticScene, ray: Ray) -> dict:
    """Single-ray convenience wrapper returning a plain hit record."""
    h = trace_rays(scene, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far)
    i = int(h.prim[0])
    part = scene.primitives[i].part if 0 <= i < len(scene.primitives) else None
    return {"rgb": h.rgb[0], "depth": float(h.t[0]), "object_id": int(h.object_id[0]), "part": part}


@dataclass
class GroundTruthView:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) z-depth in meters, +inf on background
    ids: np.ndarray        # (H, W) object id, 0 background
    prim: np.ndarray       # (H, W) primitive index, -1 background
    visible: dict          # prompt id -> bool

    def target_mask(self, scene: SyntheticScene, prompt_id: str) -> np.ndarray:
        sel = np.append(scene.target_primitive_mask(prompt_id), [False, False])
        return sel[self.prim]  # prim == -1 picks the trailing False


def render_view(scene: SyntheticScene, camera: Camera) -> GroundTruthView:
    K = camera.intrinsics
    pix = pixel_centers(K).reshape(-1, 2)
    dirs = pixel_directions(camera, pix)
    hit = trace_rays(scene, camera.center[None], dirs)
    H, W = K.height, K.width
    z = hit.t * (dirs @ camera.forward)
    prim = hit.prim.reshape(H, W)
    view = GroundTruthView(
        rgb=hit.rgb.reshape(H, W, 3),
        depth=z.reshape(H, W),
        ids=hit.object_id.reshape(H, W),
        prim=prim,
        visible={},
    )
    view.visible = {k: bool(view.target_mask(scene, k).any()) for k in scene.targets}
    return view


def occlusion_free_mask(scene: SyntheticScene, camera: Camera, prompt_id: str) -> np.ndarray:
    """Silhouette of the target alone, ignoring every occluder."""
    sub = scene.only(scene.target_primitive_mask(prompt_id))
    K = camera.intrinsics
    dirs = pixel_directions(camera, pixel_centers(K).reshape(-1, 2))
    hit = trace_rays(sub, camera.center[None], dirs)
    return (hit.prim >= 0).reshape(K.height, K.width)


def gt_target_points(scene: SyntheticScene, prompt_id: str, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """Deterministic area-uniform samples of the target's exposed surface.

    Surface patches buried inside another primitive or lying on the table
    plane are dropped, so only the surface a camera could see remains.
    """
    sel = np.flatnonzero(scene.target_primitive_mask(prompt_id))
    rng = np.random.default_rng(seed)
    areas = np.array([_surface_area(scene.primitives[i]) for i in sel])
    out, have = [], 0
    while have < n:
        m = max(2 * (n - have), 256)
        counts = rng.multinomial(m, areas / areas.sum())
        chunks = []
        for i, c in zip(sel, counts):
            if not c:
                continue
            pts = scene.primitives[i].surface_area_samples(rng, c)
            keep = np.ones(len(pts), bool)
            for j, q in enumerate(scene.primitives):
                if j != i:
                    # closed containment: faces in contact with a neighbour are hidden too
                    keep &= ~q.contains(pts, eps=-1e-9)
            chunks.append(pts[keep])
        pts = np.concatenate(chunks)
        if scene.ground is not None:
            pts = pts[pts[:, 2] > 1e-9]
        out.append(pts)
        have += len(pts)
        if not have and len(out) > 50:
            raise DomainError(f"target {prompt_id!r} has no exposed surface")
    return np.concatenate(out)[:n]


def _surface_area(p: ScenePrimitive) -> float:
    q = p.params
    if p.shape == "sphere":
        return 4 * math.pi * q["radius"] ** 2
    if p.shape == "box":
        e = np.asarray(q["max"], float) - np.asarray(q["min"], float)
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
    r, h = q["radius"], q["z_max"] - q["z_min"]
    return 2 * math.pi * r * h + 2 * math.pi * r * r


def simulate_sensor_depth(view: GroundTruthView, edge_hole_width: float = 0.0, dropout: float = 0.0,
                          sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Degrade a GT depth image the way a consumer depth camera does.

    Pixels within ``edge_hole_width`` px of a pixel with a different object id
    become invalid (NaN), as do background pixels; a ``dropout`` fraction of
    the rest is dropped at random and ``sigma`` meters of Gaussian noise is
    added to the survivors.
    """
    if min(edge_hole_width, dropout, sigma) < 0:
        raise DomainError("noise parameters must be non-negative")
    depth = np.where(np.isfinite(view.depth), view.depth, np.nan).astype(np.float64)
    if edge_hole_width > 0:
        holes = np.zeros(depth.shape, bool)
        for k in np.unique(view.ids):
            inside = view.ids == k
            if inside.all():
                continue
            dist = ndimage.distance_transform_edt(inside)
            holes |= inside & (dist <= edge_hole_width)
        depth[holes] = np.nan
    rng = np.random.default_rng(seed)
    if dropout > 0:
        depth[rng.random(depth.shape) < dropout] = np.nan
    if sigma > 0:
        depth = depth + rng.normal(0, sigma, depth.shape)
    return depth


@dataclass(frozen=True)
class CaptureConfig:
    """Camera rig: ``n_views`` look-at views on a spiral over the table."""

    n_views: int = 12
    width: int = 640
    height: int = 360
    fov_deg: float = 60.0
    radius: float = 0.65
    center: tuple = (0.0, 0.0, 0.04)
    elevation: tuple = (35.0, 65.0)
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if self.n_views < 1:
            raise ConfigError("view count must be at least 1")

    def cameras(self) -> list[Camera]:
        K = CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg)
        return [Camera(K, p) for p in hemisphere_poses(self.n_views, self.radius, self.center,
                                                          self.elevation, self.azimuth_offset)]


def capture(scene: SyntheticScene, config: CaptureConfig = CaptureConfig()):
    """Render every rig view. Returns (cameras, views)."""
    cams = config.cameras()
    return cams, [render_view(scene, c) for c in cams]
