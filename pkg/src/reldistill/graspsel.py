"""Grasp candidates, relevancy-driven selection and the downstream planners."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DomainError, NoGraspError, ParseError
from .geomcore import RigidPose, rotation_between
from .relfield.cloud import PointCloud

DEFAULT_K = 30
DEFAULT_LIFT = 0.20


@dataclass(frozen=True)
class GraspCandidate:
    pose: RigidPose
    contact_center: np.ndarray
    width: float
    score: float  # stability in [0, 1]

    def __post_init__(self):
        c = np.array(self.contact_center, dtype=np.float64).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "contact_center", c)
        if not self.width > 0:
            raise DomainError("grasp width must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise DomainError("stability score must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_json(), "contact_center": self.contact_center.tolist(),
                "width": float(self.width), "score": float(self.score)}


@dataclass(frozen=True)
class GraspSelection:
    candidate: GraspCandidate
    index: int              # position in the candidate list
    relevancy: float        # best relevancy found in the chosen neighborhood
    point_index: int        # cloud index holding that relevancy

    def to_dict(self) -> dict:
        return {"index": self.index, "relevancy": self.relevancy, "point_index": self.point_index,
                "candidate": self.candidate.to_dict()}


@dataclass(frozen=True)
class GripperConfig:
    min_width: float = 0.005
    max_width: float = 0.08
    count: int = 1000
    friction_deg: float = 30.0
    normal_k: int = 16
    max_attempts: int = 20000
    seed: int = 0
    min_seed_z: float | None = None  # contacts below this height (the support surface) are ignored

    def __post_init__(self):
        for name in ("count", "normal_k", "max_attempts", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.count < 0 or self.max_attempts < 0 or self.normal_k < 3:
            raise ConfigError("count and max_attempts must be >= 0 and normal_k >= 3")
        if self.min_width < 0 or self.max_width < 0:
            raise ConfigError("gripper widths must be non-negative")
        if not (0 < self.friction_deg < 90):
            raise ConfigError("friction_deg must lie in (0, 90)")


# ---------------------------------------------------------------------------
# candidate generation

def estimate_normals(xyz, k: int = 16) -> np.ndarray:
    """Unoriented normals from the smallest principal axis of each k-neighborhood."""
    xyz = np.asarray(xyz, dtype=np.float64)
    k = min(k, len(xyz))
    if k < 3:
        raise DomainError("need at least three points to estimate normals")
    _, nb = cKDTree(xyz).query(xyz, k=k)
    local = xyz[nb] - xyz[nb].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def gripper_pose(center, axis) -> RigidPose:
    """Gripper frame: x closes along ``axis``, z approaches as close to straight down as allowed."""
    x = np.asarray(axis, dtype=np.float64)
    x = x / np.linalg.norm(x)
    down = np.array([0.0, 0.0, -1.0])
    z = down - (down @ x) * x
    if np.linalg.norm(z) < 1e-6:   # vertical closing axis: approach along world x instead
        z = np.array([1.0, 0.0, 0.0]) - x[0] * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return RigidPose(np.stack([x, y, z], axis=1), center)


def sample_candidates(cloud, config: GripperConfig = GripperConfig(), normals=None) -> list[GraspCandidate]:
    """Naive antipodal sampler.

    Seeds are visited in a seeded random order; each seed pairs with the
    nearest partner inside the width range whose normal and the seed's both
    lie within the friction cone of the connecting axis, i.e. the first
    opposing surface the closing fingers would meet. Stability is the mean
    |cos| between the axis and the two normals. Normals are treated as
    unoriented. With ``min_seed_z`` set, points at or below that height take
    no part as either contact.
    """
    xyz = np.asarray(cloud.xyz if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    if len(xyz) == 0:
        raise DomainError("empty point cloud")
    if config.max_width < config.min_width or config.max_width <= 0 or config.count <= 0:
        return []
    if normals is None:
        normals = estimate_normals(xyz, config.normal_k)
    normals = np.asarray(normals, dtype=np.float64)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    cos_min = np.cos(np.radians(config.friction_deg))
    tree = cKDTree(xyz)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(xyz))
    usable = np.ones(len(xyz), bool) if config.min_seed_z is None else xyz[:, 2] > config.min_seed_z
    order = order[usable[order]][:config.max_attempts]

    out, seen = [], set()
    for i in order:
        nb = np.asarray(tree.query_ball_point(xyz[i], config.max_width), dtype=np.int64)
        if len(nb) == 0:
            continue
        axis = xyz[nb] - xyz[i]
        width = np.linalg.norm(axis, axis=1)
        ok = (width >= max(config.min_width, 1e-12)) & (width <= config.max_width) & usable[nb]
        if not ok.any():
            continue
        nb, axis, width = nb[ok], axis[ok], width[ok]
        axis = axis / width[:, None]
        ci = np.abs(axis @ normals[i])
        cj = np.abs(np.einsum("ij,ij->i", axis, normals[nb]))
        good = (ci >= cos_min) & (cj >= cos_min)
        if not good.any():
            continue
        stab = 0.5 * (ci + cj)
        cand = np.flatnonzero(good)
        best = cand[np.lexsort((nb[cand], width[cand]))[0]]
        j = int(nb[best])
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        center = 0.5 * (xyz[i] + xyz[j])
        out.append(GraspCandidate(gripper_pose(center, axis[best]), center, float(width[best]),
                                  float(min(stab[best], 1.0))))
        if len(out) >= config.count:
            break
    return out


# ---------------------------------------------------------------------------
# candidate files

def save_candidates(candidates, path) -> None:
    with open(path, "w") as f:
        f.write("[\n")
        f.write(",\n".join(json.dumps(c.to_dict()) for c in candidates))
        f.write("\n]\n")


def _candidate_from_obj(obj) -> GraspCandidate:
    if not isinstance(obj, dict):
        raise ValueError("candidate must be an object")
    missing = {"pose", "contact_center", "width", "score"} - set(obj)
    if missing:
        raise ValueError(f"missing field(s) {sorted(missing)}")
    pose = np.asarray(obj["pose"], dtype=np.float64)
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        raise ValueError("pose must be a finite 4x4 matrix")
    if not np.allclose(pose[3], [0, 0, 0, 1]):
        raise ValueError("pose bottom row must be 0 0 0 1")
    center = np.asarray(obj["contact_center"], dtype=np.float64)
    if center.shape != (3,) or not np.all(np.isfinite(center)):
        raise ValueError("contact_center must be three finite numbers")
    for key in ("width", "score"):
        if isinstance(obj[key], bool) or not isinstance(obj[key], (int, float)):
            raise ValueError(f"{key} must be a number")
    return GraspCandidate(RigidPose.from_matrix(pose), center, float(obj["width"]), float(obj["score"]))


def parse_candidates(text: str) -> list[GraspCandidate]:
    """Decode a JSON array of candidates, reporting the line of the offending element."""
    def line_of(pos):
        return text.count("\n", 0, pos) + 1

    dec = json.JSONDecoder()
    pos = len(text) - len(text.lstrip())
    if pos == len(text):
        return []
    if text[pos] != "[":
        raise ParseError("expected a JSON array of candidates", line_of(pos))
    pos += 1
    out = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            raise ParseError("unterminated array", line_of(pos))
        if text[pos] == "]" and not out:
            pos += 1
            break
        start = pos
        try:
            obj, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, e.lineno) from None
        try:
            out.append(_candidate_from_obj(obj))
        except (ValueError, TypeError, DomainError) as e:
            raise ParseError(f"candidate {len(out)}: {e}", line_of(start)) from None
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos < len(text) and text[pos] == ",":
            pos += 1
        elif pos < len(text) and text[pos] == "]":
            pos += 1
            break
        else:
            raise ParseError("expected ',' or ']'", line_of(pos))
    if text[pos:].strip():
        raise ParseError("trailing content after array", line_of(pos))
    return out


def load_candidates(path) -> list[GraspCandidate]:
    with open(path) as f:
        return parse_candidates(f.read())


# ---------------------------------------------------------------------------
# selection

def knn_indices(tree: cKDTree, points: np.ndarray, query, k: int) -> np.ndarray:
    """The ``k`` nearest cloud indices, ordered by (distance, index).

    Points tied at the k-th distance are resolved toward lower index, so the
    neighbor set does not depend on the tree's internal traversal order.
    """
    k = min(k, len(points))
    d, _ = tree.query(query, k=k)
    dk = np.atleast_1d(d)[-1]
    cand = np.asarray(tree.query_ball_point(query, dk * (1 + 1e-12) + 1e-15), dtype=np.int64)
    dist = np.linalg.norm(points[cand] - query, axis=1)
    return cand[np.lexsort((cand, dist))[:k]]


def select_grasp(candidates, cloud: PointCloud, channel: int = 0, k: int = DEFAULT_K) -> GraspSelection:
    """Pick the candidate whose k-neighborhood holds the highest relevancy.

    Ties go to the higher stability score, then to the earlier candidate.
    Within a neighborhood the reported point is the lowest-index maximum.
    """
    if len(candidates) == 0:
        raise NoGraspError("no grasp candidates")
    if len(cloud) == 0:
        raise DomainError("empty point cloud")
    if k < 1:
        raise DomainError("k must be at least 1")
    if not 0 <= channel < cloud.channels:
        raise DomainError(f"channel {channel} out of range")
    rel = cloud.relevancy[:, channel]
    tree = cKDTree(cloud.xyz)
    best = None
    for i, c in enumerate(candidates):
        nb = knn_indices(tree, cloud.xyz, c.contact_center, k)
        vals = rel[nb]
        top = vals.max()
        p = int(nb[vals == top].min())
        key = (top, c.score)
        if best is None or key > best[0]:
            best = (key, i, p)
    (top, _), i, p = best
    return GraspSelection(candidates[i], i, float(top), p)


# ---------------------------------------------------------------------------
# downstream planners

def handover_orientation(grasp_point, danger_point, safe_direction) -> np.ndarray:
    """Rotation taking the grasp-to-danger direction onto ``safe_direction``."""
    v = np.asarray(danger_point, dtype=np.float64) - np.asarray(grasp_point, dtype=np.float64)
    if np.linalg.norm(v) < 1e-12:
        raise DomainError("grasp and danger points coincide")
    s = np.asarray(safe_direction, dtype=np.float64)
    if not np.linalg.norm(s) > 0:
        raise DomainError("safe direction must be nonzero")
    return rotation_between(v, s)


@dataclass(frozen=True)
class Waypoint:
    label: str
    pose: RigidPose
    gripper: str  # "open" or "closed"

    def to_dict(self) -> dict:
        return {"label": self.label, "pose": self.pose.to_json(), "gripper": self.gripper}


@dataclass(frozen=True)
class WaypointPlan:
    steps: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.steps or self.steps[0].label != "approach":
            raise DomainError("a plan starts with a pre-grasp approach")

    def __len__(self):
        return len(self.steps)

    def step(self, label: str) -> Waypoint:
        for s in self.steps:
            if s.label == label:
                return s
        raise KeyError(label)

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.steps], indent=2)


def pick_place_plan(grasp, place_point, lift: float = DEFAULT_LIFT, approach: float = 0.10,
                    merge_tol: float = 1e-9) -> WaypointPlan:
    """Approach, close, lift straight up, move over the target, descend, open.

    The gripper keeps its grasp orientation throughout. When the place point
    lies directly below the lifted gripper (xy within ``merge_tol``) the
    lateral move is dropped since it would repeat the lift waypoint.
    """
    if not lift >= 0:
        raise DomainError("lift must be non-negative")
    cand = grasp.candidate if isinstance(grasp, GraspSelection) else grasp
    R = cand.pose.rotation
    p = cand.pose.translation
    place = np.asarray(place_point, dtype=np.float64).reshape(3)
    up = np.array([0.0, 0.0, lift])
    lifted = p + up
    steps = [
        Waypoint("approach", RigidPose(R, p - approach * R[:, 2]), "open"),
        Waypoint("grasp", RigidPose(R, p), "closed"),
        Waypoint("lift", RigidPose(R, lifted), "closed"),
    ]
    over = np.array([place[0], place[1], lifted[2]])
    if np.linalg.norm(over[:2] - lifted[:2]) > merge_tol:
        steps.append(Waypoint("translate", RigidPose(R, over), "closed"))
    steps.append(Waypoint("descend", RigidPose(R, place), "closed"))
    steps.append(Waypoint("release", RigidPose(R, place), "open"))
    return WaypointPlan(tuple(steps))


def handover_plan(grasp, danger_point, safe_direction, handover_point, lift: float = DEFAULT_LIFT,
                  approach: float = 0.10) -> WaypointPlan:
    """Grasp, lift, then present the object at ``handover_point`` with its dangerous side turned to ``safe_direction``."""
    cand = grasp.candidate if isinstance(grasp, GraspSelection) else grasp
    R = cand.pose.rotation
    p = cand.pose.translation
    turn = handover_orientation(cand.contact_center, danger_point, safe_direction)
    steps = (
        Waypoint("approach", RigidPose(R, p - approach * R[:, 2]), "open"),
        Waypoint("grasp", RigidPose(R, p), "closed"),
        Waypoint("lift", RigidPose(R, p + np.array([0.0, 0.0, lift])), "closed"),
        Waypoint("present", RigidPose(turn @ R, np.asarray(handover_point, dtype=np.float64)), "closed"),
    )
    return WaypointPlan(steps)
