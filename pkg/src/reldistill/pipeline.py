"""End-to-end run: capture, annotate, train, export, grasp and plan.

In pipelined mode annotation requests go out while later views are still
being captured, and grasp candidates are generated from the geometry-phase
point cloud while relevancy training continues. Sequential mode runs the
same steps one after another. Both produce the same artifacts for a fixed
seed; only the timings differ.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, EmptySupervisionError, ReldistillError, RemoteError, StageError
from .geomcore import Camera, CameraIntrinsics, RigidPose
from .graspsel import (DEFAULT_K, DEFAULT_LIFT, GraspSelection, GripperConfig, WaypointPlan, handover_plan,
                       pick_place_plan, sample_candidates, select_grasp)
from .pointsource import AnnotationNoise, PointAnnotation, area_downsample, oracle_points, remote_points, training_masks
from .relfield import (PointCloud, RayDataset, RaySampling, RelevancyField, TrainConfig, argmax_relevancy,
                       cubic_resolution, extract_point_cloud, save_field, train, write_ply)
from .relfield import kernels
from .synthscene import (CaptureConfig, SyntheticScene, builtin_scene, builtin_scene_path, load_scene,
                         render_view)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENDPOINT_ENV = "RELDISTILL_POINT_ENDPOINT"
TABLE_CLEARANCE = 0.005  # meters above the table plane
STAGES = ("warmup", "capture", "annotation", "geometry", "export", "grasp_generation", "joint",
          "selection", "report")


# ---------------------------------------------------------------------------
# configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CaptureSettings(_Strict):
    width: int = Field(640, ge=8)
    height: int = Field(360, ge=8)
    fov_deg: float = Field(60.0, gt=0, lt=180)
    radius: float = Field(0.65, gt=0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.04)
    elevation: tuple[float, float] = (35.0, 65.0)
    azimuth_offset: float = 0.0
    images_dir: str | None = None  # posed-image directory used instead of rendering
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None


class AnnotationSettings(_Strict):
    source: Literal["oracle", "remote"] = "oracle"
    endpoint: str | None = None
    timeout: float = Field(30.0, gt=0)
    max_in_flight: int = Field(4, ge=1)
    jitter: float = Field(2.0, ge=0)
    outlier_rate: float = Field(0.1, ge=0, le=1)
    miss_rate: float = Field(0.1, ge=0, le=1)
    occlusion_aware: bool = True
    blur_sigma: float = Field(4.0, gt=0)
    downsample: int = Field(4, ge=1)


class PlanSettings(_Strict):
    kind: Literal["none", "pick_place", "handover"] = "none"
    lift: float = Field(DEFAULT_LIFT, ge=0)
    approach: float = Field(0.10, ge=0)
    place_point: tuple[float, float, float] | None = None
    danger_channel: int = Field(1, ge=0)
    safe_direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    handover_point: tuple[float, float, float] = (0.4, 0.0, 0.3)

    @model_validator(mode="after")
    def _needs_place(self):
        if self.kind == "pick_place" and self.place_point is None:
            raise ValueError("pick_place plan needs place_point")
        return self


class PipelineConfig(_Strict):
    """One run. ``train`` and ``grasp`` hold overrides of TrainConfig and GripperConfig fields."""

    schema_version: Literal[1] = SCHEMA_VERSION
    scene: str | None = None          # builtin scene name or path to a scene JSON
    prompts: list[str] = Field(min_length=1)
    views: int | None = Field(None, ge=2)
    capture: CaptureSettings = CaptureSettings()
    annotation: AnnotationSettings = AnnotationSettings()
    train: dict[str, Any] = {}
    longest: int = Field(96, ge=2)
    alpha_threshold: float = Field(0.5, ge=0, le=1)
    export_cameras: Literal["training", "fresh"] = "training"
    grasp: dict[str, Any] = {}
    grasp_channel: int = Field(0, ge=0)
    k: int = Field(DEFAULT_K, ge=1)
    plan: PlanSettings = PlanSettings()
    evaluate: bool = True
    output_dir: str = "run"
    mode: Literal["pipelined", "sequential"] = "pipelined"
    seed: int = 0

    @field_validator("train")
    @classmethod
    def _train_fields(cls, v):
        TrainConfig(**v)
        return v

    @field_validator("grasp")
    @classmethod
    def _grasp_fields(cls, v):
        GripperConfig(**v)
        return v

    @model_validator(mode="after")
    def _sources(self):
        if self.scene is None and self.capture.images_dir is None:
            raise ValueError("need a scene or capture.images_dir")
        if self.annotation.source == "oracle" and self.scene is None:
            raise ValueError("oracle annotations need a scene")
        if self.scene is None and self.capture.bounds is None:
            raise ValueError("capture.bounds is required without a scene")
        if self.grasp_channel >= len(self.prompts):
            raise ValueError("grasp_channel out of range")
        if self.plan.kind == "handover" and self.plan.danger_channel >= len(self.prompts):
            raise ValueError("plan.danger_channel out of range")
        return self

    @property
    def n_views(self) -> int:
        # one prompt: 12 views; two or more channels: 16
        if self.views is not None:
            return self.views
        return 12 if len(self.prompts) == 1 else 16

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def gripper_config(self, scene: SyntheticScene | None = None) -> GripperConfig:
        g = {**self.grasp, "seed": self.seed}
        if scene is not None and scene.ground is not None:
            # keep contacts off the table top unless the config says otherwise
            g.setdefault("min_seed_z", TABLE_CLEARANCE)
        return GripperConfig(**g)

    def noise(self) -> AnnotationNoise:
        a = self.annotation
        return AnnotationNoise(a.jitter, a.outlier_rate, a.miss_rate, a.occlusion_aware, self.seed)

    def capture_config(self) -> CaptureConfig:
        c = self.capture
        return CaptureConfig(self.n_views, c.width, c.height, c.fov_deg, c.radius, tuple(c.center),
                             tuple(c.elevation), c.azimuth_offset)


def config_from_dict(d: dict, **overrides) -> PipelineConfig:
    """Validate a config dict; ``overrides`` replace top-level keys when not None."""
    d = dict(d)
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = PipelineConfig.model_validate(d)
    except (ValidationError, ReldistillError, TypeError) as e:
        raise ConfigError(f"invalid pipeline config: {e}") from e
    env = os.environ.get(ENDPOINT_ENV)
    if env:
        cfg = cfg.model_copy(update={"annotation": cfg.annotation.model_copy(update={"endpoint": env})})
    if cfg.annotation.source == "remote" and not cfg.annotation.endpoint:
        raise ConfigError(f"remote annotation needs an endpoint (config or ${ENDPOINT_ENV})")
    return cfg


def load_config(path, **overrides) -> PipelineConfig:
    """Read a JSON config. Missing files raise OSError; bad content raises ConfigError."""
    with open(path) as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(d, **overrides)


def resolve_scene(ref: str) -> SyntheticScene:
    """Builtin scene name or a path to a scene file."""
    if Path(ref).suffix == ".json" or os.sep in ref:
        return load_scene(ref)
    if not builtin_scene_path(ref).exists():
        raise ConfigError(f"unknown scene {ref!r}")
    return builtin_scene(ref)


# ---------------------------------------------------------------------------
# posed image directories

def save_posed_images(directory, cameras, images, bounds=None) -> Path:
    """Write ``view_XXX.png`` files plus a ``cameras.json`` index."""
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = f"view_{i:03d}.png"
        arr = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(d / name)
        frames.append({"image": name, "intrinsics": asdict(cam.intrinsics), "pose": cam.pose.to_json()})
    index = {"frames": frames}
    if bounds is not None:
        index["bounds"] = [list(map(float, b)) for b in bounds]
    (d / "cameras.json").write_text(json.dumps(index, indent=2))
    return d / "cameras.json"


def load_posed_images(directory):
    """Read a posed-image directory. Returns (cameras, images, bounds or None)."""
    from PIL import Image

    d = Path(directory)
    index = json.loads((d / "cameras.json").read_text())
    cams, imgs = [], []
    try:
        for fr in index["frames"]:
            K = CameraIntrinsics(**fr["intrinsics"])
            cams.append(Camera(K, RigidPose.from_matrix(fr["pose"])))
            img = np.asarray(Image.open(d / fr["image"]).convert("RGB"), dtype=np.float64) / 255.0
            if img.shape[:2] != (K.height, K.width):
                raise ConfigError(f"{fr['image']}: size does not match its intrinsics")
            imgs.append(img)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed cameras.json: {e}") from e
    bounds = index.get("bounds")
    return cams, imgs, None if bounds is None else tuple(tuple(b) for b in bounds)


# ---------------------------------------------------------------------------
# timings

@dataclass
class StageTimings:
    """Wall-clock seconds per stage. Stages may overlap, so ``total`` can be
    less than their sum but never less than the longest one."""

    durations: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    total: float = 0.0

    def add(self, stage: str, seconds: float):
        self.durations[stage] += seconds

    def consistent(self, slack: float = 1e-6) -> bool:
        vals = self.durations.values()
        return max(vals) - slack <= self.total <= sum(vals) + slack

    def to_dict(self) -> dict:
        return {**self.durations, "total": self.total}


class _Clock:
    """Main-thread stopwatch: every instant of the run is charged to exactly one stage."""

    def __init__(self, timings: StageTimings):
        self.timings = timings
        self.start = self.last = time.perf_counter()

    def lap(self, stage: str) -> float:
        now = time.perf_counter()
        self.timings.add(stage, now - self.last)
        self.last = now
        return now


# ---------------------------------------------------------------------------
# the run

@dataclass
class PipelineResult:
    field: RelevancyField
    cloud: PointCloud
    candidates: list
    selection: GraspSelection
    plan: WaypointPlan | None
    timings: StageTimings
    annotations: list          # [view][channel] -> list of PointAnnotation
    argmax: dict               # prompt -> xyz
    report: list               # report.csv rows
    outputs: dict = field(default_factory=dict)


def _emit(hooks, event, **info):
    if hooks is not None:
        hooks(event, info)


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except (ReldistillError, OSError, ValueError) as e:
                raise StageError(name, e) from e
        return run
    return wrap


class _Annotator:
    """Annotation requests for one view, each (view, channel) writing its own slot."""

    def __init__(self, cfg: PipelineConfig, scene: SyntheticScene | None, hooks):
        self.cfg = cfg
        self.scene = scene
        self.hooks = hooks
        self.noise = cfg.noise()
        self.client = None
        if cfg.annotation.source == "remote":
            import httpx
            self.client = httpx.Client(limits=httpx.Limits(max_connections=cfg.annotation.max_in_flight))

    def close(self):
        if self.client is not None:
            self.client.close()

    def prompt_text(self, pid: str) -> str:
        if self.scene is not None and pid in self.scene.targets:
            return self.scene.targets[pid].text or pid
        return pid

    def __call__(self, i, cam, image, view, c, pid) -> list:
        a = self.cfg.annotation
        if a.source == "oracle":
            out = [oracle_points(self.scene, cam, pid, self.noise, view_id=i, channel=c, view=view)]
        else:
            try:
                out = remote_points(a.endpoint, image, self.prompt_text(pid), a.timeout, i, c, self.client)
            except RemoteError as e:
                log.warning("view %d, prompt %r: %s; treating as absent", i, pid, e)
                out = [PointAnnotation.absent(i, c)]
        _emit(self.hooks, "annotated", view=i, channel=c)
        return out


def _warmup(field: RelevancyField):
    # load compiled kernels and touch the grid so the first iteration is not charged for it
    tiny = RelevancyField(field.lo, field.hi, (2, 2, 2), field.channels)
    o = np.zeros((1, 3))
    d = np.array([[0.0, 0.0, 1.0]])
    out = (np.empty((1, 3)), np.empty(1), np.empty(1), np.empty((1, field.channels)), np.empty(1))
    kernels.render_forward(tiny.params, tiny.lo, tiny.hi, tiny.scale, tiny.res_array, o, d,
                           np.zeros(1), np.ones(1), 4, np.empty((0, 0)), 1e-4, *out[:4], True, out[4], 0.0)
    g = np.zeros_like(tiny.params)
    kernels.loss_and_grad(tiny.params, tiny.lo, tiny.hi, tiny.scale, tiny.res_array, o, d, np.zeros(1),
                          np.ones(1), 4, np.empty((0, 0)), 1e-4, np.zeros((1, 3)),
                          np.zeros((1, field.channels)), 1.0, 1.0, True, True, True, g, 0.0, np.empty(0))
    field.params.sum()


def _export_cameras(cfg: PipelineConfig, tcams):
    if cfg.export_cameras == "training" or cfg.capture.images_dir is not None:
        return tcams
    # fresh viewpoints: the same spiral rotated by half a view step
    cc = cfg.capture_config()
    fresh = replace(cc, azimuth_offset=cc.azimuth_offset + 180.0 / cc.n_views).cameras()
    return [c.scaled(cfg.annotation.downsample) for c in fresh]


def run_pipeline(cfg: PipelineConfig, out_dir=None, hooks=None, write: bool = True) -> PipelineResult:
    """Run every stage and write the run directory.

    ``hooks(event, info)`` is called at stage boundaries (from whichever
    thread reaches them) and may block to inject delays.
    """
    pipelined = cfg.mode == "pipelined"
    timings = StageTimings()
    clock = _Clock(timings)
    scene = resolve_scene(cfg.scene) if cfg.scene is not None else None
    tcfg = cfg.train_config()
    gcfg = cfg.gripper_config(scene)
    C = len(cfg.prompts)
    if scene is not None:
        for p in cfg.prompts:
            try:
                scene.target(p)
            except ReldistillError as e:
                if cfg.annotation.source == "oracle":
                    raise ConfigError(str(e)) from e
    if cfg.capture.bounds is not None:
        bounds = tuple(np.asarray(b, float) for b in cfg.capture.bounds)
    else:
        bounds = tuple(np.asarray(b, float) for b in scene.bounds)
    sampling = RaySampling(tcfg.n_samples, skip_tau=tcfg.skip_tau)

    annotator = _Annotator(cfg, scene, hooks)
    pool = ThreadPoolExecutor(max_workers=cfg.annotation.max_in_flight if pipelined else 1,
                              thread_name_prefix="annotate")
    grasp_pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="grasp")
    warm = {}
    try:
        # -- warmup: allocate the field while capture runs
        def do_warmup():
            t = time.perf_counter()
            f = RelevancyField(bounds[0], bounds[1], cubic_resolution(*bounds, cfg.longest), C)
            _warmup(f)
            warm["seconds"] = time.perf_counter() - t
            return f

        warm_future = grasp_pool.submit(do_warmup) if pipelined else None
        if not pipelined:
            field_ = do_warmup()
            clock.lap("warmup")

        # -- capture, with annotation fan-out as each view appears
        cameras, images, views, futures = [], [], [], []
        ann_start = [None]

        def submit(i):
            if ann_start[0] is None:
                ann_start[0] = time.perf_counter()
            for c, pid in enumerate(cfg.prompts):
                futures.append(((i, c), pool.submit(annotator, i, cameras[i], images[i], views[i], c, pid)))

        capture_stage = _stage("capture")

        @capture_stage
        def do_capture():
            if cfg.capture.images_dir is not None:
                cams, imgs, _ = load_posed_images(cfg.capture.images_dir)
                for i, (cam, img) in enumerate(zip(cams, imgs)):
                    cameras.append(cam)
                    images.append(img)
                    views.append(None)
                    _emit(hooks, "captured", view=i)
                    if pipelined:
                        submit(i)
                return
            for i, cam in enumerate(cfg.capture_config().cameras()):
                v = render_view(scene, cam)
                cameras.append(cam)
                images.append(v.rgb)
                views.append(v)
                _emit(hooks, "captured", view=i)
                if pipelined:
                    submit(i)

        do_capture()
        if len(cameras) < 2:
            raise StageError("capture", ConfigError("need at least two views"))
        clock.lap("capture")

        # -- annotation
        if not pipelined:
            for i in range(len(cameras)):
                submit(i)
        annotations = [[None] * C for _ in cameras]
        try:
            for (i, c), fut in futures:
                annotations[i][c] = fut.result()
        except ReldistillError as e:
            raise StageError("annotation", e) from e
        if pipelined:
            # only the wait past the end of capture is on the main thread's clock
            timings.add("annotation", clock.last - ann_start[0])
        clock.lap("annotation")
        for c, pid in enumerate(cfg.prompts):
            # checked here so the error carries the annotation stage tag
            if not any(a.present for row in annotations for a in row[c]):
                raise StageError("annotation", EmptySupervisionError(
                    f"prompt {pid!r} has no annotation in any view"))
        _emit(hooks, "annotations_ready")

        # -- training
        if pipelined:
            field_ = warm_future.result()
            timings.add("warmup", warm["seconds"])
        try:
            tcams, dataset = training_dataset(cfg, cameras, images, annotations)
        except ReldistillError as e:
            raise StageError("geometry", e) from e
        ecams = _export_cameras(cfg, tcams)
        state = {"future": None, "candidates": None, "grasp_seconds": 0.0}

        def generate(cloud):
            t = time.perf_counter()
            _emit(hooks, "grasp_start")
            cands = sample_candidates(cloud, gcfg)
            _emit(hooks, "candidates_ready", count=len(cands))
            state["grasp_seconds"] = time.perf_counter() - t
            return cands

        def on_export(fld, it):
            clock.lap("geometry" if it <= tcfg.geometry_iterations else "joint")
            try:
                cloud = extract_point_cloud(fld, ecams, cfg.alpha_threshold, sampling)
            except ReldistillError as e:
                raise StageError("export", e) from e
            _emit(hooks, "exported", iteration=it)
            clock.lap("export")
            if pipelined:
                state["future"] = grasp_pool.submit(generate, cloud)
            else:
                try:
                    state["candidates"] = generate(cloud)
                except ReldistillError as e:
                    raise StageError("grasp_generation", e) from e
                clock.lap("grasp_generation")

        def on_iteration(fld, report):
            if report.iteration + 1 == tcfg.geometry_iterations and tcfg.export_iteration != report.iteration + 1:
                clock.lap("geometry")

        _emit(hooks, "training_start")
        try:
            train(field_, dataset, tcfg, on_export=on_export, on_iteration=on_iteration)
        except StageError:
            raise
        except ReldistillError as e:
            raise StageError("joint", e) from e
        clock.lap("joint")
        _emit(hooks, "training_done")

        # -- selection waits for both the candidates and the finished field
        if state["future"] is not None:
            try:
                state["candidates"] = state["future"].result()
            except ReldistillError as e:
                raise StageError("grasp_generation", e) from e
            timings.add("grasp_generation", state["grasp_seconds"])
        if state["candidates"] is None:
            raise StageError("grasp_generation", ConfigError("export iteration was never reached"))
        candidates = state["candidates"]
        _emit(hooks, "selection_start")
        try:
            cloud = extract_point_cloud(field_, ecams, cfg.alpha_threshold, sampling)
            selection = select_grasp(candidates, cloud, cfg.grasp_channel, cfg.k)
            argmax = {p: argmax_relevancy(cloud, c) for c, p in enumerate(cfg.prompts)}
            plan = make_plan(cfg, selection, argmax)
        except ReldistillError as e:
            raise StageError("selection", e) from e
        clock.lap("selection")

        report = _report_rows(cfg, scene if cfg.evaluate else None, cameras, views, cloud, argmax)
        result = PipelineResult(field_, cloud, candidates, selection, plan, timings, annotations, argmax, report)
        if write:
            result.outputs = write_outputs(result, cfg, out_dir or cfg.output_dir)
        clock.lap("report")
        timings.total = clock.last - clock.start
        if write:
            Path(result.outputs["timings"]).write_text(json.dumps(timings.to_dict(), indent=2) + "\n")
        return result
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
        grasp_pool.shutdown(wait=True, cancel_futures=True)
        annotator.close()


def make_plan(cfg: PipelineConfig, selection: GraspSelection, argmax: dict):
    p = cfg.plan
    if p.kind == "pick_place":
        return pick_place_plan(selection, p.place_point, p.lift, p.approach)
    if p.kind == "handover":
        danger = argmax[cfg.prompts[p.danger_channel]]
        return handover_plan(selection, danger, p.safe_direction, p.handover_point, p.lift, p.approach)
    return None


REPORT_FIELDS = ["prompt", "channel", "x", "y", "z", "relevancy", "proj_acc", "dist_err"]


def _report_rows(cfg, scene, cameras, views, cloud, argmax) -> list[dict]:
    """Per-prompt argmax summary. With a synthetic scene, also its projection
    accuracy against occlusion-free masks and distance to the target surface."""
    from .evalkit import EvalView, distance_error, projection_accuracy
    from .synthscene import gt_target_points, occlusion_free_mask

    rows = []
    for c, pid in enumerate(cfg.prompts):
        x = argmax[pid]
        i = int(np.flatnonzero((cloud.xyz == x).all(axis=1))[0])
        row = {"prompt": pid, "channel": c, "x": float(x[0]), "y": float(x[1]), "z": float(x[2]),
               "relevancy": float(cloud.relevancy[i, c]), "proj_acc": "", "dist_err": ""}
        if scene is not None and pid in scene.targets and views[0] is not None:
            ev = [EvalView(cam, occlusion_free_mask(scene, cam, pid), v.visible[pid])
                  for cam, v in zip(cameras, views)]
            try:
                row["proj_acc"] = projection_accuracy(x, ev)
            except ReldistillError:
                pass
            row["dist_err"] = distance_error(x, gt_target_points(scene, pid))
        rows.append(row)
    return rows


def write_outputs(result: PipelineResult, cfg: PipelineConfig, out_dir) -> dict:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / n for k, n in [("field", "field.bin"), ("cloud", "cloud.ply"), ("grasp", "grasp.json"),
                                   ("plan", "plan.json"), ("timings", "timings.json"), ("report", "report.csv")]}
    save_field(result.field, paths["field"])
    write_ply(result.cloud, paths["cloud"])
    grasp = {"prompt": cfg.prompts[cfg.grasp_channel], "channel": cfg.grasp_channel, "seed": cfg.seed,
             **result.selection.to_dict()}
    paths["grasp"].write_text(json.dumps(grasp, indent=2) + "\n")
    if result.plan is not None:
        paths["plan"].write_text(result.plan.to_json() + "\n")
    else:
        paths.pop("plan")
    with open(paths["report"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in result.report:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    # timings.json is written by the caller once the total is known
    return {k: str(v) for k, v in paths.items()}


# ---------------------------------------------------------------------------
# single stages, for running the steps one at a time

def annotate_images(cfg: PipelineConfig, cameras, images, scene: SyntheticScene | None = None) -> list:
    """Annotations ``[view][channel] -> list of PointAnnotation`` for already captured views."""
    annotator = _Annotator(cfg, scene, None)
    try:
        views = [render_view(scene, c) if cfg.annotation.source == "oracle" else None for c in cameras]
        return [[annotator(i, cam, img, views[i], c, pid) for c, pid in enumerate(cfg.prompts)]
                for i, (cam, img) in enumerate(zip(cameras, images))]
    finally:
        annotator.close()


def save_annotations(annotations, prompts, path) -> None:
    doc = {"prompts": list(prompts),
           "views": [[[a.to_dict() for a in slot] for slot in row] for row in annotations]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_annotations(path) -> tuple[list, list]:
    """Returns (prompts, annotations[view][channel] -> list)."""
    doc = json.loads(Path(path).read_text())
    try:
        return doc["prompts"], [[[PointAnnotation.from_dict(a) for a in slot] for slot in row]
                                for row in doc["views"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed annotation file: {e}") from e


def training_dataset(cfg: PipelineConfig, cameras, images, annotations):
    """Training-resolution cameras and rays for full-resolution views and their annotations."""
    for c in range(len(cfg.prompts)):
        if not any(a.present for row in annotations for a in row[c]):
            raise EmptySupervisionError(f"prompt {cfg.prompts[c]!r} has no annotation in any view")
    f = cfg.annotation.downsample
    tcams = [c.scaled(f) for c in cameras]
    timgs = [area_downsample(np.asarray(im, dtype=np.float64), f) for im in images]
    masks = [training_masks([row], (c.intrinsics.width, c.intrinsics.height), cfg.annotation.blur_sigma, f)[0]
             for c, row in zip(cameras, annotations)]
    return tcams, RayDataset.from_views(tcams, timgs, masks)


def selection_from_dict(d: dict) -> GraspSelection:
    from .graspsel import _candidate_from_obj

    try:
        cand = _candidate_from_obj(d["candidate"])
        return GraspSelection(cand, int(d["index"]), float(d["relevancy"]), int(d["point_index"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed grasp file: {e}") from e
