"""Evaluation: projection accuracy, distance error, ratio scoring and the single-view baselines."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, ReldistillError, UndefinedResultError
from .geomcore import Camera, project_points, unproject
from .pointsource import AnnotationNoise, PointAnnotation, annotate_views, training_inputs
from .relfield import RaySampling, TrainConfig, argmax_relevancy, extract_point_cloud, fit_field
from .relfield.field import render_depth_image
from .synthscene import (CaptureConfig, SyntheticScene, capture, gt_target_points, occlusion_free_mask,
                         simulate_sensor_depth)

log = logging.getLogger(__name__)

METHODS = ("distilled-field", "single-view-sensor", "single-view-rendered")
CSV_COLUMNS = ("scene", "prompt", "method", "iteration", "proj_acc", "dist_err_m", "failure_reason")


@dataclass(frozen=True)
class EvalView:
    """One view for projection scoring. ``visible=None`` means "target visible iff mask nonempty"."""

    camera: Camera
    mask: np.ndarray
    visible: bool | None = None

    @property
    def counts(self) -> bool:
        return bool(self.mask.any()) if self.visible is None else bool(self.visible)


def _as_eval_view(v) -> EvalView:
    if isinstance(v, EvalView):
        return v
    if len(v) == 3:  # (camera, id mask, object id)
        cam, ids, oid = v
        return EvalView(cam, np.asarray(ids) == oid)
    cam, mask = v
    return EvalView(cam, np.asarray(mask, dtype=bool))


def projection_hits(point, views) -> tuple[int, int]:
    """(views whose mask contains the projected point, views counted)."""
    point = np.asarray(point, dtype=np.float64)
    hits = n = 0
    for v in map(_as_eval_view, views):
        if not v.counts:
            continue
        n += 1
        (u, w), z = project_points(v.camera, point)
        if not z > 0:
            continue
        H, W = v.mask.shape
        if 0 <= u < W and 0 <= w < H and v.mask[int(w), int(u)]:
            hits += 1
    return hits, n


def projection_accuracy(point, views) -> float:
    """Fraction of views in which ``point`` projects into the target mask.

    Views where the target is not visible are left out of the denominator.
    Accepts :class:`EvalView` items, ``(camera, mask)`` pairs or
    ``(camera, id_mask, object_id)`` triples.
    """
    if len(views) == 0:
        raise DomainError("need at least one view")
    hits, n = projection_hits(point, views)
    if n == 0:
        raise UndefinedResultError("target is not visible in any view")
    return hits / n


def distance_error(point, gt_points) -> float:
    """Distance from ``point`` to the closest ground-truth point."""
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise DomainError("empty ground-truth point set")
    return float(np.sqrt(((gt - np.asarray(point, dtype=np.float64)) ** 2).sum(axis=1).min()))


def _check_unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise DomainError(f"{name} must be a unit vector")
    return v


def ratio_relevancy_score(phi_lang, phi_query, phi_canon) -> float:
    """min_i exp(l.q) / (exp(l.c_i) + exp(l.q)) over canonical phrase embeddings c_i."""
    lang = _check_unit(phi_lang, "language embedding")
    query = _check_unit(phi_query, "query embedding")
    if len(phi_canon) == 0:
        raise DomainError("need at least one canonical embedding")
    canon = [_check_unit(c, "canonical embedding") for c in phi_canon]
    if any(len(c) != len(lang) for c in canon) or len(query) != len(lang):
        raise DomainError("embedding dimensions differ")
    q = math.exp(float(lang @ query))
    return min(q / (math.exp(float(lang @ c)) + q) for c in canon)


def single_view_baseline(annotation: PointAnnotation, depth: np.ndarray, camera: Camera):
    """Unproject the annotated pixel at that pixel's z-depth; None if the depth there is invalid."""
    if not annotation.present:
        raise DomainError("annotation is absent")
    u, v = annotation.pixel
    H, W = depth.shape
    if not (0 <= u < W and 0 <= v < H):
        return None
    z = depth[int(v), int(u)]
    if not (np.isfinite(z) and z > 0):
        return None
    return unproject((u, v), float(z), camera)


# ---------------------------------------------------------------------------
# experiment harness

@dataclass(frozen=True)
class EvalConfig:
    capture: CaptureConfig = CaptureConfig()
    jitter: float = 2.0
    outlier_rate: float = 0.1
    miss_rate: float = 0.1
    occlusion_aware: bool = True
    blur_sigma: float = 4.0
    downsample: int = 4
    train: TrainConfig = TrainConfig()
    longest: int = 96
    readouts: tuple = ()          # extra iterations at which the distilled argmax is read
    sensor_edge_hole: float = 3.0
    sensor_dropout: float = 0.1
    sensor_sigma: float = 0.0
    alpha_threshold: float = 0.5
    seed: int = 0

    def noise(self, seed: int) -> AnnotationNoise:
        return AnnotationNoise(self.jitter, self.outlier_rate, self.miss_rate, self.occlusion_aware, seed)


@dataclass
class PromptResult:
    scene: str
    prompt: str
    method: str
    iteration: int
    proj_acc: float
    dist_err_m: float
    failure_reason: str = ""
    hits: int = 0
    trials: int = 0
    point: np.ndarray | None = None

    def row(self) -> dict:
        return {"scene": self.scene, "prompt": self.prompt, "method": self.method,
                "iteration": self.iteration, "proj_acc": self.proj_acc, "dist_err_m": self.dist_err_m,
                "failure_reason": self.failure_reason}


@dataclass
class EvalReport:
    method: str
    iteration: int
    rows: list = field(default_factory=list)

    def _ok(self):
        return [r for r in self.rows if not r.failure_reason]

    @property
    def mean_proj_acc(self) -> float:
        """Per prompt first, then over prompts. Failed prompts count as 0."""
        if not self.rows:
            return float("nan")
        return float(np.mean([0.0 if r.failure_reason else r.proj_acc for r in self.rows]))

    @property
    def pooled_proj_acc(self) -> float:
        """All (view, prompt) trials pooled together."""
        n = sum(r.trials for r in self.rows)
        return sum(r.hits for r in self.rows) / n if n else float("nan")

    @property
    def mean_dist_err(self) -> float:
        d = [r.dist_err_m for r in self._ok() if np.isfinite(r.dist_err_m)]
        return float(np.mean(d)) if d else float("nan")

    def summary(self) -> dict:
        return {"method": self.method, "iteration": self.iteration, "prompts": len(self.rows),
                "failures": len(self.rows) - len(self._ok()),
                "mean_proj_acc_per_prompt": self.mean_proj_acc,
                "mean_proj_acc_pooled": self.pooled_proj_acc,
                "mean_dist_err_m": self.mean_dist_err}

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in sorted(self.rows, key=lambda r: (r.scene, r.prompt, r.iteration)):
                w.writerow(r.row())
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


class SceneBench:
    """Everything about one scene that does not depend on the seed, computed once.

    Holds the rig, ground-truth views, occlusion-free masks, visibility flags
    and target surface samples, and caches trained fields per seed so several
    methods can share a run.
    """

    def __init__(self, scene: SyntheticScene, prompts, config: EvalConfig = EvalConfig()):
        for p in prompts:
            scene.target(p)
        self.scene = scene
        self.prompts = list(prompts)
        self.config = config
        self.cameras, self.views = capture(scene, config.capture)
        self.eval_views = {p: [EvalView(c, occlusion_free_mask(scene, c, p), v.visible[p])
                               for c, v in zip(self.cameras, self.views)] for p in self.prompts}
        self.gt_points = {p: gt_target_points(scene, p) for p in self.prompts}
        self._runs = {}

    @property
    def voxel_size(self) -> float:
        from .relfield import cubic_resolution
        lo, hi = (np.asarray(b, float) for b in self.scene.bounds)
        res = np.asarray(cubic_resolution(lo, hi, self.config.longest))
        return float(((hi - lo) / (res - 1)).max())

    def annotations(self, seed: int):
        return annotate_views(self.scene, self.cameras, self.views, self.prompts, self.config.noise(seed))

    def score(self, prompt: str, point) -> tuple[int, int, float]:
        hits, n = projection_hits(point, self.eval_views[prompt])
        return hits, n, distance_error(point, self.gt_points[prompt])

    def distill(self, seed: int) -> dict:
        """Train one multi-channel field for all supervised prompts.

        Returns ``{"field", "annotations", "channels", "points": {iteration: {prompt: xyz}},
        "elapsed": {iteration: seconds}, "failures"}``.
        """
        if seed in self._runs:
            return self._runs[seed]
        t0 = time.perf_counter()
        cfg = self.config
        ann = self.annotations(seed)
        failures = {}
        chans = []
        for c, p in enumerate(self.prompts):
            if any(row[c].present for row in ann):
                chans.append(c)
            else:
                failures[p] = "no annotation in any view"
        run = {"annotations": ann, "channels": [self.prompts[c] for c in chans], "points": {},
               "elapsed": {}, "failures": failures, "field": None}
        if not chans:
            self._runs[seed] = run
            return run
        sub = [[row[c] for c in chans] for row in ann]
        tcams, timgs, masks = training_inputs(self.cameras, [v.rgb for v in self.views], sub,
                                              cfg.blur_sigma, cfg.downsample)
        tcfg = replace(cfg.train, seed=seed)
        readouts = set(cfg.readouts) | {tcfg.total_iterations}
        sampling = RaySampling(tcfg.n_samples, skip_tau=tcfg.skip_tau)

        def read(field, it):
            try:
                cloud = extract_point_cloud(field, tcams, cfg.alpha_threshold, sampling)
            except ReldistillError as e:
                run["points"][it] = {p: e for p in run["channels"]}
                return
            run["points"][it] = {p: argmax_relevancy(cloud, k) for k, p in enumerate(run["channels"])}
            # wall time from annotation to this readout, later iterations cannot affect it
            run["elapsed"][it] = time.perf_counter() - t0

        def on_iteration(field, report):
            if report.iteration + 1 in readouts:
                read(field, report.iteration + 1)

        result = fit_field(self.scene.bounds, tcams, timgs, masks, tcfg, cfg.longest, on_iteration=on_iteration)
        run["field"] = result.field
        run["train_cameras"] = tcams
        self._runs[seed] = run
        return run

    def evaluate_distilled(self, seed: int, iteration: int | None = None) -> EvalReport:
        it = self.config.train.total_iterations if iteration is None else iteration
        report = EvalReport("distilled-field", it)
        try:
            run = self.distill(seed)
        except ReldistillError as e:
            report.rows = [PromptResult(self.scene.name, p, report.method, it, float("nan"), float("nan"),
                                        f"{type(e).__name__}: {e}") for p in self.prompts]
            return report
        for p in self.prompts:
            if p in run["failures"]:
                report.rows.append(PromptResult(self.scene.name, p, report.method, it, float("nan"),
                                                float("nan"), run["failures"][p]))
                continue
            pt = run["points"][it][p]
            if isinstance(pt, Exception):
                report.rows.append(PromptResult(self.scene.name, p, report.method, it, float("nan"),
                                                float("nan"), f"{type(pt).__name__}: {pt}"))
                continue
            report.rows.append(self._point_result(p, report.method, it, [pt]))
        return report

    def _point_result(self, prompt, method, it, points) -> PromptResult:
        """Score a list of per-trial predictions (None = failed trial)."""
        hits = trials = 0
        accs, dists = [], []
        for pt in points:
            if pt is None:
                h, n, d = 0, sum(v.counts for v in self.eval_views[prompt]), float("nan")
            else:
                h, n, d = self.score(prompt, pt)
            if n == 0:
                continue
            hits += h
            trials += n
            accs.append(h / n)
            if np.isfinite(d):
                dists.append(d)
        if not accs:
            return PromptResult(self.scene.name, prompt, method, it, float("nan"), float("nan"),
                                "target not visible in any view")
        return PromptResult(self.scene.name, prompt, method, it, float(np.mean(accs)),
                            float(np.mean(dists)) if dists else float("nan"), "", hits, trials,
                            points[0] if len(points) == 1 else None)

    def evaluate_single_view(self, seed: int, method: str) -> EvalReport:
        """One prediction per view with a present annotation, each scored over all views.

        A view whose depth is invalid at the annotated pixel is a failed
        prediction (accuracy 0 in every view). Views with no annotation are
        skipped since the baseline has nothing to unproject.
        """
        cfg = self.config
        if method == "single-view-sensor":
            depths = [simulate_sensor_depth(v, cfg.sensor_edge_hole, cfg.sensor_dropout, cfg.sensor_sigma,
                                            seed=seed * 1000 + i) for i, v in enumerate(self.views)]
            ann = self.annotations(seed)
            it = 0
        elif method == "single-view-rendered":
            run = self.distill(seed)
            if run["field"] is None:
                raise DomainError("no field was trained for this seed")
            sampling = RaySampling(cfg.train.n_samples, skip_tau=cfg.train.skip_tau)
            depths = [render_depth_image(run["field"], c, sampling, cfg.alpha_threshold) for c in self.cameras]
            ann = run["annotations"]
            it = cfg.train.total_iterations
        else:
            raise DomainError(f"unknown single-view method {method!r}")
        report = EvalReport(method, it)
        for c, p in enumerate(self.prompts):
            preds = [single_view_baseline(row[c], depths[i], self.cameras[i])
                     for i, row in enumerate(ann) if row[c].present]
            if not preds:
                report.rows.append(PromptResult(self.scene.name, p, method, it, float("nan"), float("nan"),
                                                "no annotation in any view"))
                continue
            res = self._point_result(p, method, it, preds)
            if all(q is None for q in preds) and not res.failure_reason:
                res.failure_reason = "no valid depth at any annotated pixel"
            report.rows.append(res)
        return report


def eval_run(scene: SyntheticScene, prompts, method: str, config: EvalConfig = EvalConfig(),
             out_dir=None, bench: SceneBench | None = None) -> EvalReport:
    """Run one method over ``prompts`` for ``config.seed`` and optionally write report.csv/json."""
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}; expected one of {METHODS}")
    if not prompts:
        report = EvalReport(method, 0)
    else:
        bench = bench or SceneBench(scene, prompts, config)
        if method == "distilled-field":
            report = bench.evaluate_distilled(config.seed)
        else:
            report = bench.evaluate_single_view(config.seed, method)
    report.rows.sort(key=lambda r: (r.scene, r.prompt))
    if out_dir is not None:
        report.write(out_dir)
    return report
