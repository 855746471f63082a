"""Two-phase optimization of a relevancy field from posed images and soft masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from ..errors import DomainError, TrainingError
from ..geomcore import Camera, pixel_centers, pixel_directions
from . import kernels
from .field import RaySampling, RelevancyField, cubic_resolution

GEOMETRY, JOINT = "geometry", "joint"


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 300
    geometry_iterations: int = 200
    export_iteration: int = 200
    rays_per_batch: int = 4096
    lr_density: float = 15.0
    lr_color: float = 0.1
    lr_relevancy: float = 0.1
    geometry_halflife: float = 0.0    # steps per halving of the density/color rates; 0 keeps them constant
    relevancy_halflife: float = 0.0   # joint-phase steps per halving of lr_relevancy; 0 keeps it constant
    positive_fraction: float = 0.0    # joint-phase share of each batch drawn from mask-positive rays
    positive_threshold: float = 0.01
    tv_relevancy: float = 0.1         # weight of the total-variation penalty on relevancy logits
    rgb_weight: float = 1.0
    rel_weight: float = 1.0
    n_samples: int = 64
    stratified: bool = True
    min_transmittance: float = 1e-4
    skip_tau: float = 1e-8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.geometry_iterations <= self.total_iterations:
            raise DomainError("geometry-only iterations must lie in [0, total]")
        if not 0 <= self.export_iteration <= self.total_iterations:
            raise DomainError("export iteration must lie in [0, total]")
        if self.rays_per_batch < 1:
            raise DomainError("batch must contain at least one ray")
        if not 0.0 <= self.positive_fraction < 1.0:
            raise DomainError("positive_fraction must lie in [0, 1)")

    @property
    def sampling(self) -> RaySampling:
        return RaySampling(self.n_samples, self.stratified, min_transmittance=self.min_transmittance,
                           skip_tau=self.skip_tau)


@dataclass
class RayDataset:
    """Flattened training rays with their color and mask targets."""

    origins: np.ndarray   # (n, 3)
    dirs: np.ndarray      # (n, 3)
    rgb: np.ndarray       # (n, 3)
    masks: np.ndarray     # (n, C)
    n_views: int = 1

    def __len__(self):
        return len(self.dirs)

    @classmethod
    def from_views(cls, cameras: list[Camera], images, masks) -> "RayDataset":
        """``images[v]`` is (H, W, 3); ``masks[v]`` is (H, W, C) at the camera resolution."""
        if len(cameras) != len(images) or len(cameras) != len(masks):
            raise DomainError("cameras, images and masks must align")
        o, d, c, m = [], [], [], []
        for cam, img, msk in zip(cameras, images, masks):
            K = cam.intrinsics
            img = np.asarray(img, dtype=np.float64)
            msk = np.asarray(msk, dtype=np.float64)
            if msk.ndim == 2:
                msk = msk[..., None]
            if img.shape[:2] != (K.height, K.width) or msk.shape[:2] != (K.height, K.width):
                raise DomainError("image size does not match camera intrinsics")
            dirs = pixel_directions(cam, pixel_centers(K).reshape(-1, 2))
            o.append(np.broadcast_to(cam.center, dirs.shape))
            d.append(dirs)
            c.append(img.reshape(-1, 3))
            m.append(msk.reshape(len(dirs), -1))
        return cls(np.ascontiguousarray(np.concatenate(o)), np.ascontiguousarray(np.concatenate(d)),
                   np.ascontiguousarray(np.concatenate(c)), np.ascontiguousarray(np.concatenate(m)),
                   len(cameras))

    def batch(self, idx):
        return (np.ascontiguousarray(self.origins[idx]), np.ascontiguousarray(self.dirs[idx]),
                np.ascontiguousarray(self.rgb[idx]), np.ascontiguousarray(self.masks[idx]))


class Adam:
    """Adam over the field's logit grid with per-group learning rates.

    Each channel keeps its own step count so relevancy channels start their
    bias correction from step one when the joint phase begins.
    """

    def __init__(self, field: RelevancyField, config: TrainConfig):
        self.m = np.zeros_like(field.params)
        self.v = np.zeros_like(field.params)
        K = field.params.shape[-1]
        self.lr = np.array([config.lr_density] + [config.lr_color] * 3 + [config.lr_relevancy] * (K - 4))
        self.steps = np.zeros(K)
        self.config = config

    def step(self, field: RelevancyField, grad: np.ndarray, channel_on: np.ndarray):
        self.steps[channel_on] += 1
        c = self.config
        kernels.adam_step(field.params, grad, self.m, self.v, self.current_lr(), channel_on, self.steps,
                          c.beta1, c.beta2, c.eps)

    def current_lr(self) -> np.ndarray:
        """Per-channel rates for the step being taken.

        Each group decays by its own step count, so relevancy starts its
        schedule when the joint phase begins.
        """
        lr = self.lr.copy()
        c = self.config
        for sl, h in ((slice(0, 4), c.geometry_halflife), (slice(4, None), c.relevancy_halflife)):
            n = self.steps[sl]
            if h > 0 and n.size and n[0] > 0:
                lr[sl] *= 0.5 ** ((n[0] - 1) / h)
        return lr


@dataclass
class LossReport:
    iteration: int
    phase: str
    loss_rgb: float
    loss_rel: float

    @property
    def total(self) -> float:
        return self.loss_rgb + self.loss_rel


def objective_and_grad(field: RelevancyField, origins, dirs, gt_rgb, gt_masks, sampling: RaySampling,
                       rgb_weight=1.0, rel_weight=1.0, jitter=None, detach_geometry=False,
                       grad_geometry=True, grad_relevancy=True):
    """Objective ``rgb_weight * L_rgb + rel_weight * L_rel`` and its gradient w.r.t. every logit."""
    grad = np.zeros_like(field.params)
    tn = np.full(len(dirs), sampling.t_near)
    tf = np.full(len(dirs), sampling.t_far)
    jitter = np.empty((0, 0)) if jitter is None else np.ascontiguousarray(jitter)
    lr, ll = kernels.loss_and_grad(
        field.params, field.lo, field.hi, field.scale, field.res_array,
        np.ascontiguousarray(origins, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
        tn, tf, sampling.n_samples, jitter, sampling.min_transmittance,
        np.ascontiguousarray(gt_rgb, dtype=np.float64), np.ascontiguousarray(gt_masks, dtype=np.float64),
        float(rel_weight), float(rgb_weight), grad_geometry, grad_relevancy, detach_geometry, grad,
        sampling.skip_tau)
    return rgb_weight * lr + rel_weight * ll, lr, ll, grad


class Trainer:
    """Holds optimizer and RNG state across iterations."""

    def __init__(self, field: RelevancyField, dataset: RayDataset, config: TrainConfig):
        if len(dataset) == 0:
            raise DomainError("empty ray dataset")
        if dataset.masks.shape[1] != field.channels:
            raise DomainError(f"dataset has {dataset.masks.shape[1]} mask channels, field has {field.channels}")
        self.field = field
        self.dataset = dataset
        self.config = config
        self.optimizer = Adam(field, config)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self._grad = np.zeros_like(field.params)
        self._positive = np.flatnonzero(dataset.masks.max(axis=1) > config.positive_threshold) \
            if dataset.masks.size else np.empty(0, np.int64)

    def phase_for(self, iteration: int) -> str:
        return GEOMETRY if iteration < self.config.geometry_iterations else JOINT

    def sample(self, phase: str):
        """Ray indices for one batch and their importance weights (None when uniform).

        In the joint phase a ``positive_fraction`` share is drawn from rays
        whose mask is above ``positive_threshold`` in some channel. Every ray
        is weighted by ``1 / (N q(r))`` under the mixture ``q``, which keeps
        the expected loss and gradient equal to uniform sampling.
        """
        cfg = self.config
        n, B = len(self.dataset), cfg.rays_per_batch
        P = self._positive
        beta = cfg.positive_fraction
        if phase != JOINT or beta == 0 or len(P) == 0:
            # sorted indices keep consecutive rays spatially coherent, which is much kinder to the cache
            return np.sort(self.rng.integers(0, n, B)), None
        n_pos = int(round(beta * B))
        idx = np.concatenate([self.rng.integers(0, n, B - n_pos), P[self.rng.integers(0, len(P), n_pos)]])
        idx.sort()
        q = np.full(B, (1.0 - beta) / n)
        q[np.isin(idx, P, assume_unique=False)] += beta / len(P)
        return idx, 1.0 / (n * q)

    def step(self, phase: str | None = None) -> LossReport:
        cfg = self.config
        phase = phase or self.phase_for(self.iteration)
        idx, weights = self.sample(phase)
        jitter = self.rng.random((cfg.rays_per_batch, cfg.n_samples)) if cfg.stratified else None
        report = train_step(self.field, self.dataset.batch(idx), phase, self.optimizer, cfg,
                            jitter=jitter, iteration=self.iteration, grad_buffer=self._grad,
                            ray_weights=weights)
        self.iteration += 1
        return report


def train_step(field: RelevancyField, batch, phase: str, optimizer: Adam, config: TrainConfig,
               jitter=None, iteration: int = 0, grad_buffer=None, ray_weights=None) -> LossReport:
    """One optimizer update.

    Geometry phase: only density/color move, driven by the color loss.
    Joint phase: relevancy joins; its loss never flows into density or color.
    """
    if phase not in (GEOMETRY, JOINT):
        raise DomainError(f"unknown phase {phase!r}")
    origins, dirs, gt_rgb, gt_masks = batch
    if len(dirs) == 0:
        raise DomainError("empty ray batch")
    joint = phase == JOINT
    # the optimizer hands the buffer back zeroed
    grad = grad_buffer if grad_buffer is not None else np.zeros_like(field.params)
    sampling = config.sampling
    tn = np.full(len(dirs), sampling.t_near)
    tf = np.full(len(dirs), sampling.t_far)
    lr, ll = kernels.loss_and_grad(
        field.params, field.lo, field.hi, field.scale, field.res_array, origins, dirs, tn, tf,
        sampling.n_samples, np.empty((0, 0)) if jitter is None else jitter, sampling.min_transmittance,
        gt_rgb, gt_masks, config.rel_weight if joint else 0.0, config.rgb_weight,
        True, joint, True, grad, sampling.skip_tau,
        np.empty(0) if ray_weights is None else np.ascontiguousarray(ray_weights, dtype=np.float64))
    if joint and config.tv_relevancy > 0:
        kernels.tv_loss_and_grad(field.params, 4, field.params.shape[-1], config.tv_relevancy, grad)
    if not (math.isfinite(lr) and math.isfinite(ll)):
        raise TrainingError("non-finite loss", iteration)
    channel_on = np.ones(field.params.shape[-1], np.bool_)
    channel_on[4:] = joint
    optimizer.step(field, grad, channel_on)
    return LossReport(iteration, phase, lr, ll if joint else float("nan"))


@dataclass
class TrainResult:
    field: RelevancyField
    history: list = dc_field(default_factory=list)

    @property
    def loss_rgb(self):
        return [r.loss_rgb for r in self.history]

    @property
    def loss_rel(self):
        return [r.loss_rel for r in self.history]


def train(field: RelevancyField, dataset: RayDataset, config: TrainConfig = TrainConfig(),
          on_export=None, on_iteration=None) -> TrainResult:
    """Run the phase schedule.

    ``on_export(field, iteration)`` fires exactly once, after
    ``config.export_iteration`` iterations have completed (before any when it
    is 0), whenever ``total_iterations > 0``. ``on_iteration(field, report)``
    fires after every iteration.
    """
    if dataset.n_views < 2:
        raise DomainError("training needs at least two views")
    result = TrainResult(field)
    if config.total_iterations == 0:
        return result
    trainer = Trainer(field, dataset, config)
    if config.export_iteration == 0 and on_export is not None:
        on_export(field, 0)
    for it in range(config.total_iterations):
        report = trainer.step()
        result.history.append(report)
        if on_iteration is not None:
            on_iteration(field, report)
        if it + 1 == config.export_iteration and on_export is not None:
            on_export(field, it + 1)
    return result


def fit_field(bounds, cameras, images, masks, config: TrainConfig = TrainConfig(), longest: int = 96,
              on_export=None, on_iteration=None) -> TrainResult:
    """Build a fresh field over ``bounds`` (near-cubic voxels, ``longest`` nodes
    on the longest axis) and train it on the given training-resolution views."""
    lo, hi = bounds
    dataset = RayDataset.from_views(cameras, images, masks)
    field = RelevancyField(lo, hi, cubic_resolution(lo, hi, longest), dataset.masks.shape[1])
    return train(field, dataset, config, on_export=on_export, on_iteration=on_iteration)
