"""Optimization loop: band-weighted view sampling, warm-up, Adam and densification."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import densify as dens
from .checkpoint import Checkpoint
from .color import ColorDecoder, SHColorModel, init_decoder
from .dataset import Dataset, downsample, split_train_eval
from .errors import EmptyViewsError, NonFiniteLossError
from .losses import SSIM_WINDOW, LossWeights, total_loss
from .metrics import evaluate
from .optim import Adam
from .raster import render_backward, render_forward
from .scene import CameraView, SpectralBandSet, init_from_points, knn_indices, logit

log = logging.getLogger(__name__)

GEOMETRY = ("position", "rotation", "log_scale", "opacity_logit")
RESET_OPACITY = 0.01


@dataclass
class TrainConfig:
    iterations: int = 120000
    lr_feature: float = 0.005
    lr_mlp: float = 0.005
    lr_position_init: float = 1.6e-4     # times the scene extent, decays exponentially
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 0.0025
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15
    warmup_iters: int = 500
    rgb_sampling_weight: float = 4.0
    sampling: str = "weighted"           # or "interleave"
    densify_interval: int = 300
    tau_grad: float = dens.TAU_GRAD
    densify_start: int = 500
    densify_stop: Optional[int] = None   # default: 60% of iterations
    opacity_reset_interval: int = 3000
    opacity_reset: bool = True
    resolution_schedule: tuple = ((250, 4), (500, 2))
    seed: int = 0
    color_model: str = "neural"
    feature_dim: int = 8
    hidden_width: int = 32
    hidden_layers: int = 1
    sh_degree: int = 3
    knn_k: int = 3
    cos_knn: int = 8
    dssim_weight: float = 0.2
    norm_weight: float = 0.1
    smooth_weight: float = 0.0
    cos_weight: float = 0.0
    background: float = 0.0
    threads: int = 1
    eval_interval: int = 0

    def __post_init__(self):
        self.resolution_schedule = tuple(tuple(int(x) for x in p) for p in self.resolution_schedule)
        self.betas = tuple(float(b) for b in self.betas)
        rates = (self.lr_feature, self.lr_mlp, self.lr_position_init, self.lr_position_final,
                 self.lr_opacity, self.lr_scale, self.lr_rotation, self.lr_sh)
        if min(rates) <= 0:
            raise ValueError("all learning rates must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.iterations > 0 and self.warmup_iters >= self.iterations:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) must be below iterations ({self.iterations})")
        if self.color_model not in ("neural", "sh"):
            raise ValueError(f"unknown color model {self.color_model!r}")
        if self.sampling not in ("weighted", "interleave"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.rgb_sampling_weight <= 0 or self.densify_interval < 1:
            raise ValueError("rgb_sampling_weight and densify_interval must be positive")

    @property
    def stop(self) -> int:
        return int(0.6 * self.iterations) if self.densify_stop is None else self.densify_stop

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.dssim_weight, self.norm_weight, self.smooth_weight, self.cos_weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["resolution_schedule"] = [list(p) for p in self.resolution_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- sampling

def _is_rgb(view: CameraView, band_set: SpectralBandSet) -> bool:
    return band_set[view.band_index].channel_count == 3


def sampling_weights(views: Sequence[CameraView], band_set: SpectralBandSet, rgb_weight: float) -> np.ndarray:
    return np.array([rgb_weight if _is_rgb(v, band_set) else 1.0 for v in views])


def sample_view(rng: np.random.Generator, views: Sequence[CameraView], band_set: SpectralBandSet,
                rgb_weight: float = 4.0) -> CameraView:
    """Weighted categorical draw: RGB images weigh ``rgb_weight``, all others 1."""
    if not views:
        raise EmptyViewsError("no views to sample from")
    w = sampling_weights(views, band_set, rgb_weight)
    return views[int(rng.choice(len(views), p=w / w.sum()))]


def interleaved_view(rng: np.random.Generator, views: Sequence[CameraView], band_set: SpectralBandSet,
                     iteration: int, every: int = 4) -> CameraView:
    """After ``every`` multi-spectral draws, draw an RGB image."""
    if not views:
        raise EmptyViewsError("no views to sample from")
    rgb = [v for v in views if _is_rgb(v, band_set)]
    ms = [v for v in views if not _is_rgb(v, band_set)]
    pool = rgb if (rgb and (iteration % (every + 1) == every or not ms)) else ms
    return pool[int(rng.integers(len(pool)))]


# ---------------------------------------------------------------- schedules

def resolution_factor(schedule, iteration: int) -> int:
    for until, factor in schedule:
        if iteration < until:
            return factor
    return 1


def position_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    t = min(max(iteration / max(config.iterations, 1), 0.0), 1.0)
    lr = math.exp((1 - t) * math.log(config.lr_position_init) + t * math.log(config.lr_position_final))
    return lr * extent


def scene_extent(views: Sequence[CameraView]) -> float:
    """1.1 times the largest distance of a camera center from the centers' mean."""
    centers = np.array([v.camera_center for v in views])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) if len(centers) else 0.0
    return 1.1 * radius if radius > 0 else 1.0


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    config: TrainConfig
    band_set: SpectralBandSet
    cloud: object
    model: object
    optimizer: Adam
    densify: dens.DensifyState
    rng: np.random.Generator
    extent: float
    iteration: int = 0
    knn: Optional[np.ndarray] = None
    _images: dict = field(default_factory=dict, repr=False)

    def checkpoint(self) -> Checkpoint:
        # the thread count is a runtime setting; leaving it out keeps checkpoints thread-independent
        config = {k: v for k, v in self.config.to_dict().items() if k != "threads"}
        return Checkpoint(self.band_set, self.cloud.copy(), self.model.copy(), self.iteration, config)

    def target(self, view: CameraView, factor: int):
        key = (id(view), factor)
        if key not in self._images:
            self._images[key] = (view.scaled(factor), downsample(view.image, factor))
        return self._images[key]

    def refresh_knn(self) -> None:
        if self.config.cos_weight > 0 and self.config.color_model == "neural" and self.cloud.count > 1:
            self.knn = knn_indices(self.cloud.position, self.config.cos_knn)


def init_state(dataset: Dataset, config: TrainConfig, train_views: Sequence[CameraView]) -> TrainState:
    band_set = dataset.band_set
    feature_dim = config.feature_dim if config.color_model == "neural" else 0
    cloud = init_from_points(dataset.points, feature_dim=max(feature_dim, 1), knn_k=config.knn_k,
                             seed=config.seed)
    if config.color_model == "neural":
        model = init_decoder(config.feature_dim, config.hidden_width, config.hidden_layers,
                             band_set.total_channels, seed=config.seed + 1)
    else:
        cloud.feature = np.zeros((cloud.count, 0))
        model = SHColorModel.zeros(cloud.count, band_set, config.sh_degree)
    state = TrainState(config, band_set, cloud, model, Adam(config.betas, config.eps),
                       dens.DensifyState.zeros(cloud.count, len(band_set)),
                       np.random.default_rng(config.seed), scene_extent(train_views))
    state.refresh_knn()
    return state


@dataclass
class StepReport:
    iteration: int
    loss: float
    band: int
    band_name: str
    count: int
    terms: dict
    view: str
    homodir: Optional[np.ndarray] = None        # NDC-scaled, only inside the accumulation window
    participated: Optional[np.ndarray] = None


def train_step(state: TrainState, view: CameraView, iteration: Optional[int] = None) -> StepReport:
    """One forward/backward/update on one band image.

    During warm-up the geometry arrays are not touched at all: the projection
    backward is skipped and only features and the color model are updated.
    """
    cfg = state.config
    it = state.iteration if iteration is None else iteration
    warm = it < cfg.warmup_iters
    factor = resolution_factor(cfg.resolution_schedule, it)
    while factor > 1 and min(view.width, view.height) // factor < SSIM_WINDOW:
        factor //= 2    # never shrink below the D-SSIM window
    sview, gt = state.target(view, factor)

    rs = render_forward(state.cloud, state.model, sview, view.band_index, state.band_set,
                        background=cfg.background, threads=cfg.threads)
    features = state.cloud.feature if isinstance(state.model, ColorDecoder) else None
    res = total_loss(rs.image, gt, features, cfg.weights, knn=state.knn)
    if not math.isfinite(res.value):
        raise NonFiniteLossError(f"loss became {res.value} at iteration {it}")
    grads = render_backward(rs, res.dimage, state.band_set, geometry=not warm, threads=cfg.threads)

    opt = state.optimizer
    if isinstance(state.model, ColorDecoder):
        opt.step("feature", state.cloud.feature, grads.cloud["feature"] + res.dfeatures, cfg.lr_feature)
        for name, p in state.model.params().items():
            opt.step(f"mlp.{name}", p, grads.model[name], cfg.lr_mlp)
    else:
        opt.step("sh_coeffs", state.model.coeffs, grads.model["coeffs"], cfg.lr_sh)
    if not warm:
        lrs = {"position": position_lr(cfg, it, state.extent), "rotation": cfg.lr_rotation,
               "log_scale": cfg.lr_scale, "opacity_logit": cfg.lr_opacity}
        for name in GEOMETRY:
            opt.step(name, getattr(state.cloud, name), grads.cloud[name], lrs[name])

    report = StepReport(it, res.value, view.band_index, state.band_set[view.band_index].name,
                        state.cloud.count, res.terms, view.name)
    if not warm and it < cfg.stop:
        # pixel-space sums -> NDC units, as in the 3DGS densification threshold
        homodir = grads.homodir * np.array([sview.width / 2.0, sview.height / 2.0])
        dens.accumulate(state.densify, view.band_index, homodir, grads.participated)
        report.homodir, report.participated = homodir, grads.participated
    return report


def _densify_and_prune(state: TrainState, callback=None) -> None:
    cfg = state.config
    mask = dens.criterion(state.densify, cfg.tau_grad)
    if callback is not None:
        callback("densify", {"iteration": state.iteration, "mask": mask.copy(),
                             "averages": state.densify.averages()})
    extra = {"sh_coeffs": state.model.coeffs} if isinstance(state.model, SHColorModel) else {}
    before = state.cloud.count
    cloud, extra = dens.apply(state.cloud, state.optimizer, mask, state.extent, state.rng,
                              state.densify, extra)
    cloud, extra = dens.prune(cloud, state.optimizer, state.extent, state=state.densify, extra=extra)
    state.cloud = cloud
    if isinstance(state.model, SHColorModel):
        state.model = SHColorModel(extra["sh_coeffs"], state.band_set, state.model.degree)
    state.densify.reset(cloud.count)
    state.refresh_knn()
    log.info("iteration %d: densified %d of %d, now %d primitives",
             state.iteration, int(mask.sum()), before, cloud.count)


def _reset_opacity(state: TrainState) -> None:
    op = state.cloud.opacity_logit
    np.minimum(op, logit(RESET_OPACITY), out=op)
    state.optimizer.reset("opacity_logit")


def train(dataset: Dataset, config: TrainConfig, log_path=None,
          callback: Optional[Callable[[str, dict], None]] = None,
          eval_views: Optional[Sequence[CameraView]] = None) -> Checkpoint:
    """Train from the dataset's sparse points and return the final checkpoint.

    ``callback(kind, payload)`` receives ``"step"`` reports and ``"densify"``
    events. ``log_path`` gets one JSON record per iteration.
    """
    train_views, held = split_train_eval(dataset.views)
    eval_views = held if eval_views is None else eval_views
    if not train_views:
        raise EmptyViewsError("dataset has no training views")
    with threadpool_limits(limits=1):
        state = init_state(dataset, config, train_views)
        fh = open(log_path, "w") if log_path else None
        try:
            for it in range(config.iterations):
                state.iteration = it
                if config.sampling == "weighted":
                    view = sample_view(state.rng, train_views, state.band_set, config.rgb_sampling_weight)
                else:
                    view = interleaved_view(state.rng, train_views, state.band_set, it,
                                            int(config.rgb_sampling_weight))
                report = train_step(state, view, it)
                if callback is not None:
                    callback("step", {"report": report, "state": state})
                step = it + 1
                state.iteration = step
                if config.densify_start < step <= config.stop and step % config.densify_interval == 0:
                    _densify_and_prune(state, callback)
                if (config.opacity_reset and step % config.opacity_reset_interval == 0
                        and config.warmup_iters < step <= config.stop):
                    _reset_opacity(state)
                record = {"iter": step, "loss": report.loss, "band": report.band_name,
                          "S": state.cloud.count, **report.terms}
                if config.eval_interval and step % config.eval_interval == 0 and eval_views:
                    rep = evaluate(state.checkpoint(), eval_views, background=config.background,
                                   threads=config.threads)
                    record["eval_psnr"] = rep.get("psnr_all")
                if fh:
                    fh.write(json.dumps(record) + "\n")
            state.iteration = config.iterations
        finally:
            if fh:
                fh.close()
        return state.checkpoint()
