"""Fitting the reference kernels and the motion model to projection data."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, GridSpec, inverse_softplus, quat_to_rotmat, sample_cloud_from_volume
from .ffd import POSITION, FFDMotionModel, TemporalSpline, lattice_for_fov
from .geometry import view_pose
from .splatting import LOWPASS, render, render_backward
from .warp import MotionMode, warp, warp_backward

__all__ = [
    "TrainConfig",
    "AdamState",
    "Adam",
    "DensifyStats",
    "TrainingDiverged",
    "TrainResult",
    "l2_loss",
    "linear_lr",
    "density_control",
    "init_motion_model",
    "init_cloud",
    "train",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    Position-like learning rates are given for a scene normalized to a unit
    half-extent and multiplied by ``scene_scale`` (mm) at run time.
    """

    iterations: int = 50000
    mode: str = "di"
    freeze_motion: bool = False
    seed: int = 0
    deterministic: bool = True  # every kernel already sums in a fixed order; kept for config compatibility
    n_ranks: int = 2
    lattice_spacing_voxels: float = 8.0
    temporal_spacing: float = 4.0
    temporal_init_std: float = 0.1
    n_init_points: int = 80000
    init_threshold_ratio: float = 0.05
    lr_density: tuple = (1e-2, 1e-3)
    lr_means: tuple = (2e-4, 2e-5)
    lr_quats: tuple = (1e-3, 1e-4)
    lr_scales: tuple = (5e-3, 5e-4)
    lr_lattice: tuple = (1e-4, 1e-5)
    lr_temporal: tuple = (1e-2, 1e-3)
    lr_pg_weights: tuple = (1e-4, 1e-5)
    densify_grad_threshold: float = 5e-8
    densify_interval: int = 100
    densify_from: int = 500
    densify_until_frac: float = 0.5
    prune_ratio: float = 1e-4
    split_factor: float = 1.6
    percent_dense: float = 0.01
    max_kernels: int = 500000
    scale_min_voxels: float = 0.1
    scale_max_fov_frac: float = 0.5
    lowpass: float = LOWPASS
    log_every: int = 100
    checkpoint_every: int = 5000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        MotionMode(self.mode)
        for name in ("lr_density", "lr_means", "lr_quats", "lr_scales", "lr_lattice", "lr_temporal",
                     "lr_pg_weights"):
            init, final = getattr(self, name)
            if not (init > 0 and final > 0 and final <= init):
                raise ValueError(f"{name}: need 0 < final <= initial")
            setattr(self, name, (float(init), float(final)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def linear_lr(schedule, iteration, total) -> float:
    """Linear decay from the initial rate at iteration 0 to the final rate at ``total - 1``."""
    init, final = schedule
    if total <= 1:
        return final
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    # this form hits both endpoints exactly
    return init * (1.0 - frac) + final * frac


def _channel_scale(n_channels, scene_scale):
    # only displacement channels carry millimetres; log-scale and quaternion offsets are unitless
    scale = np.ones(n_channels)
    scale[POSITION] = scene_scale
    return scale


def l2_loss(rendered, measured):
    """Mean squared error over pixels and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    if rendered.shape != measured.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {measured.shape}")
    diff = rendered - measured
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Bias-corrected Adam over named parameter arrays, updated in place."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, AdamState] = {}
        self.skipped = 0

    def step(self, name, param, grad, lr) -> bool:
        st = self.state.get(name)
        if st is None or st.m.shape != param.shape:
            st = self.state[name] = AdamState(np.zeros_like(param), np.zeros_like(param))
        st.step += 1
        if not np.all(np.isfinite(grad)):
            self.skipped += 1
            log.warning("non-finite gradient for %s; update skipped", name)
            return False
        b1, b2 = self.beta1, self.beta2
        st.m *= b1
        st.m += (1 - b1) * grad
        st.v *= b2
        st.v += (1 - b2) * grad * grad
        m_hat = st.m / (1 - b1**st.step)
        v_hat = st.v / (1 - b2**st.step)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def remap_rows(self, name, keep, n_new):
        """Keep rows ``keep`` and append ``n_new`` zero rows for a per-kernel group."""
        st = self.state.get(name)
        if st is None:
            return
        pad = ((0, n_new),) + ((0, 0),) * (st.m.ndim - 1)
        st.m = np.pad(st.m[keep], pad)
        st.v = np.pad(st.v[keep], pad)


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n))

    def update(self, grad_norm, visible):
        self.grad_accum[visible] += grad_norm[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)


CLOUD_GROUPS = ("density_raw", "means", "quats", "log_scales", "pg_weights")


def density_control(cloud: GaussianCloud, stats: DensifyStats, config: TrainConfig, scene_extent: float,
                    rng: np.random.Generator, adam: Adam | None = None):
    """Clone, split and prune kernels.

    Kernels whose mean image-space positional gradient exceeds the threshold
    are cloned (largest scale at most ``percent_dense * scene_extent``) or
    split into two samples with scales divided by ``split_factor``.  Kernels
    with density below ``prune_ratio`` times the maximum are removed.
    Returns the new cloud and a dict of counts.
    """
    n = len(cloud)
    grad = stats.mean()
    hot = grad > config.densify_grad_threshold
    budget = max(config.max_kernels - n, 0)
    if hot.sum() > budget:
        # per_kernel growth is at most one: keep the strongest candidates
        order = np.argsort(-grad, kind="stable")
        hot = np.zeros(n, dtype=bool)
        hot[order[:budget]] = True
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    small = max_scale <= config.percent_dense * scene_extent
    clone = hot & small
    split = hot & ~small
    density = cloud.density

    # clones: same attributes with a scale-proportional jitter, both halves share the density
    ci = np.flatnonzero(clone)
    clones = cloud.subset(ci)
    clones.means = clones.means + rng.normal(size=(len(ci), 3)) * 0.1 * np.exp(clones.log_scales)
    half = inverse_softplus(0.5 * density[ci])
    clones.density_raw = half.copy()

    # splits: two samples from the parent, scales shrunk
    si = np.flatnonzero(split)
    children = cloud.subset(np.repeat(si, 2))
    if len(si):
        rot = quat_to_rotmat(children.quats)
        local = rng.normal(size=(len(children), 3)) * np.exp(children.log_scales)
        children.means = children.means + np.einsum("nij,nj->ni", rot, local)
        children.log_scales = children.log_scales - np.log(config.split_factor)
        children.density_raw = inverse_softplus(np.repeat(density[si], 2) / (0.8 * 2))

    base = cloud.copy()
    base.density_raw[ci] = half
    keep = np.flatnonzero(~split)
    new = base.subset(keep).concat(clones).concat(children)
    kept_rows = np.concatenate([keep, ci, np.repeat(si, 2)])

    # prune on activated density
    dens = new.density
    survive = dens >= config.prune_ratio * dens.max() if len(new) else np.zeros(0, bool)
    new = new.subset(survive)
    kept_rows = kept_rows[survive]

    if adam is not None:
        n_keep_old = int(np.sum(survive[: len(keep)]))
        old_rows = kept_rows[:n_keep_old]
        for name in CLOUD_GROUPS:
            adam.remap_rows(name, old_rows, len(new) - n_keep_old)
    counts = {"cloned": len(ci), "split": len(si), "pruned": int((~survive).sum()), "count": len(new)}
    return new, counts


def init_motion_model(config: TrainConfig, grid: GridSpec, n_t: int, rng: np.random.Generator) -> FFDMotionModel:
    """Zero lattice over the grid; small random temporal controls.

    Both factors of ``w_r(t) u_r(x)`` starting at zero would be a stationary
    point, so the temporal controls get a small random start while the
    lattice (and therefore the motion) starts at zero.
    """
    lo = grid.origin - 0.5 * grid.spacing
    hi = grid.origin + (np.asarray(grid.dims) - 0.5) * grid.spacing
    channels = 10 if MotionMode(config.mode) is MotionMode.DECOUPLED_FFD else 3
    lattice = lattice_for_fov(lo, hi, config.lattice_spacing_voxels * grid.spacing, config.n_ranks, channels)
    temporal = TemporalSpline.zeros(config.n_ranks, n_t, config.temporal_spacing)
    temporal.controls[:] = rng.normal(0.0, config.temporal_init_std, size=temporal.controls.shape)
    return FFDMotionModel(lattice, temporal)


def _scale_bounds(config: TrainConfig, grid: GridSpec):
    return config.scale_min_voxels * float(grid.spacing.min()), config.scale_max_fov_frac * float(grid.extent.max())


def init_cloud(config: TrainConfig, init_volume, grid: GridSpec, rng: np.random.Generator) -> GaussianCloud:
    threshold = config.init_threshold_ratio * float(np.max(init_volume))
    cloud = sample_cloud_from_volume(init_volume, grid, config.n_init_points, threshold,
                                     int(rng.integers(2**31)), scale_bounds=_scale_bounds(config, grid))
    if MotionMode(config.mode) is MotionMode.PER_GAUSSIAN:
        cloud.pg_weights = np.zeros((len(cloud), config.n_ranks, 10))
    return cloud


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainResult:
    cloud: GaussianCloud
    model: FFDMotionModel
    log: list = field(default_factory=list)
    folds: int = 0
    final_loss: float = float("nan")


def full_projection_loss(cloud, model, mode, projections) -> float:
    """Mean L2 loss over every view of a projection set."""
    geom = projections.geometry
    total = 0.0
    for v in range(len(projections)):
        t = int(projections.time_indices[v])
        img = render(warp(cloud, model, t, mode), view_pose(geom, v, t), geom)
        total += l2_loss(img, projections.images[v])[0]
    return total / len(projections)


def train(config: TrainConfig, projections, init_volume, grid: GridSpec, cloud: GaussianCloud | None = None,
          model: FFDMotionModel | None = None, on_checkpoint=None, on_log=None) -> TrainResult:
    """Fit reference kernels and motion to ``projections``.

    Each iteration draws one view uniformly at random, warps the kernels to
    the view's time index, renders, and back-propagates the L2 loss through
    the renderer, the warp and the motion model before one Adam step per
    parameter group.
    """
    mode = MotionMode(config.mode)
    geom = projections.geometry
    rng = np.random.default_rng(config.seed)
    init_rng, loop_rng, dens_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3))
    if cloud is None:
        cloud = init_cloud(config, init_volume, grid, init_rng)
    if model is None:
        model = init_motion_model(config, grid, projections.n_t, init_rng)
    if mode is MotionMode.PER_GAUSSIAN and cloud.pg_weights is None:
        cloud.pg_weights = np.zeros((len(cloud), model.n_ranks, 10))

    scene_scale = 0.5 * float(grid.extent.max())
    lo_scale, hi_scale = _scale_bounds(config, grid)
    cloud.clamp_scales(lo_scale, hi_scale)
    adam = Adam()
    stats = DensifyStats.zeros(len(cloud))
    densify_until = int(config.densify_until_frac * config.iterations)
    result = TrainResult(cloud, model)
    t0 = time.perf_counter()
    running = []

    for it in range(config.iterations):
        v = int(loop_rng.integers(len(projections)))
        t = int(projections.time_indices[v])
        pose = view_pose(geom, v, t)
        snap = warp(cloud, model, t, mode, for_backward=True)
        result.folds += snap.folds
        img, splats = render(snap, pose, geom, lowpass=config.lowpass, return_splats=True)
        loss, d_img = l2_loss(img, projections.images[v])
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it} (view {v}, kernels {len(cloud)}, "
                f"max |mean| {np.abs(cloud.means).max():.3g}, folds {result.folds})")
        running.append(loss)
        rg = render_backward(snap, pose, geom, d_img, splats, lowpass=config.lowpass)
        wg = warp_backward(snap, cloud, model, rg.means, rg.covs, rg.density)
        stats.update(rg.means2d_norm, splats.visible)

        lr = lambda sched: linear_lr(sched, it, config.iterations)  # noqa: E731
        adam.step("density_raw", cloud.density_raw, wg.cloud.density_raw, lr(config.lr_density))
        adam.step("means", cloud.means, wg.cloud.means, lr(config.lr_means) * scene_scale)
        adam.step("quats", cloud.quats, wg.cloud.quats, lr(config.lr_quats))
        adam.step("log_scales", cloud.log_scales, wg.cloud.log_scales, lr(config.lr_scales))
        if not config.freeze_motion:
            if mode is MotionMode.PER_GAUSSIAN:
                adam.step("pg_weights", cloud.pg_weights, wg.cloud.pg_weights,
                          lr(config.lr_pg_weights) * _channel_scale(10, scene_scale))
            else:
                adam.step("lattice", model.lattice.coeffs, wg.lattice,
                          lr(config.lr_lattice) * _channel_scale(model.lattice.n_channels, scene_scale))
            adam.step("temporal", model.temporal.controls, wg.temporal, lr(config.lr_temporal))
        cloud.clamp_scales(lo_scale, hi_scale)

        if (config.densify_from <= it < densify_until and (it + 1) % config.densify_interval == 0):
            cloud, counts = density_control(cloud, stats, config, 2.0 * scene_scale, dens_rng, adam)
            stats = DensifyStats.zeros(len(cloud))
            result.cloud = cloud

        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            record = {"iteration": it + 1, "loss": float(np.mean(running)), "kernels": len(cloud),
                      "folds": result.folds, "skipped": adam.skipped,
                      "wall_time": round(time.perf_counter() - t0, 3)}
            running = []
            result.log.append(record)
            if on_log is not None:
                on_log(record)
        if on_checkpoint is not None and ((it + 1) % config.checkpoint_every == 0 or it + 1 == config.iterations):
            on_checkpoint(it + 1, cloud, model)

    result.cloud = cloud
    result.final_loss = full_projection_loss(cloud, model, mode, projections)
    return result
