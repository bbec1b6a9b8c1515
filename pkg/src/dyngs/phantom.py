"""Synthetic dynamic cone-beam data with analytic ground truth.

Phantoms are sums of Gaussian blobs, so every projection has a closed form
(the exact line integral of a trivariate Gaussian) and ground-truth volumes
can be rasterized at any resolution.  Motion is either a known low-rank FFD
(realizable by the DI model) or a per-blob analytic trajectory (deliberately
outside the model class).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .cloud import GridSpec, rasterize_to_volume
from .ffd import FFDMotionModel, TemporalSpline, displacement, lattice_for_fov
from .geometry import ScanGeometry, pixel_rays, view_pose
from .warp import warp_means_covs

__all__ = [
    "BlobPhantom",
    "TruthMotion",
    "NoiseSpec",
    "ProjectionSet",
    "TruthBundle",
    "analytic_project",
    "breathing_trace",
    "fit_temporal_controls",
    "desk_phantom",
    "desk_truth_motion",
    "mismatch_truth_motion",
    "phantom_at",
    "add_noise",
    "make_dataset",
    "truth_volume",
    "motion_blurred_volume",
]


@dataclass
class BlobPhantom:
    density: np.ndarray  # (B,) mm^-1
    means: np.ndarray  # (B, 3)
    covs: np.ndarray  # (B, 3, 3)
    fov_extent: float = 0.0
    n_body: int = 0

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64).reshape(-1)
        b = self.density.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(b, 3)
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(b, 3, 3)
        if b and np.any(np.linalg.eigvalsh(self.covs)[:, 0] <= 0):
            raise ValueError("blob covariances must be SPD")

    def __len__(self):
        return self.density.shape[0]

    def to_dict(self) -> dict:
        return {"density": self.density.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist(), "fov_extent": self.fov_extent, "n_body": self.n_body}

    @classmethod
    def from_dict(cls, d) -> "BlobPhantom":
        return cls(d["density"], d["means"], d["covs"], d.get("fov_extent", 0.0), d.get("n_body", 0))


@dataclass
class TruthMotion:
    """Ground-truth motion: an FFD model, or per-blob displacements ``a(t) * direction``."""

    trace: np.ndarray  # (N_t,) breathing amplitude
    model: FFDMotionModel | None = None
    directions: np.ndarray | None = None  # (B, 3) mm per unit amplitude

    @property
    def n_t(self) -> int:
        return self.trace.shape[0]

    @property
    def kind(self) -> str:
        if self.model is not None:
            return "ffd"
        return "analytic" if self.directions is not None else "static"


@dataclass(frozen=True)
class NoiseSpec:
    fluence: float = 1e8  # photons per unattenuated pixel
    electronic_sigma: float = 4.0  # counts
    seed: int = 0

    def __post_init__(self):
        if not self.fluence > 0:
            raise ValueError("fluence must be positive")
        if self.electronic_sigma < 0:
            raise ValueError("electronic noise sigma must be non-negative")


@dataclass
class ProjectionSet:
    images: np.ndarray  # (V, rows, cols) float32 line integrals
    time_indices: np.ndarray  # (V,)
    geometry: ScanGeometry
    n_t: int
    noise: dict | None = None

    def __len__(self):
        return self.images.shape[0]


@dataclass
class TruthBundle:
    phantom: BlobPhantom
    motion: TruthMotion
    extra: dict = field(default_factory=dict)

    def volume(self, grid: GridSpec, t) -> np.ndarray:
        return truth_volume(self.phantom, self.motion, grid, t)


def analytic_project(phantom: BlobPhantom, pose, geom: ScanGeometry) -> np.ndarray:
    """Exact cone-beam line integrals of a blob phantom, one ray per pixel center."""
    src, dirs = pixel_rays(pose, geom)
    img = np.zeros(dirs.shape[:2])
    for rho, mu, cov in zip(phantom.density, phantom.means, phantom.covs):
        prec = np.linalg.inv(cov)
        v = src - mu
        ad = dirs @ prec
        dad = np.einsum("...i,...i->...", ad, dirs)
        dav = ad @ v
        vav = v @ prec @ v
        img += rho * np.sqrt(2.0 * np.pi / dad) * np.exp(-0.5 * (vav - dav**2 / dad))
    return img


def breathing_trace(n_cycles, points_per_cycle, amp_range=(0.8, 1.2), drift=0.0, seed=0,
                    phase_shift=0.0) -> np.ndarray:
    """Cosine breathing amplitude with per-cycle scaling and a linear drift.

    ``a(t) = scale_c (1 - cos(2 pi phase)) / 2 + drift t / N_t`` with
    ``scale_c`` uniform in ``amp_range`` for every cycle.
    """
    if n_cycles < 1 or points_per_cycle < 1:
        raise ValueError("need at least one cycle with one point")
    n_t = int(n_cycles * points_per_cycle)
    rng = np.random.default_rng(seed)
    scales = rng.uniform(amp_range[0], amp_range[1], size=int(n_cycles))
    t = np.arange(n_t)
    cycle = t // points_per_cycle
    phase = (t % points_per_cycle) / points_per_cycle + phase_shift
    return scales[cycle] * (1.0 - np.cos(2.0 * np.pi * phase)) / 2.0 + drift * t / n_t


def fit_temporal_controls(samples, spacing=4.0) -> np.ndarray:
    """Least-squares B-spline controls reproducing ``samples`` at ``t = 0..N_t-1``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n_t = samples.shape[1]
    probe = TemporalSpline.zeros(1, n_t, spacing)
    design = np.zeros((n_t, probe.controls.shape[1]))
    for t in range(n_t):
        first, basis = probe.stencil(t)
        design[t, first:first + 4] = basis
    ctrl, *_ = np.linalg.lstsq(design, samples.T, rcond=None)
    return ctrl.T


def _rot(axis_angles):
    ax, ay, az = axis_angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def desk_phantom(n_features=17, extent=102.4, seed=0) -> BlobPhantom:
    """Body-outline blobs plus compact high-contrast features inside a cube of side ``extent``."""
    rng = np.random.default_rng(seed)
    half = 0.5 * extent
    dens, means, covs = [], [], []
    body = [
        (0.010, [0.0, 0.0, 0.0], [0.38 * half, 0.30 * half, 0.45 * half]),
        (0.006, [-0.25 * half, 0.0, 0.1 * half], [0.22 * half, 0.2 * half, 0.3 * half]),
        (0.006, [0.25 * half, 0.0, 0.1 * half], [0.22 * half, 0.2 * half, 0.3 * half]),
    ]
    for rho, mu, sig in body:
        dens.append(rho)
        means.append(mu)
        covs.append(np.diag(np.square(sig)))
    for _ in range(n_features):
        mu = rng.uniform(-0.5 * half, 0.5 * half, size=3)
        sig = rng.uniform(2.5, 6.0, size=3)
        r = _rot(rng.uniform(0, np.pi, size=3))
        dens.append(rng.uniform(0.008, 0.02))
        means.append(mu)
        covs.append(r @ np.diag(sig**2) @ r.T)
    return BlobPhantom(dens, means, covs, fov_extent=extent, n_body=len(body))


def desk_truth_motion(n_t, points_per_cycle, extent=102.4, lattice_spacing=12.8, amp_range=(0.8, 1.2),
                      drift=0.3, amplitude_mm=(8.0, 3.0), temporal_spacing=4.0, seed=0) -> TruthMotion:
    """Rank-2 FFD breathing motion.

    Rank 1 is a superior-inferior (z) motion strongest in the lower part of
    the volume; rank 2 a smaller anterior-posterior (x) motion with a phase
    lag.  Temporal weights are B-spline fits of two breathing traces, so the
    truth lies inside the DI model class.
    """
    half = 0.5 * extent
    lattice = lattice_for_fov([-half] * 3, [half] * 3, lattice_spacing, n_ranks=2)
    cp = lattice.control_points()
    sx, sy, sz = (cp[..., a] / half for a in range(3))
    envelope = np.exp(-0.5 * (sx**2 + sy**2) / 0.8**2)
    lattice.coeffs[0, ..., 2] = amplitude_mm[0] * envelope * (0.75 - 0.25 * sz)
    lattice.coeffs[0, ..., 0] = 0.15 * amplitude_mm[0] * envelope * sy
    lattice.coeffs[1, ..., 0] = amplitude_mm[1] * envelope * (1.0 + 0.3 * sz)
    lattice.coeffs[1, ..., 1] = 0.5 * amplitude_mm[1] * envelope * sx

    n_cycles = int(np.ceil(n_t / points_per_cycle))
    a1 = breathing_trace(n_cycles, points_per_cycle, amp_range, drift, seed)[:n_t]
    a2 = breathing_trace(n_cycles, points_per_cycle, amp_range, 0.0, seed + 1, phase_shift=0.15)[:n_t]
    temporal = TemporalSpline(fit_temporal_controls(np.stack([a1, a2]), temporal_spacing), n_t, temporal_spacing)
    return TruthMotion(trace=a1, model=FFDMotionModel(lattice, temporal))


def mismatch_truth_motion(phantom: BlobPhantom, n_t, points_per_cycle, amplitude_mm=8.0,
                          amp_range=(0.8, 1.2), drift=0.3, seed=0) -> TruthMotion:
    """Per-blob rigid trajectories along random directions (not representable by a rank-2 FFD)."""
    rng = np.random.default_rng(seed)
    n_cycles = int(np.ceil(n_t / points_per_cycle))
    trace = breathing_trace(n_cycles, points_per_cycle, amp_range, drift, seed)[:n_t]
    dirs = rng.normal(size=(len(phantom), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs *= amplitude_mm
    dirs[: phantom.n_body] = 0.0
    return TruthMotion(trace=trace, directions=dirs)


def phantom_at(phantom: BlobPhantom, motion: TruthMotion | None, t):
    """Phantom snapshot at time index ``t`` and a sampler of the true DVF ``x -> D(x, t)``."""
    if motion is None or (motion.model is None and motion.directions is None):
        return phantom, (lambda x: np.asarray(x, dtype=np.float64).copy())
    if motion.model is not None:
        model = motion.model
        mu_t, cov_t, _, _ = warp_means_covs(model, phantom.means, phantom.covs, t)
        snap = BlobPhantom(phantom.density, mu_t, cov_t, phantom.fov_extent, phantom.n_body)
        return snap, (lambda x: displacement(model, x, t))

    a = float(np.interp(t, np.arange(motion.n_t), motion.trace))
    shift = a * motion.directions
    snap = BlobPhantom(phantom.density, phantom.means + shift, phantom.covs, phantom.fov_extent, phantom.n_body)
    means0 = phantom.means
    feat = slice(phantom.n_body, None)

    def sampler(x):
        # kernel-weighted blend of the feature displacements
        x = np.asarray(x, dtype=np.float64)
        d2 = np.sum((x[..., None, :] - means0[feat]) ** 2, axis=-1)
        w = np.exp(-0.5 * (d2 - d2.min(axis=-1, keepdims=True)) / 10.0**2)
        w /= w.sum(axis=-1, keepdims=True)
        return x + w @ shift[feat]

    return snap, sampler


def add_noise(image, noise: NoiseSpec, stream: int = 0) -> np.ndarray:
    """Quantum plus electronic noise in the count domain, returned as line integrals.

    Counts ``I = Poisson(fluence exp(-p)) + Normal(0, sigma^2)`` are clamped
    to at least 1 and log-converted back.  ``stream`` selects an independent
    random stream (the view index) derived from the noise seed.
    """
    p = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng([noise.seed, stream])
    counts = rng.poisson(noise.fluence * np.exp(-p)).astype(np.float64)
    if noise.electronic_sigma > 0:
        counts += rng.normal(0.0, noise.electronic_sigma, size=p.shape)
    counts = np.maximum(counts, 1.0)
    return -np.log(counts / noise.fluence)


def make_dataset(phantom: BlobPhantom, motion: TruthMotion | None, geom: ScanGeometry,
                 noise: NoiseSpec | None = None) -> tuple[ProjectionSet, TruthBundle]:
    """Project the moving phantom; view ``i`` is acquired at time index ``i``.

    Images are kept in float32, the precision of the on-disk format.
    """
    n_t = geom.n_views
    if motion is not None and motion.n_t != n_t:
        raise ValueError(f"motion has {motion.n_t} time points but geometry has {n_t} views")
    images = np.empty((n_t, geom.detector_rows, geom.detector_cols), dtype=np.float32)
    for i in range(n_t):
        snap, _ = phantom_at(phantom, motion, i)
        img = analytic_project(snap, view_pose(geom, i), geom)
        if noise is not None:
            img = add_noise(img, noise, stream=i)
        images[i] = img
    noise_meta = None if noise is None else {"fluence": noise.fluence, "electronic_sigma": noise.electronic_sigma,
                                             "seed": noise.seed}
    motion = motion if motion is not None else TruthMotion(trace=np.zeros(n_t))
    return (ProjectionSet(images, np.arange(n_t), geom, n_t, noise_meta), TruthBundle(phantom, motion))


def truth_volume(phantom: BlobPhantom, motion: TruthMotion | None, grid: GridSpec, t) -> np.ndarray:
    snap, _ = phantom_at(phantom, motion, t)
    return rasterize_to_volume((snap.density, snap.means, snap.covs), grid)


def motion_blurred_volume(truth: TruthBundle, grid: GridSpec, blur_voxels=1.0) -> np.ndarray:
    """Time-averaged, smoothed truth: a stand-in for a static iterative reconstruction."""
    n_t = truth.motion.n_t
    acc = np.zeros(grid.dims)
    for t in range(n_t):
        acc += truth.volume(grid, t)
    acc /= n_t
    return gaussian_filter(acc, blur_voxels) if blur_voxels > 0 else acc
