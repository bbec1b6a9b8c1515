"""Gaussian-mixture attenuation field: parameters, covariance assembly and
voxel rasterization.

Densities are stored as raw parameters and activated with softplus so the
attenuation stays non-negative.  Every evaluation (field, rasterization)
truncates a kernel to the axis-aligned box ``|x - mu|_inf <= 3 sigma_max``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "CUTOFF_SIGMAS",
    "GaussianCloud",
    "GridSpec",
    "EmptySupportError",
    "softplus",
    "inverse_softplus",
    "quat_to_rotmat",
    "assemble_covariance",
    "covariance_backward",
    "max_sigma",
    "field_value",
    "rasterize_to_volume",
    "sample_cloud_from_volume",
]

CUTOFF_SIGMAS = 3.0


class EmptySupportError(ValueError):
    """No voxel of the initializer volume exceeds the threshold."""


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GridSpec:
    """Regular voxel grid; ``origin`` is the center of voxel (0, 0, 0)."""

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("grid needs three dims >= 1")
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")

    @classmethod
    def centered(cls, dims, spacing) -> "GridSpec":
        """Grid whose center coincides with the isocenter."""
        dims = np.broadcast_to(np.asarray(dims), (3,))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        origin = -0.5 * (dims - 1) * spacing
        return cls(tuple(int(d) for d in dims), spacing, origin)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * self.spacing

    def axes(self) -> list[np.ndarray]:
        return [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]

    def points(self) -> np.ndarray:
        """Voxel centers, shape ``dims + (3,)``, indexed ``[ix, iy, iz]``."""
        ax = self.axes()
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": self.spacing.tolist(), "origin": self.origin.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(tuple(d["dims"]), d["spacing"], d["origin"])


@dataclass
class GaussianCloud:
    """Optimizable reference kernels.

    ``pg_weights`` (N, R, 10) is only present for the per-Gaussian motion
    mode: per rank, 3 position, 3 log-scale and 4 quaternion coefficients.
    """

    density_raw: np.ndarray
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    pg_weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.density_raw = np.asarray(self.density_raw, dtype=np.float64).reshape(-1)
        n = self.density_raw.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        if self.pg_weights is not None:
            self.pg_weights = np.asarray(self.pg_weights, dtype=np.float64)
            if self.pg_weights.shape[0] != n or self.pg_weights.shape[2] != 10:
                raise ValueError("pg_weights must have shape (N, R, 10)")

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))

    @classmethod
    def from_activated(cls, density, means, quats=None, log_scales=None, scales=None) -> "GaussianCloud":
        density = np.asarray(density, dtype=np.float64).reshape(-1)
        n = density.shape[0]
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if log_scales is None:
            log_scales = np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3)))
        return cls(inverse_softplus(density), means, quats, log_scales)

    def __len__(self) -> int:
        return self.density_raw.shape[0]

    @property
    def density(self) -> np.ndarray:
        return softplus(self.density_raw)

    @property
    def density_grad_factor(self) -> np.ndarray:
        """d density / d density_raw."""
        return _sigmoid(self.density_raw)

    def covariances(self) -> np.ndarray:
        return assemble_covariance(self.quats, self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.density_raw.copy(),
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            None if self.pg_weights is None else self.pg_weights.copy(),
        )

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.density_raw[index],
            self.means[index],
            self.quats[index],
            self.log_scales[index],
            None if self.pg_weights is None else self.pg_weights[index],
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if (self.pg_weights is None) != (other.pg_weights is None):
            raise ValueError("cannot concatenate clouds with and without per-Gaussian weights")
        return GaussianCloud(
            np.concatenate([self.density_raw, other.density_raw]),
            np.concatenate([self.means, other.means]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.log_scales, other.log_scales]),
            None if self.pg_weights is None else np.concatenate([self.pg_weights, other.pg_weights]),
        )

    def clamp_scales(self, lo: float, hi: float) -> None:
        np.clip(self.log_scales, np.log(lo), np.log(hi), out=self.log_scales)


def _normalize_quats(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("degenerate quaternion (norm < 1e-12)")
    return q / norm, norm


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for quaternions ``(w, x, y, z)``; normalizes first."""
    q, _ = _normalize_quats(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_backward(q_unit, d_rot):
    """Pull dL/dR back to dL/dq for a unit quaternion."""
    w, x, y, z = (q_unit[..., i] for i in range(4))
    g = d_rot
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def assemble_covariance(q, s) -> np.ndarray:
    """``Sigma = R(q) diag(exp(2 s)) R(q)^T`` for batched ``q`` (..., 4) and ``s`` (..., 3)."""
    rot = quat_to_rotmat(q)
    m = rot * np.exp(np.asarray(s, dtype=np.float64))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance_backward(q, s, d_cov):
    """Gradients of ``assemble_covariance`` w.r.t. the raw quaternion and log-scale.

    ``d_cov`` is dL/dSigma with every entry treated as independent (symmetric
    for symmetric losses).
    """
    q_unit, norm = _normalize_quats(q)
    rot = quat_to_rotmat(q_unit)
    scale = np.exp(np.asarray(s, dtype=np.float64))
    m = rot * scale[..., None, :]
    g = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    d_m = 2.0 * g @ m
    d_scale = np.sum(rot * d_m, axis=-2)
    d_s = d_scale * scale
    d_rot = d_m * scale[..., None, :]
    d_qu = _rotmat_backward(q_unit, d_rot)
    d_q = (d_qu - q_unit * np.sum(q_unit * d_qu, axis=-1, keepdims=True)) / norm
    return d_q, d_s


def max_sigma(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape[0] == 0:
        return np.zeros(0)
    return np.sqrt(np.maximum(np.linalg.eigvalsh(cov)[..., -1], 0.0))


def _kernel_arrays(rho, mu, cov):
    rho = np.ascontiguousarray(rho, dtype=np.float64).reshape(-1)
    mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 3)
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    if len(rho) == 0:
        return rho, mu, np.zeros((0, 3, 3)), np.zeros(0)
    prec = np.ascontiguousarray(np.linalg.inv(cov))
    radius = CUTOFF_SIGMAS * max_sigma(cov)
    return rho, mu, prec, radius


@nb.njit(cache=True, inline="always")
def _term(rho, mu, prec, dx, dy, dz):
    q = (prec[0, 0] * dx * dx + prec[1, 1] * dy * dy + prec[2, 2] * dz * dz
         + 2.0 * (prec[0, 1] * dx * dy + prec[0, 2] * dx * dz + prec[1, 2] * dy * dz))
    return rho * np.exp(-0.5 * q)


@nb.njit(cache=True)
def _field_kernel(rho, mu, prec, radius, pts, out):
    for p in range(pts.shape[0]):
        acc = 0.0
        for n in range(rho.shape[0]):
            dx = pts[p, 0] - mu[n, 0]
            dy = pts[p, 1] - mu[n, 1]
            dz = pts[p, 2] - mu[n, 2]
            r = radius[n]
            if abs(dx) <= r and abs(dy) <= r and abs(dz) <= r:
                acc += _term(rho[n], mu[n], prec[n], dx, dy, dz)
        out[p] = acc


@nb.njit(cache=True)
def _raster_kernel(rho, mu, prec, radius, origin, spacing, vol):
    nx, ny, nz = vol.shape
    for n in range(rho.shape[0]):
        r = radius[n]
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        dims = (nx, ny, nz)
        for a in range(3):
            lo[a] = max(int(np.floor((mu[n, a] - r - origin[a]) / spacing[a])) - 1, 0)
            hi[a] = min(int(np.ceil((mu[n, a] + r - origin[a]) / spacing[a])) + 1, dims[a] - 1)
        for i in range(lo[0], hi[0] + 1):
            dx = (origin[0] + i * spacing[0]) - mu[n, 0]
            if abs(dx) > r:
                continue
            for j in range(lo[1], hi[1] + 1):
                dy = (origin[1] + j * spacing[1]) - mu[n, 1]
                if abs(dy) > r:
                    continue
                for k in range(lo[2], hi[2] + 1):
                    dz = (origin[2] + k * spacing[2]) - mu[n, 2]
                    if abs(dz) > r:
                        continue
                    vol[i, j, k] += _term(rho[n], mu[n], prec[n], dx, dy, dz)


def _as_kernels(cloud_or_tuple):
    if isinstance(cloud_or_tuple, GaussianCloud):
        return cloud_or_tuple.density, cloud_or_tuple.means, cloud_or_tuple.covariances()
    if hasattr(cloud_or_tuple, "covs"):
        return cloud_or_tuple.density, cloud_or_tuple.means, cloud_or_tuple.covs
    return cloud_or_tuple


def field_value(cloud, x) -> np.ndarray:
    """Attenuation at points ``x`` (..., 3).

    ``cloud`` is a :class:`GaussianCloud`, a warped snapshot, or a
    ``(density, means, covs)`` tuple of activated values.  Every kernel is visited for every point.
    """
    rho, mu, prec, radius = _kernel_arrays(*_as_kernels(cloud))
    x = np.asarray(x, dtype=np.float64)
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    out = np.zeros(pts.shape[0])
    if len(rho):
        _field_kernel(rho, mu, prec, radius, pts, out)
    return out.reshape(x.shape[:-1])


def rasterize_to_volume(cloud, grid: GridSpec) -> np.ndarray:
    """Sample the field at voxel centers; returns an array indexed ``[ix, iy, iz]``."""
    rho, mu, prec, radius = _kernel_arrays(*_as_kernels(cloud))
    vol = np.zeros(grid.dims)
    if len(rho):
        _raster_kernel(rho, mu, prec, radius, grid.origin, grid.spacing, vol)
    return vol


def _mean_neighbor_distance(points, k=3):
    if len(points) < 2:
        return np.ones(len(points))
    k = min(k, len(points) - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return np.mean(dist[:, 1:], axis=1)


def sample_cloud_from_volume(volume, grid: GridSpec, n_points, threshold, seed,
                             scale_bounds=None) -> GaussianCloud:
    """Initialize kernels by sampling voxels of an initial reconstruction.

    Means are drawn from voxels above ``threshold`` with probability
    proportional to their value and jittered uniformly inside the voxel
    cell.  Scales start at the mean distance to the three nearest samples;
    densities start at the local voxel value times a constant chosen so the
    rasterized cloud reproduces the mean of ``volume`` over its support.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    volume = np.asarray(volume, dtype=np.float64)
    if volume.shape != grid.dims:
        raise ValueError("volume shape does not match grid")
    flat = volume.reshape(-1)
    # probabilities need positive values even when the threshold is negative
    support = np.flatnonzero(flat > max(threshold, 0.0))
    if support.size == 0:
        raise EmptySupportError("no voxel above threshold")
    rng = np.random.default_rng(seed)
    prob = flat[support] / flat[support].sum()
    pick = support[rng.choice(support.size, size=n_points, p=prob)]
    idx = np.stack(np.unravel_index(pick, grid.dims), axis=-1)
    jitter = rng.uniform(-0.5, 0.5, size=(n_points, 3))
    means = grid.origin + (idx + jitter) * grid.spacing
    scales = _mean_neighbor_distance(means)
    if scale_bounds is not None:
        scales = np.clip(scales, *scale_bounds)
    values = flat[pick]
    log_scales = np.repeat(np.log(scales)[:, None], 3, axis=1)
    cloud = GaussianCloud.from_activated(values, means, log_scales=log_scales)
    raster = rasterize_to_volume(cloud, grid).reshape(-1)
    ratio = flat[support].mean() / max(raster[support].mean(), 1e-30)
    return GaussianCloud.from_activated(values * ratio, means, log_scales=log_scales)
