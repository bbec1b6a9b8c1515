"""Transport of the reference kernels to a time index.

Three motion modes are supported:

* ``DI``: means follow the DVF and covariances the congruence ``K S K^T``
  with ``K`` the DVF's spatial Jacobian at the reference mean;
* ``DECOUPLED_FFD``: the lattice carries separate position, log-scale and
  quaternion channels, each interpolated at the reference mean;
* ``PER_GAUSSIAN``: the same per-attribute change, but with the basis
  coefficients stored on every kernel instead of a lattice.

Density never changes with time.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, assemble_covariance, covariance_backward
from .ffd import (
    LOG_SCALE,
    POSITION,
    QUAT,
    FFDMotionModel,
    TemporalSpline,
    lattice_backward,
    lattice_eval,
    motion_backward,
    temporal_weights,
)

__all__ = [
    "FOLD_FLOOR",
    "MotionMode",
    "CloudSnapshot",
    "CloudGrads",
    "WarpGrads",
    "StaleCacheError",
    "warp_means_covs",
    "warp_di",
    "warp_decoupled",
    "warp_per_gaussian",
    "warp",
    "warp_backward",
]

#: Singular-value floor applied to a folded deformation Jacobian.
FOLD_FLOOR = 0.05
_FOLD_DET = FOLD_FLOOR**3


class MotionMode(str, enum.Enum):
    DI = "di"
    DECOUPLED_FFD = "decoupled"
    PER_GAUSSIAN = "pergaussian"


class StaleCacheError(RuntimeError):
    """The snapshot was produced from different reference parameters."""


@dataclass
class CloudSnapshot:
    density: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    t: float
    mode: MotionMode
    folds: int = 0
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.density.shape[0]


@dataclass
class CloudGrads:
    density_raw: np.ndarray
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    pg_weights: np.ndarray | None = None


@dataclass
class WarpGrads:
    cloud: CloudGrads
    lattice: np.ndarray | None
    temporal: np.ndarray | None


def _floor_folds(k):
    det = np.linalg.det(k)
    folded = det <= _FOLD_DET
    if np.any(folded):
        u, s, vt = np.linalg.svd(k[folded])
        k = k.copy()
        k[folded] = (u * np.maximum(s, FOLD_FLOOR)[:, None, :]) @ vt
    return k, int(folded.sum())


def warp_means_covs(model: FFDMotionModel, mu0, cov0, t, evaluated=None):
    """DI transport of explicit means and covariances.

    Returns ``(mu_t, cov_t, K, folds)`` where ``K`` is the (possibly
    floored) Jacobian used in the congruence.
    """
    mu0 = np.asarray(mu0, dtype=np.float64).reshape(-1, 3)
    cov0 = np.asarray(cov0, dtype=np.float64).reshape(-1, 3, 3)
    omega, _ = temporal_weights(model, t)
    if evaluated is None:
        evaluated = lattice_eval(model.lattice, mu0, order=1)
    vals, grads = evaluated[0], evaluated[1]
    mu_t = mu0 + np.einsum("r,nrc->nc", omega, vals[..., POSITION])
    k = np.eye(3) + np.einsum("r,nrca->nca", omega, grads[..., POSITION, :])
    k, folds = _floor_folds(k)
    cov_t = k @ cov0 @ np.swapaxes(k, -1, -2)
    cov_t = 0.5 * (cov_t + np.swapaxes(cov_t, -1, -2))
    return mu_t, cov_t, k, folds


def warp_di(cloud: GaussianCloud, model: FFDMotionModel, t, for_backward=False) -> CloudSnapshot:
    """DI warp; ``for_backward`` keeps second derivatives for :func:`warp_backward`."""
    cov0 = cloud.covariances()
    evaluated = lattice_eval(model.lattice, cloud.means, order=2 if for_backward else 1)
    mu_t, cov_t, k, folds = warp_means_covs(model, cloud.means, cov0, t, evaluated)
    cache = {"mu0": cloud.means.copy(), "cov0": cov0, "K": k}
    if for_backward:
        cache["evaluated"] = evaluated
    return CloudSnapshot(cloud.density, mu_t, cov_t, float(t), MotionMode.DI, folds, cache=cache)


def _attribute_warp(cloud, coeffs, omega, t, mode, extra):
    """Shared forward of the decoupled and per-Gaussian modes."""
    delta = np.einsum("r,nrc->nc", omega, coeffs)
    mu_t = cloud.means + delta[:, POSITION]
    s_t = cloud.log_scales + delta[:, LOG_SCALE]
    q_t = cloud.quats + delta[:, QUAT]
    cov_t = assemble_covariance(q_t, s_t)
    cache = {"mu0": cloud.means.copy(), "coeffs": coeffs, "omega": omega, "s_t": s_t, "q_t": q_t}
    cache.update(extra)
    return CloudSnapshot(cloud.density, mu_t, cov_t, float(t), mode, 0, cache=cache)


def warp_decoupled(cloud: GaussianCloud, model: FFDMotionModel, t) -> CloudSnapshot:
    if model.lattice.n_channels != 10:
        raise ValueError("decoupled motion needs a lattice with 10 channels")
    omega, _ = temporal_weights(model, t)
    vals, grads, _, _ = lattice_eval(model.lattice, cloud.means, order=1)
    return _attribute_warp(cloud, vals, omega, t, MotionMode.DECOUPLED_FFD, {"grads": grads})


def warp_per_gaussian(cloud: GaussianCloud, temporal: TemporalSpline, t) -> CloudSnapshot:
    if cloud.pg_weights is None:
        raise ValueError("per-Gaussian motion needs pg_weights on the cloud")
    if cloud.pg_weights.shape[1] != temporal.n_ranks:
        raise ValueError("pg_weights rank does not match the temporal spline")
    omega, _ = temporal_weights(temporal, t)
    return _attribute_warp(cloud, cloud.pg_weights, omega, t, MotionMode.PER_GAUSSIAN, {})


def warp(cloud: GaussianCloud, model: FFDMotionModel, t, mode=MotionMode.DI,
         for_backward=False) -> CloudSnapshot:
    mode = MotionMode(mode)
    if mode is MotionMode.DI:
        return warp_di(cloud, model, t, for_backward)
    if mode is MotionMode.DECOUPLED_FFD:
        return warp_decoupled(cloud, model, t)
    return warp_per_gaussian(cloud, model.temporal, t)


def warp_backward(snapshot: CloudSnapshot, cloud: GaussianCloud, model: FFDMotionModel,
                  d_means, d_covs, d_density=None) -> WarpGrads:
    """Adjoint of :func:`warp` for the snapshot's mode.

    ``d_means``, ``d_covs`` and ``d_density`` are gradients w.r.t. the
    snapshot's means, covariances and (activated) densities.  A floored
    Jacobian is differentiated as if it were the raw one.
    """
    mu0 = snapshot.cache.get("mu0")
    if mu0 is None or mu0.shape != cloud.means.shape or not np.array_equal(mu0, cloud.means):
        raise StaleCacheError("snapshot does not match the reference cloud")
    n = len(cloud)
    d_means = np.asarray(d_means, dtype=np.float64).reshape(n, 3)
    d_covs = np.asarray(d_covs, dtype=np.float64).reshape(n, 3, 3)
    d_covs = 0.5 * (d_covs + np.swapaxes(d_covs, -1, -2))
    d_raw = np.zeros(n) if d_density is None else np.asarray(d_density) * cloud.density_grad_factor
    first, basis = model.temporal.stencil(snapshot.t)
    d_temporal = np.zeros_like(model.temporal.controls)

    if snapshot.mode is MotionMode.DI:
        k = snapshot.cache["K"]
        d_k = 2.0 * d_covs @ k @ snapshot.cache["cov0"]
        d_cov0 = np.swapaxes(k, -1, -2) @ d_covs @ k
        mg = motion_backward(model, cloud.means, snapshot.t, d_means, d_k, snapshot.cache.get("evaluated"))
        d_q, d_s = covariance_backward(cloud.quats, cloud.log_scales, d_cov0)
        return WarpGrads(CloudGrads(d_raw, mg.x, d_q, d_s), mg.lattice, mg.temporal)

    coeffs = snapshot.cache["coeffs"]
    omega = snapshot.cache["omega"]
    d_q, d_s = covariance_backward(snapshot.cache["q_t"], snapshot.cache["s_t"], d_covs)
    d_chan = np.concatenate([d_means, d_s, d_q], axis=1)  # (N, 10)
    d_omega = np.einsum("nrc,nc->r", coeffs, d_chan)
    d_temporal[:, first:first + 4] += d_omega[:, None] * basis[None, :]
    d_coeffs = omega[None, :, None] * d_chan[:, None, :]

    if snapshot.mode is MotionMode.PER_GAUSSIAN:
        grads = CloudGrads(d_raw, d_means.copy(), d_q, d_s, pg_weights=d_coeffs)
        return WarpGrads(grads, None, d_temporal)

    d_mu0 = d_means + np.einsum("r,nrcb,nc->nb", omega, snapshot.cache["grads"], d_chan)
    d_lattice = lattice_backward(model.lattice, cloud.means, d_coeffs)
    return WarpGrads(CloudGrads(d_raw, d_mu0, d_q, d_s), d_lattice, d_temporal)
