"""Additive X-ray splatting of 3D Gaussians onto a flat-panel detector.

Each kernel is mapped to a 2D Gaussian with the local affine approximation
of the cone-beam projection: the camera-space covariance is pushed through
the perspective Jacobian ``J`` whose third row is the unit ray direction, the
third row/column is dropped, and the amplitude is multiplied by the exact
ray-marginalization constant of the trivariate Gaussian.

The backward pass treats ``J`` (and the ray direction) as constant with
respect to the kernel mean.  The forward functions accept ``linearize_at``
so that finite-difference checks can hold the linearization point fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .cloud import CUTOFF_SIGMAS
from .geometry import EPS_DEPTH, ScanGeometry, ViewPose, perspective_jacobian

__all__ = [
    "LOWPASS",
    "TILE",
    "NumericDomainError",
    "Splat2D",
    "Splats",
    "RenderGrads",
    "integration_factor",
    "project_gaussians",
    "project_gaussian",
    "render",
    "render_naive",
    "render_backward",
]

#: Variance (px^2) added to the diagonal of every projected covariance.
LOWPASS = 0.3
TILE = 16
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class NumericDomainError(ValueError):
    """Input covariance is not symmetric positive definite."""


@dataclass(frozen=True)
class Splat2D:
    center: np.ndarray
    cov: np.ndarray
    amplitude: float
    bbox: tuple  # (u_min, u_max, v_min, v_max), inclusive pixel indices


@dataclass
class Splats:
    """Projected kernels of one view plus what the backward pass needs."""

    means2d: np.ndarray  # (N, 2) as (u, v)
    cov2d: np.ndarray  # (N, 2, 2) including the low-pass floor
    conic: np.ndarray  # (N, 3) entries a, b, c of the inverse [[a, b], [b, c]]
    amp: np.ndarray  # (N,)
    factor: np.ndarray  # (N,) integration factor, amp = rho * factor
    bbox: np.ndarray  # (N, 4) int64
    visible: np.ndarray  # (N,) bool
    proj_mean: np.ndarray  # (N, 2, 3) d(u, v)/dx at the mean
    proj_cov: np.ndarray  # (N, 2, 3) first two rows of J R at the linearization point
    ray_world: np.ndarray  # (N, 3) unit ray direction at the linearization point

    def __len__(self):
        return self.amp.shape[0]


@dataclass
class RenderGrads:
    density: np.ndarray  # (N,)
    means: np.ndarray  # (N, 3)
    covs: np.ndarray  # (N, 3, 3), symmetric
    means2d_norm: np.ndarray  # (N,) |dL/d mean2d| in pixels, for density control


def integration_factor(cov3) -> np.ndarray:
    """Ray-marginalization constant ``sqrt(2 pi det(S) / det(S[:2, :2]))``.

    The third axis of ``cov3`` must be the ray direction.  Batched over
    leading dimensions.
    """
    cov3 = np.asarray(cov3, dtype=np.float64)
    det3 = np.linalg.det(cov3)
    det2 = cov3[..., 0, 0] * cov3[..., 1, 1] - cov3[..., 0, 1] * cov3[..., 1, 0]
    if np.any(det3 <= 0) or np.any(det2 <= 0) or np.any(cov3[..., 0, 0] <= 0):
        raise NumericDomainError("covariance is not positive definite")
    return np.sqrt(2.0 * np.pi * det3 / det2)


def _unpack(snapshot):
    if isinstance(snapshot, tuple):
        return snapshot
    return snapshot.density, snapshot.means, snapshot.covs


def project_gaussians(pose: ViewPose, geom: ScanGeometry, means, covs, density,
                      lowpass: float = LOWPASS, linearize_at=None) -> Splats:
    """Project a batch of kernels (activated parameters, world frame)."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    density = np.asarray(density, dtype=np.float64).reshape(-1)
    n = means.shape[0]
    rot = pose.rotation
    t = means @ rot.T + pose.translation
    t_lin = t if linearize_at is None else np.asarray(linearize_at, dtype=np.float64) @ rot.T + pose.translation
    visible = (t[:, 2] > EPS_DEPTH) & (t_lin[:, 2] > EPS_DEPTH)
    # culled kernels get a harmless stand-in depth so the algebra stays finite
    safe = np.where(visible[:, None], t, [0.0, 0.0, geom.sid])
    safe_lin = np.where(visible[:, None], t_lin, [0.0, 0.0, geom.sid])

    f = geom.focal
    c_u, c_v = geom.principal_point
    means2d = np.stack([f * safe[:, 0] / safe[:, 2] + c_u, f * safe[:, 1] / safe[:, 2] + c_v], axis=-1)
    jac_mean = perspective_jacobian(pose, geom, safe)
    jac = jac_mean if linearize_at is None else perspective_jacobian(pose, geom, safe_lin)

    jr = jac @ rot  # (N, 3, 3), maps world offsets to (u, v, ray)
    cov_ray = jr @ covs @ np.swapaxes(jr, -1, -2)
    cov2d = cov_ray[:, :2, :2].copy()
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    factor = np.zeros(n)
    if n:
        factor = integration_factor(cov_ray)
    amp = density * factor

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=-1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius = CUTOFF_SIGMAS * np.sqrt(lam)

    bbox = np.empty((n, 4), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        bbox[:, 0] = np.maximum(np.ceil(means2d[:, 0] - radius), 0)
        bbox[:, 1] = np.minimum(np.floor(means2d[:, 0] + radius), geom.detector_cols - 1)
        bbox[:, 2] = np.maximum(np.ceil(means2d[:, 1] - radius), 0)
        bbox[:, 3] = np.minimum(np.floor(means2d[:, 1] + radius), geom.detector_rows - 1)
    visible &= (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])

    ray_world = jac[:, 2, :] @ rot
    return Splats(
        means2d=means2d,
        cov2d=cov2d,
        conic=np.ascontiguousarray(conic),
        amp=amp,
        factor=factor,
        bbox=bbox,
        visible=visible,
        proj_mean=(jac_mean @ rot)[:, :2, :],
        proj_cov=jr[:, :2, :],
        ray_world=ray_world,
    )


def project_gaussian(pose, geom, mu, cov, rho, lowpass: float = LOWPASS):
    """Single-kernel projection; returns a :class:`Splat2D` or ``None`` when culled."""
    sp = project_gaussians(pose, geom, np.asarray(mu)[None], np.asarray(cov)[None], np.atleast_1d(rho), lowpass)
    if not sp.visible[0]:
        return None
    return Splat2D(sp.means2d[0].copy(), sp.cov2d[0].copy(), float(sp.amp[0]), tuple(int(b) for b in sp.bbox[0]))


@nb.njit(cache=True, inline="always")
def _splat_term(amp, mx, my, ca, cb, cc, u, v):
    dx = u - mx
    dy = v - my
    return amp * np.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))


@nb.njit(cache=True)
def _bin_tiles(bbox, visible, n_tx, n_ty, tile):
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, np.int64)
    for n in range(bbox.shape[0]):
        if not visible[n]:
            continue
        for ty in range(bbox[n, 2] // tile, bbox[n, 3] // tile + 1):
            for tx in range(bbox[n, 0] // tile, bbox[n, 1] // tile + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for n in range(bbox.shape[0]):
        if not visible[n]:
            continue
        for ty in range(bbox[n, 2] // tile, bbox[n, 3] // tile + 1):
            for tx in range(bbox[n, 0] // tile, bbox[n, 1] // tile + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = n
                fill[t] += 1
    return offsets, ids


@nb.njit(cache=True, parallel=True)
def _render_tiles(means2d, conic, amp, bbox, offsets, ids, rows, cols, tile, n_tx, img):
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        v_lo = ty * tile
        v_hi = min(rows, v_lo + tile) - 1
        u_lo = tx * tile
        u_hi = min(cols, u_lo + tile) - 1
        buf = np.zeros((tile, tile))
        # splats in index order, so every pixel sums in the same order as the naive loop
        for k in range(offsets[t], offsets[t + 1]):
            n = ids[k]
            mx = means2d[n, 0]
            my = means2d[n, 1]
            ca = conic[n, 0]
            cb = conic[n, 1]
            cc = conic[n, 2]
            for v in range(max(v_lo, bbox[n, 2]), min(v_hi, bbox[n, 3]) + 1):
                for u in range(max(u_lo, bbox[n, 0]), min(u_hi, bbox[n, 1]) + 1):
                    buf[v - v_lo, u - u_lo] += _splat_term(amp[n], mx, my, ca, cb, cc, u, v)
        for v in range(v_lo, v_hi + 1):
            for u in range(u_lo, u_hi + 1):
                img[v, u] = buf[v - v_lo, u - u_lo]


@nb.njit(cache=True)
def _render_naive_kernel(means2d, conic, amp, bbox, visible, img):
    rows, cols = img.shape
    for v in range(rows):
        for u in range(cols):
            acc = 0.0
            for n in range(amp.shape[0]):
                if not visible[n]:
                    continue
                if u < bbox[n, 0] or u > bbox[n, 1] or v < bbox[n, 2] or v > bbox[n, 3]:
                    continue
                acc += _splat_term(amp[n], means2d[n, 0], means2d[n, 1],
                                   conic[n, 0], conic[n, 1], conic[n, 2], u, v)
            img[v, u] = acc


@nb.njit(cache=True, parallel=True)
def _backward_kernel(means2d, conic, amp, bbox, visible, d_img, d_amp, d_mean2d, d_conic):
    for n in nb.prange(amp.shape[0]):
        if not visible[n]:
            continue
        mx = means2d[n, 0]
        my = means2d[n, 1]
        ca = conic[n, 0]
        cb = conic[n, 1]
        cc = conic[n, 2]
        ga = 0.0
        gx = 0.0
        gy = 0.0
        g_a = 0.0
        g_b = 0.0
        g_c = 0.0
        for v in range(bbox[n, 2], bbox[n, 3] + 1):
            for u in range(bbox[n, 0], bbox[n, 1] + 1):
                g = d_img[v, u]
                if g == 0.0:
                    continue
                dx = u - mx
                dy = v - my
                w = np.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
                ga += g * w
                s = g * amp[n] * w
                gx += s * (ca * dx + cb * dy)
                gy += s * (cb * dx + cc * dy)
                g_a += -0.5 * s * dx * dx
                g_b += -s * dx * dy
                g_c += -0.5 * s * dy * dy
        d_amp[n] = ga
        d_mean2d[n, 0] = gx
        d_mean2d[n, 1] = gy
        d_conic[n, 0] = g_a
        d_conic[n, 1] = g_b
        d_conic[n, 2] = g_c


def render(snapshot, pose: ViewPose, geom: ScanGeometry, lowpass: float = LOWPASS,
           linearize_at=None, return_splats: bool = False):
    """Line-integral image (rows, cols) of a time-resolved kernel set.

    ``snapshot`` is anything with ``density``, ``means`` and ``covs``
    attributes, or a ``(density, means, covs)`` tuple.  Accumulation is in
    float64; pixel sums run over kernels in index order.
    """
    density, means, covs = _unpack(snapshot)
    splats = project_gaussians(pose, geom, means, covs, density, lowpass, linearize_at)
    rows, cols = geom.detector_rows, geom.detector_cols
    img = np.zeros((rows, cols))
    n_tx = -(-cols // TILE)
    n_ty = -(-rows // TILE)
    if len(splats):
        offsets, ids = _bin_tiles(splats.bbox, splats.visible, n_tx, n_ty, TILE)
        _render_tiles(splats.means2d, splats.conic, splats.amp, splats.bbox, offsets, ids,
                      rows, cols, TILE, n_tx, img)
    return (img, splats) if return_splats else img


def render_naive(snapshot, pose, geom, lowpass: float = LOWPASS) -> np.ndarray:
    """Untiled per-pixel-per-kernel reference for :func:`render`."""
    density, means, covs = _unpack(snapshot)
    splats = project_gaussians(pose, geom, means, covs, density, lowpass)
    img = np.zeros((geom.detector_rows, geom.detector_cols))
    if len(splats):
        _render_naive_kernel(splats.means2d, splats.conic, splats.amp, splats.bbox, splats.visible, img)
    return img


def render_backward(snapshot, pose, geom, d_image, splats: Splats | None = None,
                    lowpass: float = LOWPASS, linearize_at=None) -> RenderGrads:
    """Gradients of ``sum(d_image * render(snapshot))`` w.r.t. density, means and covariances."""
    density, means, covs = _unpack(snapshot)
    density = np.asarray(density, dtype=np.float64).reshape(-1)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    if splats is None:
        splats = project_gaussians(pose, geom, means, covs, density, lowpass, linearize_at)
    n = len(splats)
    d_amp = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    if n:
        _backward_kernel(splats.means2d, splats.conic, splats.amp, splats.bbox, splats.visible,
                         np.ascontiguousarray(d_image, dtype=np.float64), d_amp, d_mean2d, d_conic)
    vis = splats.visible

    d_density = np.where(vis, d_amp * splats.factor, 0.0)
    d_means = np.einsum("nij,ni->nj", splats.proj_mean, d_mean2d)

    # conic entries -> symmetric conic matrix -> projected covariance
    a, b, c = splats.conic[:, 0], splats.conic[:, 1], splats.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    d_conic_m = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                          np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    d_cov2d = -conic_m @ d_conic_m @ conic_m
    m = splats.proj_cov
    d_covs = np.swapaxes(m, -1, -2) @ d_cov2d @ m

    # amplitude factor sqrt(2 pi / (r^T Sigma^-1 r))
    d_factor = d_amp * density
    if n:
        z = np.linalg.solve(covs, splats.ray_world[..., None])[..., 0]
        quad = np.einsum("ni,ni->n", splats.ray_world, z)
        coef = np.where(vis, 0.5 * _SQRT_2PI * quad**-1.5 * d_factor, 0.0)
        d_covs = d_covs + coef[:, None, None] * z[:, :, None] * z[:, None, :]
    d_covs = np.where(vis[:, None, None], 0.5 * (d_covs + np.swapaxes(d_covs, -1, -2)), 0.0)
    d_means = np.where(vis[:, None], d_means, 0.0)
    return RenderGrads(d_density, d_means, d_covs, np.linalg.norm(d_mean2d, axis=-1))
