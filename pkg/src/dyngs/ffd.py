"""Low-rank cubic B-spline motion model.

``D(x, t) = x + sum_r w_r(t) u_r(x)`` where every spatial basis ``u_r`` is
interpolated from a uniform control lattice with tensor-product cubic
B-splines, and every temporal weight ``w_r`` is a 1D cubic B-spline over
the acquisition time index.

A lattice carries ``n_channels`` values per control point and rank: the
first three are displacements (mm); decoupled-attribute motion adds three
log-scale and four quaternion channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

__all__ = [
    "SpatialLattice",
    "TemporalSpline",
    "FFDMotionModel",
    "MotionGrads",
    "bspline_weights",
    "bspline_dweights",
    "lattice_for_fov",
    "lattice_eval",
    "lattice_backward",
    "spatial_basis",
    "spatial_basis_gradient",
    "temporal_weights",
    "displacement",
    "jacobian",
    "motion_backward",
]

POSITION = slice(0, 3)
LOG_SCALE = slice(3, 6)
QUAT = slice(6, 10)


def _check_unit(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0.0) or np.any(u >= 1.0):
        raise ValueError("B-spline local coordinate must lie in [0, 1)")
    return u


def bspline_weights(u):
    """Uniform cubic B-spline weights ``(B0, B1, B2, B3)`` at local coordinate ``u``."""
    u = _check_unit(u)
    return np.stack(_weights(u), axis=-1)


def bspline_dweights(u):
    """First derivatives of :func:`bspline_weights` with respect to ``u``."""
    u = _check_unit(u)
    return np.stack(_dweights(u), axis=-1)


def _weights(u):
    v = 1.0 - u
    u2 = u * u
    u3 = u2 * u
    return (v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0)


def _dweights(u):
    v = 1.0 - u
    u2 = u * u
    return (-0.5 * v * v, 1.5 * u2 - 2.0 * u, -1.5 * u2 + u + 0.5, 0.5 * u2)


@dataclass
class SpatialLattice:
    """Control lattice; ``origin`` is the world position of control point (0, 0, 0)."""

    coeffs: np.ndarray  # (R, Nx, Ny, Nz, C)
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 5:
            raise ValueError("coeffs must have shape (R, Nx, Ny, Nz, C)")
        if min(self.coeffs.shape[1:4]) < 4:
            raise ValueError("lattice needs at least 4 control points per axis")
        if self.coeffs.shape[4] not in (3, 10):
            raise ValueError("lattice carries 3 (position) or 10 (decoupled) channels")
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise ValueError("lattice spacing must be positive")

    @classmethod
    def zeros(cls, dims, spacing, origin, n_ranks, n_channels=3) -> "SpatialLattice":
        return cls(np.zeros((n_ranks,) + tuple(dims) + (n_channels,)), spacing, origin)

    @property
    def dims(self) -> tuple:
        return tuple(self.coeffs.shape[1:4])

    @property
    def n_ranks(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[4]

    def control_points(self) -> np.ndarray:
        """World positions of the control points, shape ``(Nx, Ny, Nz, 3)``."""
        ax = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def interior_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World box in which every query has a full 4x4x4 stencil."""
        lo = self.origin + self.spacing
        hi = self.origin + (np.asarray(self.dims) - 2) * self.spacing
        return lo, hi

    def copy(self) -> "SpatialLattice":
        return SpatialLattice(self.coeffs.copy(), self.spacing.copy(), self.origin.copy())


def lattice_for_fov(fov_min, fov_max, spacing, n_ranks, n_channels=3) -> SpatialLattice:
    """Zero lattice whose valid interior strictly contains the box ``[fov_min, fov_max]``."""
    fov_min = np.asarray(fov_min, dtype=np.float64)
    fov_max = np.asarray(fov_max, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    extent = fov_max - fov_min
    n_cells = np.floor(extent / spacing).astype(int) + 1
    dims = n_cells + 3
    center = 0.5 * (fov_min + fov_max)
    origin = center - 0.5 * (dims - 1) * spacing
    return SpatialLattice.zeros(tuple(int(d) for d in dims), spacing, origin, n_ranks, n_channels)


@dataclass
class TemporalSpline:
    """Per-rank 1D cubic B-spline over time indices ``0 .. n_t - 1``.

    Control ``k`` sits at time ``(k - 1) * spacing``, so one padding control
    precedes ``t = 0`` and the last cell ends beyond ``n_t - 1``.
    """

    controls: np.ndarray  # (R, M)
    n_t: int
    spacing: float = 4.0

    def __post_init__(self):
        self.controls = np.ascontiguousarray(self.controls, dtype=np.float64)
        self.n_t = int(self.n_t)
        self.spacing = float(self.spacing)
        if self.controls.ndim != 2 or self.controls.shape[1] < 4:
            raise ValueError("temporal controls must have shape (R, M) with M >= 4")
        if self.n_t < 1 or self.spacing <= 0:
            raise ValueError("invalid temporal grid")
        if self.controls.shape[1] < self.n_controls_for(self.n_t, self.spacing):
            raise ValueError("temporal control grid does not cover all time indices")

    @staticmethod
    def n_controls_for(n_t, spacing) -> int:
        return int(np.floor((n_t - 1) / spacing)) + 4

    @classmethod
    def zeros(cls, n_ranks, n_t, spacing=4.0) -> "TemporalSpline":
        return cls(np.zeros((n_ranks, cls.n_controls_for(n_t, spacing))), n_t, spacing)

    @property
    def n_ranks(self) -> int:
        return self.controls.shape[0]

    def stencil(self, t) -> tuple[int, np.ndarray]:
        """First control index and the four basis weights at time ``t``."""
        t = float(t)
        if t < 0.0 or t > self.n_t - 1:
            raise ValueError(f"time {t} outside [0, {self.n_t - 1}]")
        q = t / self.spacing + 1.0
        cell = min(int(np.floor(q)), self.controls.shape[1] - 3)
        return cell - 1, np.array(_weights(q - cell))

    def copy(self) -> "TemporalSpline":
        return TemporalSpline(self.controls.copy(), self.n_t, self.spacing)


@dataclass
class FFDMotionModel:
    lattice: SpatialLattice
    temporal: TemporalSpline

    def __post_init__(self):
        if self.lattice.n_ranks != self.temporal.n_ranks:
            raise ValueError("lattice and temporal spline disagree on the rank count")

    @property
    def n_ranks(self) -> int:
        return self.lattice.n_ranks

    def copy(self) -> "FFDMotionModel":
        return FFDMotionModel(self.lattice.copy(), self.temporal.copy())


@nb.njit(cache=True)
def _axis_stencil(p, n_ctrl):
    # clamp into the valid interior [1, n_ctrl - 2]
    clamped = False
    if p < 1.0:
        p = 1.0
        clamped = True
    elif p > n_ctrl - 2.0:
        p = n_ctrl - 2.0
        clamped = True
    cell = min(int(np.floor(p)), n_ctrl - 3)
    return cell, p - cell, clamped


@nb.njit(cache=True)
def _point_tables(pt, origin, spacing, shape, order, base, tab, work):
    """Fill ``tab`` (64, 10) with the tensor-product basis and its derivatives.

    Columns: value, d/dx, d/dy, d/dz, xx, yy, zz, xy, xz, yz.  ``work`` is
    scratch of shape (3, 3, 4).
    """
    w = work[0]
    dw = work[1]
    d2w = work[2]
    flag = False
    for a in range(3):
        cell, u, cl = _axis_stencil((pt[a] - origin[a]) / spacing[a], shape[1 + a])
        flag = flag or cl
        base[a] = cell - 1
        v = 1.0 - u
        w[a, 0] = v * v * v / 6.0
        w[a, 1] = (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0
        w[a, 2] = (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0
        w[a, 3] = u * u * u / 6.0
        h = 0.0 if cl else 1.0 / spacing[a]
        dw[a, 0] = -0.5 * v * v * h
        dw[a, 1] = (1.5 * u * u - 2.0 * u) * h
        dw[a, 2] = (-1.5 * u * u + u + 0.5) * h
        dw[a, 3] = 0.5 * u * u * h
        d2w[a, 0] = v * h * h
        d2w[a, 1] = (3.0 * u - 2.0) * h * h
        d2w[a, 2] = (-3.0 * u + 1.0) * h * h
        d2w[a, 3] = u * h * h
    q = 0
    for l in range(4):
        for m in range(4):
            for n in range(4):
                tab[q, 0] = w[0, l] * w[1, m] * w[2, n]
                if order >= 1:
                    tab[q, 1] = dw[0, l] * w[1, m] * w[2, n]
                    tab[q, 2] = w[0, l] * dw[1, m] * w[2, n]
                    tab[q, 3] = w[0, l] * w[1, m] * dw[2, n]
                if order >= 2:
                    tab[q, 4] = d2w[0, l] * w[1, m] * w[2, n]
                    tab[q, 5] = w[0, l] * d2w[1, m] * w[2, n]
                    tab[q, 6] = w[0, l] * w[1, m] * d2w[2, n]
                    tab[q, 7] = dw[0, l] * dw[1, m] * w[2, n]
                    tab[q, 8] = dw[0, l] * w[1, m] * dw[2, n]
                    tab[q, 9] = w[0, l] * dw[1, m] * dw[2, n]
                q += 1
    return flag


@nb.njit(cache=True)
def _lattice_eval_kernel(coeffs, origin, spacing, pts, order, vals, grads, hess, flags):
    n_r = coeffs.shape[0]
    n_c = coeffs.shape[4]
    shape = np.array(coeffs.shape)
    tab = np.zeros((64, 10))
    work = np.empty((3, 3, 4))
    acc = np.empty((n_r, n_c, 10))
    base = np.empty(3, np.int64)
    for p_i in range(pts.shape[0]):
        flags[p_i] = _point_tables(pts[p_i], origin, spacing, shape, order, base, tab, work)
        acc[:] = 0.0
        q = 0
        for l in range(4):
            i = base[0] + l
            for m in range(4):
                j = base[1] + m
                for n in range(4):
                    k = base[2] + n
                    if order == 0:
                        t0 = tab[q, 0]
                        for r in range(n_r):
                            for c in range(n_c):
                                acc[r, c, 0] += t0 * coeffs[r, i, j, k, c]
                    elif order == 1:
                        t0 = tab[q, 0]
                        t1 = tab[q, 1]
                        t2 = tab[q, 2]
                        t3 = tab[q, 3]
                        for r in range(n_r):
                            for c in range(n_c):
                                d = coeffs[r, i, j, k, c]
                                acc[r, c, 0] += t0 * d
                                acc[r, c, 1] += t1 * d
                                acc[r, c, 2] += t2 * d
                                acc[r, c, 3] += t3 * d
                    else:
                        for r in range(n_r):
                            for c in range(n_c):
                                d = coeffs[r, i, j, k, c]
                                for e in range(10):
                                    acc[r, c, e] += tab[q, e] * d
                    q += 1
        for r in range(n_r):
            for c in range(n_c):
                vals[p_i, r, c] = acc[r, c, 0]
                if order >= 1:
                    for e in range(3):
                        grads[p_i, r, c, e] = acc[r, c, 1 + e]
                if order >= 2:
                    hess[p_i, r, c, 0, 0] = acc[r, c, 4]
                    hess[p_i, r, c, 1, 1] = acc[r, c, 5]
                    hess[p_i, r, c, 2, 2] = acc[r, c, 6]
                    hess[p_i, r, c, 0, 1] = hess[p_i, r, c, 1, 0] = acc[r, c, 7]
                    hess[p_i, r, c, 0, 2] = hess[p_i, r, c, 2, 0] = acc[r, c, 8]
                    hess[p_i, r, c, 1, 2] = hess[p_i, r, c, 2, 1] = acc[r, c, 9]


@nb.njit(cache=True)
def _lattice_scatter_kernel(shape, origin, spacing, pts, d_vals, d_grads, out):
    n_r = out.shape[0]
    n_c = out.shape[4]
    tab = np.zeros((64, 10))
    work = np.empty((3, 3, 4))
    base = np.empty(3, np.int64)
    rhs = np.empty((n_r, n_c, 4))
    for p_i in range(pts.shape[0]):
        _point_tables(pts[p_i], origin, spacing, shape, 1, base, tab, work)
        for r in range(n_r):
            for c in range(n_c):
                rhs[r, c, 0] = d_vals[p_i, r, c]
                for e in range(3):
                    rhs[r, c, 1 + e] = d_grads[p_i, r, c, e]
        q = 0
        for l in range(4):
            for m in range(4):
                for n in range(4):
                    t0 = tab[q, 0]
                    t1 = tab[q, 1]
                    t2 = tab[q, 2]
                    t3 = tab[q, 3]
                    i = base[0] + l
                    j = base[1] + m
                    k = base[2] + n
                    for r in range(n_r):
                        for c in range(n_c):
                            out[r, i, j, k, c] += (t0 * rhs[r, c, 0] + t1 * rhs[r, c, 1]
                                                   + t2 * rhs[r, c, 2] + t3 * rhs[r, c, 3])
                    q += 1


def lattice_eval(lattice: SpatialLattice, x, order: int = 1):
    """Interpolate every rank and channel at points ``x`` (N, 3).

    Returns ``(vals, grads, hess, clamped)`` with shapes (N, R, C),
    (N, R, C, 3), (N, R, C, 3, 3) and (N,); ``grads``/``hess`` are ``None``
    when ``order`` is below 1/2.  Points outside the valid interior are
    clamped to it (derivatives along clamped axes vanish) and flagged.
    """
    pts = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    n = pts.shape[0]
    r, c = lattice.n_ranks, lattice.n_channels
    vals = np.zeros((n, r, c))
    grads = np.zeros((n, r, c, 3) if order >= 1 else (1, 1, 1, 3))
    hess = np.zeros((n, r, c, 3, 3) if order >= 2 else (1, 1, 1, 3, 3))
    flags = np.zeros(n, dtype=np.bool_)
    _lattice_eval_kernel(lattice.coeffs, lattice.origin, lattice.spacing, pts, order, vals, grads, hess, flags)
    return vals, grads if order >= 1 else None, hess if order >= 2 else None, flags


def lattice_backward(lattice: SpatialLattice, x, d_vals, d_grads=None) -> np.ndarray:
    """Adjoint of :func:`lattice_eval`: scatter value/gradient cotangents onto the controls."""
    pts = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    d_vals = np.ascontiguousarray(d_vals, dtype=np.float64)
    if d_grads is None:
        d_grads = np.zeros(d_vals.shape + (3,))
    out = np.zeros_like(lattice.coeffs)
    _lattice_scatter_kernel(np.array(lattice.coeffs.shape), lattice.origin, lattice.spacing, pts,
                            d_vals, np.ascontiguousarray(d_grads, dtype=np.float64), out)
    return out


def spatial_basis(lattice: SpatialLattice, x):
    """Displacement bases ``u_r(x)``, shape (N, R, 3), and the clamp flags."""
    vals, _, _, flags = lattice_eval(lattice, x, order=0)
    return vals[..., POSITION], flags


def spatial_basis_gradient(lattice: SpatialLattice, x):
    """``grad u_r(x)`` as (N, R, 3, 3) with entry ``[c, a] = d u_c / d x_a``."""
    _, grads, _, flags = lattice_eval(lattice, x, order=1)
    return grads[..., POSITION, :], flags


def temporal_weights(model, t):
    """Temporal weights ``w_r(t)`` (R,) and their sensitivity to the controls.

    The sensitivity is returned as ``(first_index, basis)``: ``w_r`` depends
    on controls ``first_index .. first_index + 3`` with coefficients
    ``basis``, identically for every rank.
    """
    temporal = model.temporal if isinstance(model, FFDMotionModel) else model
    first, basis = temporal.stencil(t)
    omega = temporal.controls[:, first:first + 4] @ basis
    return omega, (first, basis)


def displacement(model: FFDMotionModel, x, t) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    omega, _ = temporal_weights(model, t)
    u, _ = spatial_basis(model.lattice, x.reshape(-1, 3))
    return (x.reshape(-1, 3) + np.einsum("r,nrc->nc", omega, u)).reshape(x.shape)


def jacobian(model: FFDMotionModel, x, t) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    omega, _ = temporal_weights(model, t)
    g, _ = spatial_basis_gradient(model.lattice, x.reshape(-1, 3))
    k = np.eye(3) + np.einsum("r,nrca->nca", omega, g)
    return k.reshape(x.shape[:-1] + (3, 3))


@dataclass
class MotionGrads:
    lattice: np.ndarray  # same shape as lattice.coeffs
    temporal: np.ndarray  # same shape as temporal.controls
    x: np.ndarray  # (N, 3)


def motion_backward(model: FFDMotionModel, x, t, d_disp, d_jac=None, evaluated=None) -> MotionGrads:
    """Adjoint of :func:`displacement` and :func:`jacobian` at points ``x``.

    ``d_disp`` (N, 3) and ``d_jac`` (N, 3, 3) are the upstream gradients.
    ``evaluated`` may carry an order-2 :func:`lattice_eval` result at ``x``
    to skip re-interpolation.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    d_disp = np.asarray(d_disp, dtype=np.float64).reshape(n, 3)
    d_jac = np.zeros((n, 3, 3)) if d_jac is None else np.asarray(d_jac, dtype=np.float64).reshape(n, 3, 3)
    omega, (first, basis) = temporal_weights(model, t)
    lat = model.lattice
    if evaluated is None:
        evaluated = lattice_eval(lat, x, order=2)
    vals, grads, hess, _ = evaluated
    c = lat.n_channels
    d_vals = np.zeros((n, lat.n_ranks, c))
    d_grads = np.zeros((n, lat.n_ranks, c, 3))
    d_vals[..., POSITION] = omega[None, :, None] * d_disp[:, None, :]
    d_grads[..., POSITION, :] = omega[None, :, None, None] * d_jac[:, None, :, :]
    d_lattice = lattice_backward(lat, x, d_vals, d_grads)

    d_omega = (np.einsum("nrc,nc->r", vals[..., POSITION], d_disp)
               + np.einsum("nrca,nca->r", grads[..., POSITION, :], d_jac))
    d_temporal = np.zeros_like(model.temporal.controls)
    d_temporal[:, first:first + 4] += d_omega[:, None] * basis[None, :]

    k = np.eye(3) + np.einsum("r,nrca->nca", omega, grads[..., POSITION, :])
    d_x = np.einsum("nca,nc->na", k, d_disp)
    d_x += np.einsum("r,nrcab,nca->nb", omega, hess[..., POSITION, :, :], d_jac)
    return MotionGrads(d_lattice, d_temporal, d_x)
