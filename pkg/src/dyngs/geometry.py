"""Circular cone-beam acquisition geometry.

World convention: isocenter at the origin, gantry rotation about +z (patient
axis), source trajectory in the x-y plane.  View 0 places the source at
``(-sid, 0, 0)``.  The camera frame has its origin at the source, its z axis
along the central ray (towards the isocenter), x along the detector columns
(u) and y along the detector rows (v, parallel to world +z).

Detector pixel ``(v, u)`` has its center at integer coordinates; the
principal point sits at the detector center shifted by ``detector_offset_u``
along u only (half-fan acquisition).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EPS_DEPTH",
    "GeometryError",
    "BehindSourceError",
    "ScanGeometry",
    "ViewPose",
    "make_circular_geometry",
    "view_pose",
    "world_to_camera",
    "project_camera",
    "project_point",
    "perspective_jacobian",
    "pixel_rays",
]

#: Minimum camera-space depth (mm) for a point to count as in front of the source.
EPS_DEPTH = 1.0


class GeometryError(ValueError):
    """Invalid acquisition geometry or view index."""


class BehindSourceError(ValueError):
    """A point lies at or behind the source plane of a view."""


@dataclass(frozen=True)
class ScanGeometry:
    sid: float
    sdd: float
    n_views: int
    detector_rows: int
    detector_cols: int
    pixel_pitch: float
    detector_offset_u: float = 0.0
    angles: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (self.sid > 0 and self.sdd > self.sid):
            raise GeometryError(f"need 0 < sid < sdd, got sid={self.sid}, sdd={self.sdd}")
        if self.n_views < 1:
            raise GeometryError("n_views must be >= 1")
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise GeometryError("detector must have at least one pixel")
        if not self.pixel_pitch > 0:
            raise GeometryError("pixel_pitch must be positive")
        if self.angles is None:
            angles = 2.0 * np.pi * np.arange(self.n_views) / self.n_views
        else:
            angles = np.asarray(self.angles, dtype=np.float64)
            if angles.shape != (self.n_views,):
                raise GeometryError("angles must have one entry per view")
            if self.n_views > 1 and np.any(np.diff(angles) <= 0):
                raise GeometryError("angles must be strictly increasing")
            if angles[-1] - angles[0] >= 2.0 * np.pi:
                raise GeometryError("angles must lie within one revolution")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)

    @property
    def focal(self) -> float:
        """Source-to-detector distance in pixel units."""
        return self.sdd / self.pixel_pitch

    @property
    def principal_point(self) -> tuple[float, float]:
        """(c_u, c_v) in pixels."""
        c_u = 0.5 * (self.detector_cols - 1) + self.detector_offset_u / self.pixel_pitch
        c_v = 0.5 * (self.detector_rows - 1)
        return c_u, c_v

    @property
    def magnification(self) -> float:
        return self.sdd / self.sid

    def to_dict(self) -> dict:
        return {
            "sid": self.sid,
            "sdd": self.sdd,
            "n_views": self.n_views,
            "detector_rows": self.detector_rows,
            "detector_cols": self.detector_cols,
            "pixel_pitch": self.pixel_pitch,
            "detector_offset_u": self.detector_offset_u,
            "angles": [float(a) for a in self.angles],
            "rotation": "counter-clockwise about +z",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(
            sid=float(d["sid"]),
            sdd=float(d["sdd"]),
            n_views=int(d["n_views"]),
            detector_rows=int(d["detector_rows"]),
            detector_cols=int(d["detector_cols"]),
            pixel_pitch=float(d["pixel_pitch"]),
            detector_offset_u=float(d.get("detector_offset_u", 0.0)),
            angles=np.asarray(d["angles"], dtype=np.float64) if "angles" in d else None,
        )


@dataclass(frozen=True)
class ViewPose:
    """Rigid world-to-camera transform ``t = R x + T`` of one view."""

    rotation: np.ndarray
    translation: np.ndarray
    angle: float
    view_index: int
    time_index: int

    @property
    def source(self) -> np.ndarray:
        """Source position in world coordinates."""
        return -self.rotation.T @ self.translation


def make_circular_geometry(sid, sdd, n_views, detector_shape, pixel_pitch, offset_u=0.0):
    """Build a full-circle geometry with ``n_views`` equiangular views.

    Parameters
    ----------
    sid, sdd : float
        Source-to-isocenter and source-to-detector distances (mm).
    n_views : int
        Number of projections, spread uniformly over ``[0, 2*pi)``.
    detector_shape : tuple of int
        ``(rows, cols)`` of the flat panel.
    pixel_pitch : float
        Detector pixel size (mm).
    offset_u : float, optional
        Lateral detector shift (mm) along u.
    """
    if sid <= 0 or sdd <= 0:
        raise GeometryError("distances must be positive")
    if int(n_views) < 1:
        raise GeometryError("n_views must be >= 1")
    rows, cols = detector_shape
    return ScanGeometry(
        sid=float(sid),
        sdd=float(sdd),
        n_views=int(n_views),
        detector_rows=int(rows),
        detector_cols=int(cols),
        pixel_pitch=float(pixel_pitch),
        detector_offset_u=float(offset_u),
    )


def view_pose(geom: ScanGeometry, view_index: int, time_index: int | None = None) -> ViewPose:
    if not 0 <= view_index < geom.n_views:
        raise GeometryError(f"view index {view_index} out of range [0, {geom.n_views})")
    theta = float(geom.angles[view_index])
    c, s = np.cos(theta), np.sin(theta)
    # rows are the camera axes expressed in world coordinates
    rot = np.array([[-s, c, 0.0], [0.0, 0.0, 1.0], [c, s, 0.0]])
    src = -geom.sid * np.array([c, s, 0.0])
    trans = -rot @ src
    rot.setflags(write=False)
    trans.setflags(write=False)
    return ViewPose(
        rotation=rot,
        translation=trans,
        angle=theta,
        view_index=int(view_index),
        time_index=int(view_index if time_index is None else time_index),
    )


def world_to_camera(pose: ViewPose, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ pose.rotation.T + pose.translation


def project_camera(geom: ScanGeometry, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection of camera-space points ``t`` (..., 3)."""
    t = np.asarray(t, dtype=np.float64)
    tz = t[..., 2]
    if np.any(tz <= EPS_DEPTH):
        raise BehindSourceError("point at or behind the source")
    f = geom.focal
    c_u, c_v = geom.principal_point
    return f * t[..., 0] / tz + c_u, f * t[..., 1] / tz + c_v, tz


def project_point(pose: ViewPose, geom: ScanGeometry, x_world):
    """Project world points to detector pixel coordinates.

    Returns ``(u, v, depth)``; ``u`` indexes columns and ``v`` rows.
    """
    return project_camera(geom, world_to_camera(pose, x_world))


def perspective_jacobian(pose: ViewPose, geom: ScanGeometry, x_camera) -> np.ndarray:
    """Local Jacobian of the perspective map at camera-space points.

    Rows 0-1 are d(u, v)/dt; row 2 is the unit ray direction ``t/|t|`` so that
    the third axis of ``J W Sigma W^T J^T`` is the physical ray.
    """
    t = np.asarray(x_camera, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    if np.any(tz <= EPS_DEPTH):
        raise BehindSourceError("point at or behind the source")
    f = geom.focal
    jac = np.zeros(t.shape[:-1] + (3, 3))
    jac[..., 0, 0] = f / tz
    jac[..., 0, 2] = -f * tx / tz**2
    jac[..., 1, 1] = f / tz
    jac[..., 1, 2] = -f * ty / tz**2
    jac[..., 2, :] = t / np.linalg.norm(t, axis=-1, keepdims=True)
    return jac


def pixel_rays(pose: ViewPose, geom: ScanGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Source position and unit world-space ray directions for every pixel.

    Returns ``(source, directions)`` with ``directions`` of shape
    ``(rows, cols, 3)``.
    """
    c_u, c_v = geom.principal_point
    u = (np.arange(geom.detector_cols) - c_u) * geom.pixel_pitch
    v = (np.arange(geom.detector_rows) - c_v) * geom.pixel_pitch
    cam = np.empty((geom.detector_rows, geom.detector_cols, 3))
    cam[..., 0] = u[None, :]
    cam[..., 1] = v[:, None]
    cam[..., 2] = geom.sdd
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return pose.source.copy(), cam @ pose.rotation
