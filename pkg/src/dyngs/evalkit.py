"""Image and motion accuracy metrics inside the reconstruction field of view."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cloud import GaussianCloud, GridSpec, rasterize_to_volume
from .ffd import FFDMotionModel, displacement, jacobian
from .geometry import ScanGeometry
from .phantom import TruthBundle
from .warp import MotionMode, warp

__all__ = [
    "FovMask",
    "fov_radius",
    "fov_mask",
    "rmse",
    "psnr",
    "dvf_error",
    "invert_displacement",
    "relative_dvf_error",
    "default_time_samples",
    "evaluate_run",
    "format_report",
]

PEAK_CONVENTION = "max of ground truth inside the FOV mask, per time point"


@dataclass
class FovMask:
    mask: np.ndarray
    radius: float
    axis: str = "z"


def fov_radius(geom: ScanGeometry) -> float:
    """Radius (mm) of the cylinder seen by every view, by similar triangles."""
    half_width = 0.5 * geom.detector_cols * geom.pixel_pitch + abs(geom.detector_offset_u)
    return half_width * geom.sid / geom.sdd


def fov_mask(geom: ScanGeometry, grid: GridSpec) -> FovMask:
    radius = fov_radius(geom)
    if not radius > 0:
        raise ValueError("degenerate geometry: zero field of view")
    x, y, _ = grid.axes()
    r2 = x[:, None] ** 2 + y[None, :] ** 2
    inside = np.broadcast_to((r2 <= radius**2)[:, :, None], grid.dims).copy()
    if not inside.any():
        raise ValueError("field-of-view mask is empty on this grid")
    return FovMask(inside, radius)


def _mask_array(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.mask if isinstance(mask, FovMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    return m


def rmse(volume, reference, mask=None) -> float:
    volume = np.asarray(volume, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if volume.shape != reference.shape:
        raise ValueError("volumes must share a grid")
    m = _mask_array(mask, volume.shape)
    diff = volume[m] - reference[m]
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(volume, reference, mask=None) -> float:
    """``20 log10(peak / rmse)``; the peak is the reference maximum inside the mask."""
    m = _mask_array(mask, np.shape(reference))
    err = rmse(volume, reference, m)
    if err == 0.0:
        return float("inf")
    peak = float(np.max(np.asarray(reference)[m]))
    return float(20.0 * np.log10(peak / err))


def dvf_error(fitted: FFDMotionModel, truth_sampler, probes, t) -> np.ndarray:
    """Per-probe endpoint error ``|D_fit(x, t) - D_truth(x, t)|`` (mm).

    ``truth_sampler`` is a callable ``x -> D_truth(x, t)`` or an
    :class:`FFDMotionModel`.
    """
    probes = np.asarray(probes, dtype=np.float64).reshape(-1, 3)
    if isinstance(truth_sampler, FFDMotionModel):
        truth = displacement(truth_sampler, probes, t)
    else:
        truth = truth_sampler(probes)
    return np.linalg.norm(displacement(fitted, probes, t) - truth, axis=-1)


def invert_displacement(model: FFDMotionModel, y, t, iterations=30, tol=1e-10) -> np.ndarray:
    """Solve ``D(x, t) = y`` by Newton iterations started at ``x = y``."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    x = y.copy()
    for _ in range(iterations):
        r = displacement(model, x, t) - y
        if np.max(np.abs(r)) < tol:
            break
        x -= np.linalg.solve(jacobian(model, x, t), r[..., None])[..., 0]
    return x


def relative_dvf_error(fitted: FFDMotionModel, truth: FFDMotionModel, probes, t, t_ref=0) -> np.ndarray:
    """Endpoint error of the motion from time ``t_ref`` to time ``t``.

    Probes are given in the truth's reference frame.  Each probe is carried
    to ``t_ref`` by the truth, located in the fitted reference frame by
    inverting the fitted DVF at ``t_ref``, and both models then carry it to
    ``t``.  This removes the arbitrary choice of reference configuration of
    the fit.
    """
    probes = np.asarray(probes, dtype=np.float64).reshape(-1, 3)
    y_ref = displacement(truth, probes, t_ref)
    x_fit = invert_displacement(fitted, y_ref, t_ref)
    return np.linalg.norm(displacement(fitted, x_fit, t) - displacement(truth, probes, t), axis=-1)


def default_time_samples(n_t, n=10, trace=None) -> list[int]:
    """``n`` uniformly spaced time indices, plus the mean-position time when a trace is given."""
    samples = sorted({int(round(v)) for v in np.linspace(0, n_t - 1, n)})
    if trace is not None:
        trace = np.asarray(trace)
        mean_t = int(np.argmin(np.abs(trace - trace.mean())))
        if mean_t not in samples:
            samples.append(mean_t)
    return samples


def evaluate_run(cloud: GaussianCloud, model: FFDMotionModel, mode, truth: TruthBundle, grid: GridSpec,
                 geom: ScanGeometry, time_samples, dvf_probes=None) -> dict:
    """Masked PSNR/RMSE per time sample and DVF accuracy of a fitted model."""
    if truth is None:
        raise ValueError("evaluation needs a truth bundle")
    mode = MotionMode(mode)
    mask = fov_mask(geom, grid)
    rows = []
    for t in time_samples:
        snap = warp(cloud, model, t, mode)
        vol = rasterize_to_volume(snap, grid)
        ref = truth.volume(grid, t)
        rows.append({"t": int(t), "psnr": psnr(vol, ref, mask), "rmse": rmse(vol, ref, mask)})
    report = {
        "peak_convention": PEAK_CONVENTION,
        "mask_radius_mm": mask.radius,
        "mode": mode.value,
        "per_time": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_rmse": float(np.mean([r["rmse"] for r in rows])),
    }
    truth_model = truth.motion.model
    if dvf_probes is None:
        dvf_probes = truth.phantom.means[truth.phantom.n_body:]
    if truth_model is not None and mode is not MotionMode.PER_GAUSSIAN and len(dvf_probes):
        errs = np.concatenate([relative_dvf_error(model, truth_model, dvf_probes, t) for t in time_samples])
        report["dvf"] = {
            "reference_time": 0,
            "median_mm": float(np.median(errs)),
            "mean_mm": float(np.mean(errs)),
            "max_mm": float(np.max(errs)),
        }
    return report


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
