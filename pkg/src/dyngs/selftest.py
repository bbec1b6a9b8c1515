"""Built-in health checks run by ``dyngs selftest``.

Each check returns ``(passed, detail)``.  The suite covers the splatting
oracle, finite-difference gradients of the full render/warp chain in every
motion mode, B-spline invariants and the noise model.
"""
from __future__ import annotations

import sys
import time

import numpy as np

from .cloud import GaussianCloud
from .ffd import FFDMotionModel, TemporalSpline, jacobian, lattice_for_fov, spatial_basis
from .geometry import make_circular_geometry, view_pose
from .phantom import BlobPhantom, NoiseSpec, add_noise, analytic_project
from .splatting import integration_factor, render, render_backward
from .warp import MotionMode, warp, warp_backward

__all__ = ["small_scene", "chain_loss_and_grads", "check_gradients", "run_selftest"]

GRAD_RTOL = 1e-4


def small_scene(seed=0, n_kernels=10, n_channels=3, per_gaussian=False):
    """A 32x32-detector geometry, a random cloud and a random rank-2 motion model."""
    rng = np.random.default_rng(seed)
    geom = make_circular_geometry(1000.0, 1536.0, 8, (32, 32), 3.2)
    n = n_kernels
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud(rng.uniform(-2.0, 0.5, n), rng.uniform(-12, 12, (n, 3)), q,
                          np.log(rng.uniform(3.0, 6.0, (n, 3))))
    lattice = lattice_for_fov([-30.0] * 3, [30.0] * 3, 12.8, n_ranks=2, n_channels=n_channels)
    lattice.coeffs[..., :3] = rng.normal(scale=0.8, size=lattice.coeffs[..., :3].shape)
    if n_channels == 10:
        lattice.coeffs[..., 3:] = rng.normal(scale=0.03, size=lattice.coeffs[..., 3:].shape)
    temporal = TemporalSpline.zeros(2, geom.n_views)
    temporal.controls[:] = rng.normal(scale=0.7, size=temporal.controls.shape)
    if per_gaussian:
        pg = rng.normal(scale=0.03, size=(n, 2, 10))
        pg[..., :3] *= 30.0
        cloud.pg_weights = pg
    return geom, cloud, FFDMotionModel(lattice, temporal)


def _param_arrays(cloud, model, mode):
    arrays = {"density_raw": cloud.density_raw, "means": cloud.means, "quats": cloud.quats,
              "log_scales": cloud.log_scales, "temporal": model.temporal.controls}
    if mode is MotionMode.PER_GAUSSIAN:
        arrays["pg_weights"] = cloud.pg_weights
    else:
        arrays["lattice"] = model.lattice.coeffs
    return arrays


def chain_loss_and_grads(geom, cloud, model, mode, view, t, weights, linearize_at):
    """``sum(weights * render(warp(...)))`` and its analytic gradients per parameter array."""
    snap = warp(cloud, model, t, mode, for_backward=True)
    pose = view_pose(geom, view, t)
    img = render(snap, pose, geom, linearize_at=linearize_at)
    rg = render_backward(snap, pose, geom, weights, linearize_at=linearize_at)
    wg = warp_backward(snap, cloud, model, rg.means, rg.covs, rg.density)
    grads = {"density_raw": wg.cloud.density_raw, "means": wg.cloud.means, "quats": wg.cloud.quats,
             "log_scales": wg.cloud.log_scales, "temporal": wg.temporal}
    if mode is MotionMode.PER_GAUSSIAN:
        grads["pg_weights"] = wg.cloud.pg_weights
    else:
        grads["lattice"] = wg.lattice
    return float(np.sum(weights * img)), grads


def check_gradients(mode, seed=0, n_probe=12, step=1e-5):
    """Worst relative error of analytic vs central-difference gradients over sampled components.

    The probed components are the largest analytic entries of each array
    plus a random sample.  The error is relative to ``max(|fd|, 1e-3 * m)``
    with ``m`` the array's largest gradient magnitude, which keeps
    cancellation noise on near-zero entries out of the ratio.
    """
    mode = MotionMode(mode)
    geom, cloud, model = small_scene(seed, n_channels=10 if mode is MotionMode.DECOUPLED_FFD else 3,
                                     per_gaussian=mode is MotionMode.PER_GAUSSIAN)
    view, t = 3, 3
    rng = np.random.default_rng(seed + 1)
    weights = rng.normal(size=(geom.detector_rows, geom.detector_cols))
    base = warp(cloud, model, t, mode)
    lin = base.means.copy()

    def loss():
        return chain_loss_and_grads(geom, cloud, model, mode, view, t, weights, lin)[0]

    _, analytic = chain_loss_and_grads(geom, cloud, model, mode, view, t, weights, lin)
    worst = {}
    for name, arr in _param_arrays(cloud, model, mode).items():
        flat = arr.reshape(-1)
        an = analytic[name].reshape(-1)
        # probe where the analytic gradient is largest plus a random sample
        idx = np.unique(np.concatenate([np.argsort(-np.abs(an))[: n_probe // 2],
                                        rng.choice(flat.size, size=n_probe // 2, replace=False)]))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + step
            lp = loss()
            flat[i] = keep - step
            lm = loss()
            flat[i] = keep
            fd[j] = (lp - lm) / (2 * step)
        scale = np.maximum(np.abs(fd), 1e-3 * max(np.abs(fd).max(), np.abs(an).max(), 1e-300))
        worst[name] = float(np.max(np.abs(fd - an[idx]) / scale))
    return worst


def _check_oracle(n_scenes):
    rng = np.random.default_rng(7)
    geom = make_circular_geometry(1000.0, 1536.0, 310, (512, 512), 0.8, 116.0)
    worst = 0.0
    for i in range(n_scenes):
        sigma = rng.uniform(2.0, 10.0)
        mu = rng.uniform(-50.0, 50.0, 3)
        cov = np.eye(3) * sigma**2
        pose = view_pose(geom, int(rng.integers(geom.n_views)))
        ph = BlobPhantom([1.0], mu[None], cov[None])
        ref = analytic_project(ph, pose, geom)
        img = render((np.array([1.0]), mu[None], cov[None]), pose, geom)
        worst = max(worst, float(np.abs(img - ref).max() / ref.max()))
    return worst <= 0.02, f"max error {worst:.4%} of peak over {n_scenes} scenes (limit 2%)"


def _check_ffd():
    lattice = lattice_for_fov([-30.0] * 3, [30.0] * 3, 12.8, n_ranks=1)
    rng = np.random.default_rng(3)
    x = rng.uniform(-25, 25, (200, 3))
    lattice.coeffs[...] = 1.0
    unity = float(np.abs(spatial_basis(lattice, x)[0] - 1.0).max())
    a = rng.normal(size=(3, 3)) * 0.1
    lattice.coeffs[0] = lattice.control_points() @ a.T
    model = FFDMotionModel(lattice, TemporalSpline(np.ones((1, 4)), 1))
    affine = float(np.abs(spatial_basis(lattice, x)[0][:, 0] - x @ a.T).max())
    jac = float(np.abs(jacobian(model, x, 0) - (np.eye(3) + a)).max())
    ok = unity <= 1e-14 and affine <= 1e-10 and jac <= 1e-10
    return ok, f"partition of unity {unity:.1e}, affine {affine:.1e}, Jacobian {jac:.1e}"


def _check_integration_factor():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(3, 3))
    cov = m @ m.T + np.eye(3)
    prec = np.linalg.inv(cov)
    r = np.array([0.0, 0.0, 1.0])
    # marginal along the ray axis through the mean: integral of exp(-q s^2 / 2)
    s = np.linspace(-60, 60, 200001)
    f = np.exp(-0.5 * (r @ prec @ r) * s**2)
    quad = (s[1] - s[0]) * (f.sum() - 0.5 * (f[0] + f[-1]))
    got = float(integration_factor(cov))
    rel = abs(got - quad) / quad
    return rel <= 1e-6, f"relative error {rel:.1e}"


def _check_noise():
    p = np.full(100000, 2.0)
    est = add_noise(p, NoiseSpec(1e8, 4.0, seed=11)).mean()
    rel = abs(est - 2.0) / 2.0
    return rel <= 0.01, f"mean of 1e5 draws at p=2: {est:.6f}"


def run_selftest(quick=False, stream=sys.stdout) -> bool:
    checks = [("splatting vs analytic", lambda: _check_oracle(5 if quick else 20))]
    for mode in MotionMode:
        def grad_check(mode=mode):
            worst = check_gradients(mode)
            w = max(worst.values())
            return w <= GRAD_RTOL, f"worst relative error {w:.1e} ({max(worst, key=worst.get)})"
        checks.append((f"gradients, {mode.value} mode", grad_check))
    checks += [("B-spline invariants", _check_ffd),
               ("integration factor", _check_integration_factor),
               ("noise model", _check_noise)]
    all_ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{time.perf_counter() - t0:.1f}s]", file=stream)
    print("selftest " + ("passed" if all_ok else "FAILED"), file=stream)
    return all_ok
