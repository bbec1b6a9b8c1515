"""Render a single Gaussian on the half-fan clinical geometry and compare it with the exact line integral.

Run:  python demos/01_splat_one_blob.py
"""
import numpy as np

from dyngs.geometry import make_circular_geometry, view_pose
from dyngs.phantom import BlobPhantom, analytic_project
from dyngs.splatting import render, render_backward

geom = make_circular_geometry(1000.0, 1536.0, 310, (512, 512), 0.8, 116.0)
print(f"{geom.n_views} views, {geom.detector_cols}x{geom.detector_rows} @ {geom.pixel_pitch} mm, "
      f"offset {geom.detector_offset_u} mm")

# A slightly elongated blob 30 mm off-center.
mu = np.array([30.0, -10.0, 5.0])
cov = np.diag([36.0, 16.0, 25.0])
pose = view_pose(geom, 40)

splat = render((np.array([0.02]), mu[None], cov[None]), pose, geom)
exact = analytic_project(BlobPhantom([0.02], mu[None], cov[None]), pose, geom)
err = np.abs(splat - exact).max() / exact.max()
print(f"peak {exact.max():.5f}, max deviation {err:.3%} of peak")

# Gradient of the summed image with respect to the blob parameters.
g = render_backward((np.array([0.02]), mu[None], cov[None]), pose, geom, np.ones_like(splat))
print("d(sum)/d(density) =", g.density[0])
print("d(sum)/d(mean)    =", g.means[0])
