"""Build a breathing-like low-rank motion model and inspect its displacement field.

Run:  python demos/02_motion_model.py
"""
import numpy as np

from dyngs.ffd import displacement, jacobian
from dyngs.phantom import breathing_trace, desk_truth_motion

n_t = 60
truth = desk_truth_motion(n_t, points_per_cycle=15, seed=0)
model = truth.model
print(f"lattice {model.lattice.dims} x {model.lattice.n_ranks} ranks, "
      f"temporal controls {model.temporal.controls.shape}")

trace = breathing_trace(n_cycles=4, points_per_cycle=15, seed=0)
print("first cycle of a breathing trace:", np.round(trace[:15], 2))

probe = np.array([[0.0, 0.0, 20.0], [15.0, -10.0, 0.0]])
for t in (0, 7, 15, 30):
    d = displacement(model, probe, t) - probe
    det = np.linalg.det(jacobian(model, probe, t))
    print(f"t={t:2d}  |D| = {np.linalg.norm(d, axis=1).round(2)} mm   det K = {det.round(4)}")
