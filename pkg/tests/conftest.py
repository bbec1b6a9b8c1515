import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")
warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

from dyngs.geometry import make_circular_geometry  # noqa: E402


@pytest.fixture(scope="session")
def clinical_geom():
    """310 views, 512x512 @ 0.8 mm, half-fan offset of 116 mm."""
    return make_circular_geometry(1000.0, 1536.0, 310, (512, 512), 0.8, 116.0)


@pytest.fixture(scope="session")
def small_geom():
    return make_circular_geometry(1000.0, 1536.0, 8, (32, 32), 3.2)


def central_diff(f, x, step):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place)."""
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f()
        flat[i] = keep - step
        fm = f()
        flat[i] = keep
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def rel_err(analytic, numeric, floor_frac=1e-3):
    """Per-component relative error with a floor at ``floor_frac`` of the largest magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(numeric), floor_frac * max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-300))
    return float(np.max(np.abs(analytic - numeric) / scale))


ACCEPTANCE_LINES: list[str] = []


def record(label, ok, detail):
    """Register one acceptance verdict; the lines are echoed in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
