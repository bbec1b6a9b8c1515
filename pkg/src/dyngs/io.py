"""On-disk formats: projection sets, volumes, checkpoints, truth bundles, logs.

Every binary payload is little-endian.  Metadata is JSON; Python's float
repr round-trips doubles exactly, so metadata is lossless too.

Cloud checkpoint layout::

    b"DGSC"  uint32 version  uint64 N  uint32 R
    N records of float64: density_raw, means[3], quats[4], log_scales[3],
    then R*10 per-Gaussian weights when R > 0

Motion checkpoint layout::

    b"DGSM"  uint32 version
    uint64 dims[3]  uint64 n_ranks  uint64 n_channels
    float64 spacing[3]  float64 origin[3]
    uint64 n_t  float64 temporal_spacing  uint64 n_controls
    float64 lattice coefficients (R, Nx, Ny, Nz, C), C order
    float64 temporal controls (R, M), C order
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .cloud import GaussianCloud, GridSpec
from .engine import TrainConfig
from .ffd import FFDMotionModel, SpatialLattice, TemporalSpline
from .geometry import ScanGeometry
from .phantom import BlobPhantom, ProjectionSet, TruthBundle, TruthMotion

__all__ = [
    "FORMAT_VERSION",
    "FormatError",
    "sha256_file",
    "write_projection_set",
    "read_projection_set",
    "write_volume",
    "read_volume",
    "write_cloud",
    "read_cloud",
    "write_motion",
    "read_motion",
    "write_truth_bundle",
    "read_truth_bundle",
    "MetricsLog",
    "read_metrics_log",
    "RunConfig",
    "write_json",
    "read_json",
]

FORMAT_VERSION = 1
_CLOUD_MAGIC = b"DGSC"
_MOTION_MAGIC = b"DGSM"
_F4 = np.dtype("<f4")
_F8 = np.dtype("<f8")


class FormatError(ValueError):
    """A file is malformed, truncated, or fails its checksum."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _check_version(meta, path):
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {meta.get('format_version')!r}")


# projection sets

def write_projection_set(directory, projections: ProjectionSet, extra: dict | None = None) -> Path:
    """Write ``projections.json`` plus one ``view_XXXX.raw`` per view; returns the metadata path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    geom = projections.geometry
    views = []
    for i, img in enumerate(projections.images):
        name = f"view_{i:04d}.raw"
        np.ascontiguousarray(img, dtype=_F4).tofile(directory / name)
        views.append({"index": i, "angle": float(geom.angles[i]), "time_index": int(projections.time_indices[i]),
                      "file": name, "sha256": sha256_file(directory / name)})
    meta = {
        "format_version": FORMAT_VERSION,
        "geometry": geom.to_dict(),
        "n_t": int(projections.n_t),
        "rows": geom.detector_rows,
        "cols": geom.detector_cols,
        "pixel_pitch": geom.pixel_pitch,
        "dtype": "<f4",
        "order": "row-major",
        "noise": projections.noise,
        "views": views,
    }
    if extra:
        meta["extra"] = extra
    path = directory / "projections.json"
    write_json(path, meta)
    return path


def read_projection_set(directory, verify: bool = True) -> ProjectionSet:
    directory = Path(directory)
    meta_path = directory / "projections.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no projection set at {directory}")
    meta = read_json(meta_path)
    _check_version(meta, meta_path)
    geom = ScanGeometry.from_dict(meta["geometry"])
    views = meta["views"]
    if len(views) != geom.n_views:
        raise FormatError(f"{meta_path}: {len(views)} view entries for {geom.n_views} views")
    rows, cols = meta["rows"], meta["cols"]
    images = np.empty((len(views), rows, cols), dtype=np.float32)
    for v in views:
        path = directory / v["file"]
        if not path.exists():
            raise FormatError(f"missing view file {path}")
        if verify and sha256_file(path) != v["sha256"]:
            raise FormatError(f"checksum mismatch for {path}")
        data = np.fromfile(path, dtype=_F4)
        if data.size != rows * cols:
            raise FormatError(f"{path}: expected {rows * cols} pixels, found {data.size}")
        images[v["index"]] = data.reshape(rows, cols)
    times = np.array([v["time_index"] for v in sorted(views, key=lambda v: v["index"])], dtype=np.int64)
    return ProjectionSet(images, times, geom, int(meta["n_t"]), meta.get("noise"))


# volumes

def write_volume(path, volume, grid: GridSpec, components: int = 1, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.raw``.

    ``volume`` is indexed ``[ix, iy, iz]`` (plus a trailing component axis
    when ``components > 1``); the payload is float32 with x fastest and the
    component axis fastest of all.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume = np.asarray(volume)
    expect = tuple(grid.dims) + ((components,) if components > 1 else ())
    if volume.shape != expect:
        raise ValueError(f"volume shape {volume.shape} does not match grid {expect}")
    raw = path.with_suffix(".raw")
    order = tuple(range(volume.ndim))[::-1] if components == 1 else (2, 1, 0, 3)
    np.ascontiguousarray(volume.transpose(order), dtype=_F4).tofile(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "dims": list(grid.dims),
        "spacing": grid.spacing.tolist(),
        "origin": grid.origin.tolist(),
        "components": components,
        "units": "mm^-1" if components == 1 else "mm",
        "dtype": "<f4",
        "order": "x-fastest",
        "file": raw.name,
        "sha256": sha256_file(raw),
    }
    if extra:
        meta["extra"] = extra
    write_json(path.with_suffix(".json"), meta)
    return path.with_suffix(".json")


def read_volume(path, verify: bool = True):
    """Returns ``(volume, grid, meta)``; ``volume`` is float32 ``[ix, iy, iz(, c)]``."""
    path = Path(path).with_suffix(".json")
    meta = read_json(path)
    _check_version(meta, path)
    grid = GridSpec(tuple(meta["dims"]), meta["spacing"], meta["origin"])
    comps = int(meta.get("components", 1))
    raw = path.parent / meta["file"]
    if verify and sha256_file(raw) != meta["sha256"]:
        raise FormatError(f"checksum mismatch for {raw}")
    data = np.fromfile(raw, dtype=_F4)
    nx, ny, nz = grid.dims
    if data.size != nx * ny * nz * comps:
        raise FormatError(f"{raw}: payload has {data.size * 4} bytes, expected {nx * ny * nz * comps * 4}")
    if comps == 1:
        vol = data.reshape(nz, ny, nx).transpose(2, 1, 0)
    else:
        vol = data.reshape(nz, ny, nx, comps).transpose(2, 1, 0, 3)
    return np.ascontiguousarray(vol), grid, meta


# checkpoints

def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}")
    return buf


def write_cloud(path, cloud: GaussianCloud):
    n = len(cloud)
    r = 0 if cloud.pg_weights is None else cloud.pg_weights.shape[1]
    cols = [cloud.density_raw[:, None], cloud.means, cloud.quats, cloud.log_scales]
    if r:
        cols.append(cloud.pg_weights.reshape(n, r * 10))
    records = np.concatenate(cols, axis=1) if n else np.zeros((0, 11 + 10 * r))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CLOUD_MAGIC + struct.pack("<IQI", FORMAT_VERSION, n, r))
        fh.write(np.ascontiguousarray(records, dtype=_F8).tobytes())


def read_cloud(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _CLOUD_MAGIC:
            raise FormatError(f"{path}: not a cloud checkpoint")
        version, n, r = struct.unpack("<IQI", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        width = 11 + 10 * r
        data = np.frombuffer(_read_exact(fh, n * width * 8, "records"), dtype=_F8).reshape(n, width)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    data = data.astype(np.float64)
    pg = data[:, 11:].reshape(n, r, 10) if r else None
    return GaussianCloud(data[:, 0], data[:, 1:4], data[:, 4:8], data[:, 8:11], pg)


def write_motion(path, model: FFDMotionModel):
    lat, tmp = model.lattice, model.temporal
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MOTION_MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<5Q", *lat.dims, lat.n_ranks, lat.n_channels))
        fh.write(struct.pack("<6d", *lat.spacing, *lat.origin))
        fh.write(struct.pack("<QdQ", tmp.n_t, tmp.spacing, tmp.controls.shape[1]))
        fh.write(np.ascontiguousarray(lat.coeffs, dtype=_F8).tobytes())
        fh.write(np.ascontiguousarray(tmp.controls, dtype=_F8).tobytes())


def read_motion(path) -> FFDMotionModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MOTION_MAGIC:
            raise FormatError(f"{path}: not a motion checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        nx, ny, nz, r, c = struct.unpack("<5Q", _read_exact(fh, 40, "header"))
        geo = struct.unpack("<6d", _read_exact(fh, 48, "header"))
        n_t, t_spacing, m = struct.unpack("<QdQ", _read_exact(fh, 24, "header"))
        count = r * nx * ny * nz * c
        coeffs = np.frombuffer(_read_exact(fh, count * 8, "lattice"), dtype=_F8).reshape(r, nx, ny, nz, c)
        controls = np.frombuffer(_read_exact(fh, r * m * 8, "temporal controls"), dtype=_F8).reshape(r, m)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    lattice = SpatialLattice(coeffs.astype(np.float64), np.array(geo[:3]), np.array(geo[3:]))
    return FFDMotionModel(lattice, TemporalSpline(controls.astype(np.float64), n_t, t_spacing))


# truth bundles

def write_truth_bundle(directory, truth: TruthBundle) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    motion = truth.motion
    meta = {
        "format_version": FORMAT_VERSION,
        "phantom": truth.phantom.to_dict(),
        "trace": motion.trace.tolist(),
        "kind": motion.kind,
        "directions": None if motion.directions is None else motion.directions.tolist(),
        "motion_file": None,
        "extra": truth.extra,
    }
    if motion.model is not None:
        write_motion(directory / "truth_motion.bin", motion.model)
        meta["motion_file"] = "truth_motion.bin"
        meta["motion_sha256"] = sha256_file(directory / "truth_motion.bin")
    path = directory / "truth.json"
    write_json(path, meta)
    return path


def read_truth_bundle(directory) -> TruthBundle:
    directory = Path(directory)
    path = directory / "truth.json"
    if not path.exists():
        raise FileNotFoundError(f"no truth bundle at {directory}")
    meta = read_json(path)
    _check_version(meta, path)
    model = None
    if meta.get("motion_file"):
        mpath = directory / meta["motion_file"]
        if sha256_file(mpath) != meta["motion_sha256"]:
            raise FormatError(f"checksum mismatch for {mpath}")
        model = read_motion(mpath)
    directions = None if meta.get("directions") is None else np.array(meta["directions"], dtype=np.float64)
    motion = TruthMotion(np.array(meta["trace"], dtype=np.float64), model, directions)
    return TruthBundle(BlobPhantom.from_dict(meta["phantom"]), motion, meta.get("extra") or {})


# metrics log

class MetricsLog:
    """Line-delimited JSON, one record per call, flushed immediately."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")

    def write(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# run configuration

_PATH_KEYS = {
    "data_dir": None,
    "out_dir": "run",
    "init_volume": None,
    "truth_dir": None,
    "checkpoint_dir": None,
}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


@dataclasses.dataclass
class RunConfig:
    """TrainConfig fields plus input/output paths.

    Paths default to ``None`` except ``out_dir`` (``"run"``).  Training keys
    default to :class:`TrainConfig`'s defaults.
    """

    train: TrainConfig
    paths: dict

    @staticmethod
    def known_keys() -> set[str]:
        return set(_TRAIN_FIELDS) | set(_PATH_KEYS)

    @classmethod
    def from_sources(cls, file_values: dict | None = None, cli_values: dict | None = None) -> "RunConfig":
        """Merge with precedence CLI > file > default.  Unknown keys raise ``ValueError``."""
        merged = {}
        for source, values in (("config file", file_values or {}), ("command line", cli_values or {})):
            unknown = set(values) - cls.known_keys()
            if unknown:
                raise ValueError(f"unknown {source} keys: {', '.join(sorted(unknown))}")
            merged.update({k: v for k, v in values.items() if v is not None})
        train_kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in merged.items() if k in _TRAIN_FIELDS}
        paths = {k: merged.get(k, d) for k, d in _PATH_KEYS.items()}
        return cls(TrainConfig(**train_kw), paths)

    @classmethod
    def load(cls, path, cli_values: dict | None = None) -> "RunConfig":
        values = read_json(path) if path is not None else {}
        if not isinstance(values, dict):
            raise ValueError("config file must hold a JSON object")
        return cls.from_sources(values, cli_values)

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), **self.paths}

    def save(self, path):
        write_json(path, self.to_dict())
