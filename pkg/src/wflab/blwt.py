"""Assembly of wind-tunnel pressure-tap records into one field tensor.

Four per-face files are concatenated onto a single (n_x, n_z, t) grid
according to a user-declared layout JSON; tap geometry is never inferred.
Layout schema::

    {
      "n_x": 12, "n_z": 20,
      "fs_hz": 625.0,                  # sampling frequency; dt = 1/fs
      "dx": 1.0, "dz": 1.0,            # optional, defaults to tap-index spacing
      "faces": [
        {"x_offset": 0, "z_offset": 0},
        {"x_offset": 6, "z_offset": 0},
        {"x_offset": 0, "z_offset": 10},
        {"x_offset": 6, "z_offset": 10}
      ]
    }

Each face file is a rank-3 WFT1 tensor of shape (face_nx, face_nz, n_t) or
a CSV with one row per time instant and one ``tap_<i>`` column per tap,
taps ordered z fastest within the face (row-major over (x, z)).  Faces must
cover the grid exactly once and share the time axis.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ConfigError, FieldTensor, GridSpec, read_tensor


def _load_face(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"face file not found: {path}")
    if path.suffix.lower() == ".csv":
        rows = path.read_text().strip().splitlines()
        header = rows[0].split(",")
        if len(header) < 2 or header[0].strip() != "t_index":
            raise ConfigError(f"{path}: face CSV must start with 't_index,tap_0,...'")
        data = np.array([[float(v) for v in line.split(",")[1:]] for line in rows[1:]])
        return data  # (n_t, n_taps); reshaped by the caller
    values = read_tensor(path)
    if values.ndim != 3:
        raise ConfigError(f"{path}: face tensor must be rank 3, got rank {values.ndim}")
    return values


def load_layout(source) -> dict:
    if isinstance(source, dict):
        layout = source
    else:
        try:
            layout = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read layout JSON: {exc}") from exc
    for key in ("n_x", "n_z", "faces"):
        if key not in layout:
            raise ConfigError(f"layout is missing {key!r}")
    if len(layout["faces"]) != 4:
        raise ConfigError(f"layout must declare exactly 4 faces, got {len(layout['faces'])}")
    return layout


def ingest_blwt(face_files, layout) -> FieldTensor:
    """Concatenate four per-face recordings into one FieldTensor.

    ``face_files`` are four paths ordered like ``layout['faces']``.  Raises
    naming the offending faces on time-axis mismatch, and on any gap or
    overlap in the declared coverage.
    """
    layout = load_layout(layout)
    face_files = list(face_files)
    if len(face_files) != 4:
        raise ConfigError(f"expected 4 face files, got {len(face_files)}")
    n_x, n_z = int(layout["n_x"]), int(layout["n_z"])
    fs = float(layout.get("fs_hz", 1.0))
    if fs <= 0:
        raise ConfigError("fs_hz must be > 0")

    faces = []
    for face_no, (path, spec) in enumerate(zip(face_files, layout["faces"])):
        raw = _load_face(path)
        if raw.ndim == 2:  # CSV: (n_t, taps) -> (face_nx, face_nz, n_t)
            if "n_x" not in spec or "n_z" not in spec:
                raise ConfigError(f"face {face_no}: CSV faces need n_x/n_z in the layout")
            fx, fz = int(spec["n_x"]), int(spec["n_z"])
            if raw.shape[1] != fx * fz:
                raise ConfigError(f"face {face_no}: {raw.shape[1]} taps but layout says {fx}x{fz}")
            raw = raw.T.reshape(fx, fz, raw.shape[0])
        faces.append((face_no, int(spec["x_offset"]), int(spec["z_offset"]), raw))

    lengths = {face_no: arr.shape[2] for face_no, _, _, arr in faces}
    if len(set(lengths.values())) != 1:
        detail = ", ".join(f"face {k}: {v} samples" for k, v in lengths.items())
        raise ValueError(f"time-axis mismatch across faces ({detail})")
    n_t = faces[0][3].shape[2]

    values = np.zeros((n_x, n_z, n_t))
    covered = np.zeros((n_x, n_z), dtype=int)
    for face_no, ox, oz, arr in faces:
        fx, fz = arr.shape[:2]
        if ox < 0 or oz < 0 or ox + fx > n_x or oz + fz > n_z:
            raise ConfigError(f"face {face_no} ({fx}x{fz} at offset ({ox},{oz})) falls outside the {n_x}x{n_z} grid")
        values[ox:ox + fx, oz:oz + fz, :] = arr
        covered[ox:ox + fx, oz:oz + fz] += 1
    if (covered > 1).any():
        raise ConfigError("face layout overlaps: some grid points are covered twice")
    if (covered == 0).any():
        raise ConfigError("face layout leaves grid points uncovered")

    grid = GridSpec(n_x=n_x, n_z=n_z, n_t=n_t,
                    dx=float(layout.get("dx", 1.0)), dz=float(layout.get("dz", 1.0)),
                    dt=1.0 / fs)
    return FieldTensor(grid, values)
