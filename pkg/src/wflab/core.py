"""Shared data model: sampling grids, field tensors, observation masks,
vectorization and the on-disk tensor/mask/config formats.

Conventions fixed here and relied on everywhere else:

* A field is sampled on a regular (x, z, t) grid and stored as a float64
  array of shape ``(n_x, n_z, n_t)``.
* Flattening to a vector runs t fastest, then x, then z, so each point's
  time history stays contiguous.  ``devectorize(vectorize(f)) == f``
  bit-exactly.
* Missing data is always expressed through an :class:`ObservationMask`;
  numerical kernels never see NaN sentinels.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"WFT1"

#: Stream tags for :func:`stream_rng`; every consumer of randomness draws
#: from its own addressable stream so any single artifact is reproducible
#: without replaying the whole pipeline.
STREAM_SIMULATE = 1
STREAM_MASK = 2
STREAM_BPFA_INIT = 3
STREAM_BPFA_CHAIN = 4


class ConfigError(ValueError):
    """Bad or inconsistent configuration input (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical routine failed or produced non-finite state (CLI exit code 3)."""


def stream_rng(seed: int, stream: int, *indices: int) -> np.random.Generator:
    """Independent random stream addressed by (seed, stream, *indices)."""
    entropy = (int(seed), int(stream), *(int(i) for i in indices))
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))


def _frozen_array(values, dtype=np.float64, ndim=None) -> np.ndarray:
    """Copy to a C-contiguous read-only array (core types are immutable)."""
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Uniform (x, z, t) sampling grid.

    Counts are numbers of samples; spacings are in meters / seconds.  The
    spatial extents are ``(n_x - 1) * dx`` by ``(n_z - 1) * dz`` and the
    record duration is ``n_t * dt``.
    """

    n_x: int
    n_z: int
    n_t: int
    dx: float
    dz: float
    dt: float

    def __post_init__(self):
        if min(self.n_x, self.n_z, self.n_t) < 1:
            raise ConfigError("grid counts must all be >= 1")
        if min(self.dx, self.dz, self.dt) <= 0:
            raise ConfigError("grid spacings must all be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_z, self.n_t)

    @property
    def n_points(self) -> int:
        return self.n_x * self.n_z

    @property
    def size(self) -> int:
        return self.n_x * self.n_z * self.n_t

    @property
    def duration(self) -> float:
        return self.n_t * self.dt

    def x_coords(self) -> np.ndarray:
        return self.dx * np.arange(self.n_x)

    def z_coords(self) -> np.ndarray:
        return self.dz * np.arange(self.n_z)

    def t_coords(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t)


@dataclass(frozen=True)
class FieldTensor:
    """Real-valued field samples on a :class:`GridSpec`.

    ``values`` has shape ``(n_x, n_z, n_t)`` and must be finite everywhere:
    missing data lives in masks, never inside the tensor.
    """

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen_array(self.values)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite; represent missing data with a mask")
        object.__setattr__(self, "values", vals)

    def point_record(self, ix: int, iz: int) -> np.ndarray:
        """Time history at one grid point."""
        return self.values[ix, iz, :]


@dataclass(frozen=True)
class ObservationMask:
    """Spatial observation pattern.

    In ``whole-history`` mode (the default, matching undeployed sensors) a
    point is either observed for all t or missing for all t.  ``per-entry``
    mode carries an explicit (n_x, n_z, n_t) pattern.
    """

    grid: GridSpec
    observed: np.ndarray
    mode: str = "whole-history"
    per_entry: np.ndarray | None = None

    def __post_init__(self):
        obs = _frozen_array(self.observed, dtype=bool, ndim=2)
        if obs.shape != (self.grid.n_x, self.grid.n_z):
            raise ValueError(f"observed shape {obs.shape} does not match grid")
        object.__setattr__(self, "observed", obs)
        if self.mode not in ("whole-history", "per-entry"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == "per-entry":
            if self.per_entry is None:
                raise ValueError("per-entry mode requires the per_entry array")
            pe = _frozen_array(self.per_entry, dtype=bool, ndim=3)
            if pe.shape != self.grid.shape:
                raise ValueError("per_entry shape does not match grid")
            if not np.array_equal(pe.any(axis=2), obs):
                raise ValueError("observed must mark exactly the points with any observed entry")
            object.__setattr__(self, "per_entry", pe)
            n_obs = int(pe.sum())
        else:
            if self.per_entry is not None:
                raise ValueError("per_entry array only valid in per-entry mode")
            n_obs = int(obs.sum()) * self.grid.n_t
        if n_obs == 0:
            raise ValueError("no observations: mask must observe at least one entry")

    @property
    def n_observed_points(self) -> int:
        return int(self.observed.sum())

    @property
    def n_missing_points(self) -> int:
        return self.grid.n_points - self.n_observed_points

    def entry_mask(self) -> np.ndarray:
        """Boolean (n_x, n_z, n_t) array of observed entries."""
        if self.mode == "per-entry":
            return np.asarray(self.per_entry)
        return np.broadcast_to(self.observed[:, :, None], self.grid.shape)

    def observed_points(self) -> list[tuple[int, int]]:
        ix, iz = np.nonzero(self.observed)
        return list(zip(ix.tolist(), iz.tolist()))

    def missing_points(self) -> list[tuple[int, int]]:
        ix, iz = np.nonzero(~self.observed)
        return list(zip(ix.tolist(), iz.tolist()))


# ---------------------------------------------------------------------------
# Vectorization (t fastest, then x, then z)
# ---------------------------------------------------------------------------

def flatten_values(values: np.ndarray) -> np.ndarray:
    """Flatten an (n_x, n_z, n_t) array with t fastest, then x, then z."""
    if values.ndim != 3:
        raise ValueError(f"expected a rank-3 array, got shape {values.shape}")
    return np.ascontiguousarray(values.transpose(1, 0, 2)).ravel()


def unflatten_values(vec: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten_values`."""
    n_x, n_z, n_t = shape
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.size != n_x * n_z * n_t:
        raise ValueError(f"vector of size {vec.size} does not match shape {shape}")
    return vec.reshape(n_z, n_x, n_t).transpose(1, 0, 2)


def vectorize(fieldt: FieldTensor) -> np.ndarray:
    """Flatten a field to a vector of length n_x*n_z*n_t (t fastest, x, z)."""
    return flatten_values(fieldt.values)


def devectorize(vec: np.ndarray, grid: GridSpec) -> FieldTensor:
    """Rebuild a :class:`FieldTensor` from :func:`vectorize` output."""
    return FieldTensor(grid, unflatten_values(vec, grid.shape))


def apply_mask(fieldt: FieldTensor, mask: ObservationMask) -> tuple[np.ndarray, np.ndarray]:
    """Extract observed entries.

    Returns ``(observed, index_map)`` where ``observed`` holds the field
    values at observed entries, in vectorization order, and ``index_map``
    holds their positions in the full flattened vector.  Scatter back with
    :func:`scatter_observed`.
    """
    if mask.grid != fieldt.grid:
        raise ValueError("mask grid does not match field grid")
    flat_mask = flatten_values(mask.entry_mask().astype(np.float64)) > 0.5
    index_map = np.flatnonzero(flat_mask)
    if index_map.size == 0:
        raise ValueError("no observations")
    return vectorize(fieldt)[index_map], index_map


def scatter_observed(observed: np.ndarray, index_map: np.ndarray, grid: GridSpec,
                     fill_value: float = 0.0) -> np.ndarray:
    """Scatter observed entries back to a full (n_x, n_z, n_t) array.

    Missing entries are set to ``fill_value`` (an explicit sentinel for
    inspection; numerical pipelines keep using the mask instead).
    """
    full = np.full(grid.size, fill_value, dtype=np.float64)
    full[index_map] = observed
    return unflatten_values(full, grid.shape)


# ---------------------------------------------------------------------------
# Binary tensor format: b"WFT1" | u32 rank | rank * u64 dims | C-order f64 payload
# ---------------------------------------------------------------------------

def write_tensor(path, array: np.ndarray) -> None:
    """Write an array in the WFT1 binary format (little-endian float64)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a WFT1 binary tensor file."""
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a WFT1 tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    if payload.size != count:
        raise ValueError(f"{path}: truncated payload")
    return payload.reshape(dims).astype(np.float64)


def write_field(path, fieldt: FieldTensor) -> None:
    write_tensor(path, fieldt.values)


def read_field(path, grid: GridSpec) -> FieldTensor:
    values = read_tensor(path)
    if values.shape != grid.shape:
        raise ValueError(f"{path}: tensor shape {values.shape} does not match grid {grid.shape}")
    return FieldTensor(grid, values)


# ---------------------------------------------------------------------------
# Mask CSV format: header "ix,iz,observed", one row per grid point
# ---------------------------------------------------------------------------

def write_mask_csv(path, mask: ObservationMask) -> None:
    lines = ["ix,iz,observed"]
    for ix in range(mask.grid.n_x):
        for iz in range(mask.grid.n_z):
            lines.append(f"{ix},{iz},{1 if mask.observed[ix, iz] else 0}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask_csv(path, grid: GridSpec) -> ObservationMask:
    observed = np.zeros((grid.n_x, grid.n_z), dtype=bool)
    seen = np.zeros((grid.n_x, grid.n_z), dtype=bool)
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0].strip().lower() != "ix,iz,observed":
        raise ValueError(f"{path}: expected header 'ix,iz,observed'")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.strip().split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'ix,iz,observed'")
        ix, iz, obs = (int(p) for p in parts)
        if not (0 <= ix < grid.n_x and 0 <= iz < grid.n_z):
            raise ValueError(f"{path}:{lineno}: point ({ix}, {iz}) outside grid")
        if obs not in (0, 1):
            raise ValueError(f"{path}:{lineno}: observed flag must be 0 or 1")
        observed[ix, iz] = bool(obs)
        seen[ix, iz] = True
    if not seen.all():
        raise ValueError(f"{path}: mask file must list every grid point")
    return ObservationMask(grid, observed)


# ---------------------------------------------------------------------------
# Experiment configuration (JSON document)
# ---------------------------------------------------------------------------

_METHODS = ("alm", "bpfa", "omp")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: seed, ensemble size, method and per-module parameters.

    ``sections`` holds the raw per-module parameter dictionaries (grid,
    spectral, davenport, coherence, mask, alm, bpfa, omp, ...); modules
    construct their typed parameter objects from them.  Identical configs
    produce identical outputs for every pipeline stage.
    """

    seed: int
    ensemble_size: int
    method: str
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.ensemble_size, int) or self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be a positive integer")
        if self.method not in _METHODS:
            raise ConfigError(f"method must be one of {_METHODS}, got {self.method!r}")

    def section(self, name: str, required: bool = True) -> dict:
        if name not in self.sections:
            if required:
                raise ConfigError(f"config is missing the {name!r} section")
            return {}
        value = self.sections[name]
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return value

    def to_json(self) -> str:
        doc = {"seed": self.seed, "ensemble_size": self.ensemble_size, "method": self.method}
        doc.update(self.sections)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        for key in ("seed", "ensemble_size", "method"):
            if key not in doc:
                raise ConfigError(f"config is missing required key {key!r}")
        sections = {k: v for k, v in doc.items() if k not in ("seed", "ensemble_size", "method")}
        return cls(seed=doc["seed"], ensemble_size=doc["ensemble_size"],
                   method=doc["method"], sections=sections)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; stamped into every output."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def dataclass_from_dict(cls, doc: dict, section: str = ""):
    """Build a parameter dataclass from a config dict, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        where = f" in section {section!r}" if section else ""
        raise ConfigError(f"unknown keys {sorted(unknown)}{where}; expected {sorted(known)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameters for {cls.__name__}: {exc}") from exc


def grid_from_config(cfg: ExperimentConfig) -> GridSpec:
    return dataclass_from_dict(GridSpec, cfg.section("grid"), "grid")


# ---------------------------------------------------------------------------
# Column CSV writer shared by stats and the CLI
# ---------------------------------------------------------------------------

def write_csv_columns(path, names: list[str], columns: list[np.ndarray],
                      meta: dict | None = None) -> None:
    """Write named columns as CSV with '# key=value' metadata lines on top.

    Column names carry units in brackets, e.g. ``"omega[rad/s]"``.
    """
    columns = [np.atleast_1d(np.asarray(col)) for col in columns]
    if len(names) != len(columns):
        raise ValueError("names and columns must pair up")
    n_rows = {col.shape[0] for col in columns}
    if len(n_rows) != 1:
        raise ValueError("all columns must have the same length")
    lines = [f"# {key}={value}" for key, value in (meta or {}).items()]
    lines.append(",".join(names))
    for row in zip(*columns):
        lines.append(",".join(_format_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, (np.floating, float)):
        return format(float(value), ".17g")
    return str(value)
