"""Stochastic-wave simulation of a homogeneous 2D+time wind velocity field.

The target field is described by the Davenport auto-spectrum, an exponential
spatial coherence model, and the closed-form wavenumber-frequency spectrum
obtained from their 2D Fourier transform.  Realizations are synthesized as a
quadruple-cosine superposition over a discretized (kappa_x, kappa_z, omega)
lattice with four independent uniform phase sets per lattice node, which
avoids any cross-spectral matrix decomposition.

Frequency sampling: omega_k = k*dw + freq_shift for k = 0..n_w-1, with
freq_shift defaulting to dw/2.  The half-increment shift places samples at
the cell midpoints of [0, omega_u], so the auto-spectrum (singular at the
origin) is never evaluated at omega = 0.  Wavenumbers sample kappa_i = i*dk
for i = 1..n_k.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    STREAM_SIMULATE,
    ConfigError,
    FieldTensor,
    GridSpec,
    stream_rng,
)


@dataclass(frozen=True)
class DavenportParams:
    """Auto-spectrum parameters: shear flow velocity and 10 m mean wind speed."""

    u_star: float  # m/s
    u10: float     # m/s

    def __post_init__(self):
        if self.u_star <= 0 or self.u10 <= 0:
            raise ConfigError("u_star and u10 must be > 0")


@dataclass(frozen=True)
class CoherenceParams:
    """Exponential decay coefficients in the x and z directions."""

    c1x: float
    c1z: float

    def __post_init__(self):
        if self.c1x <= 0 or self.c1z <= 0:
            raise ConfigError("coherence decay coefficients must be > 0")


@dataclass(frozen=True)
class SpectralGrid:
    """Discretization of the (kappa_x, kappa_z, omega) domain.

    Upper cutoffs are kappa_u = n_k * dk per spatial axis and
    omega_u = n_w * dw.  ``freq_shift`` (default dw/2) offsets the omega
    samples away from the origin; see the module docstring.
    """

    n_kx: int
    n_kz: int
    n_w: int
    dkx: float
    dkz: float
    dw: float
    freq_shift: float | None = None

    def __post_init__(self):
        if min(self.n_kx, self.n_kz, self.n_w) < 1:
            raise ConfigError("spectral counts must all be >= 1")
        if min(self.dkx, self.dkz, self.dw) <= 0:
            raise ConfigError("spectral increments must all be > 0")
        if self.freq_shift is None:
            object.__setattr__(self, "freq_shift", 0.5 * self.dw)

    @property
    def kappa_u_x(self) -> float:
        return self.n_kx * self.dkx

    @property
    def kappa_u_z(self) -> float:
        return self.n_kz * self.dkz

    @property
    def omega_u(self) -> float:
        return self.n_w * self.dw

    def kx_values(self) -> np.ndarray:
        return self.dkx * np.arange(1, self.n_kx + 1)

    def kz_values(self) -> np.ndarray:
        return self.dkz * np.arange(1, self.n_kz + 1)

    def omega_values(self) -> np.ndarray:
        return self.dw * np.arange(self.n_w) + self.freq_shift

    def max_dt(self) -> float:
        """Largest admissible sampling interval, pi / omega_u."""
        return np.pi / self.omega_u


@dataclass(frozen=True)
class PhaseSet:
    """Four independent uniform-[0, 2pi) phase arrays of shape (n_kx, n_kz, n_w)."""

    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    phi4: np.ndarray

    def __post_init__(self):
        shape = np.asarray(self.phi1).shape
        for name in ("phi1", "phi2", "phi3", "phi4"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if arr.shape != shape or arr.ndim != 3:
                raise ValueError("phase arrays must share one rank-3 shape")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.phi1.shape

    @classmethod
    def draw(cls, sgrid: SpectralGrid, rng: np.random.Generator) -> "PhaseSet":
        shape = (4, sgrid.n_kx, sgrid.n_kz, sgrid.n_w)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=shape)
        return cls(phi[0], phi[1], phi[2], phi[3])


def phase_set_for(sgrid: SpectralGrid, seed: int, index: int) -> PhaseSet:
    """Phases of realization ``index``, addressable without generating 0..index-1."""
    return PhaseSet.draw(sgrid, stream_rng(seed, STREAM_SIMULATE, index))


# ---------------------------------------------------------------------------
# Target spectra
# ---------------------------------------------------------------------------

def davenport_psd(w, p: DavenportParams):
    """Davenport auto-spectrum S0(omega), two-sided, in (m/s)^2 per rad/s.

    Even in omega and undefined at the origin (0/0 from the |omega|
    denominator; the joint spectrum below diverges there), so callers must
    evaluate on a shifted grid.
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w == 0.0):
        raise ValueError("auto-spectrum is singular at omega = 0; evaluate on a shifted frequency grid")
    bw2 = (1200.0 / (2.0 * np.pi * p.u10) * w) ** 2
    out = 2.0 * p.u_star**2 * bw2 / (np.abs(w) * (1.0 + bw2) ** (4.0 / 3.0))
    return out if out.ndim else float(out)


def coherence(xi_x, xi_z, w, p: DavenportParams, c: CoherenceParams):
    """Spatial coherence exp(-|omega| sqrt(c1x^2 xi_x^2 + c1z^2 xi_z^2) / (2 pi u10)).

    Equals 1 at zero separation or zero frequency and decays with both.
    """
    xi_x = np.asarray(xi_x, dtype=np.float64)
    xi_z = np.asarray(xi_z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    radicand = (c.c1x * xi_x) ** 2 + (c.c1z * xi_z) ** 2
    out = np.exp(-np.abs(w) * np.sqrt(radicand) / (2.0 * np.pi * p.u10))
    return out if out.ndim else float(out)


def wavenumber_frequency_psd(kx, kz, w, p: DavenportParams, c: CoherenceParams):
    """Joint wavenumber-frequency spectrum S(kappa_x, kappa_z, omega).

    Closed form of (2 pi)^-2 times the 2D Fourier transform of the
    coherence-weighted auto-spectrum over the separation plane; integrating
    it over all wavenumbers at fixed omega recovers the auto-spectrum.
    Even and non-negative in each argument, singular at omega = 0.
    """
    kx = np.asarray(kx, dtype=np.float64)
    kz = np.asarray(kz, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w == 0.0):
        raise ValueError("joint spectrum is singular at omega = 0; evaluate on a shifted frequency grid")
    cw = np.abs(w) / (2.0 * np.pi * p.u10)
    bw2 = (1200.0 / (2.0 * np.pi * p.u10) * w) ** 2
    q2 = (kx / c.c1x) ** 2 + (kz / c.c1z) ** 2
    out = (
        p.u_star**2 / (np.pi * c.c1x * c.c1z * cw**2)
        * bw2 / (np.abs(w) * (1.0 + bw2) ** (4.0 / 3.0))
        * (1.0 + q2 / cw**2) ** -1.5
    )
    return out if out.ndim else float(out)


def tone_amplitudes(sgrid: SpectralGrid, p: DavenportParams, c: CoherenceParams) -> np.ndarray:
    """Per-node cosine amplitudes sqrt(4 S dk_x dk_z dw), shape (n_kx, n_kz, n_w)."""
    kx = sgrid.kx_values()[:, None, None]
    kz = sgrid.kz_values()[None, :, None]
    w = sgrid.omega_values()[None, None, :]
    s = wavenumber_frequency_psd(kx, kz, w, p, c)
    return np.sqrt(4.0 * s * sgrid.dkx * sgrid.dkz * sgrid.dw)


def theoretical_point_variance(sgrid: SpectralGrid, p: DavenportParams,
                               c: CoherenceParams) -> float:
    """Exact single-point variance of the synthesized field.

    Each of the four cosines at a lattice node has amplitude A and an
    independent uniform phase, so together they contribute 4 * A^2 / 2.
    """
    amp = tone_amplitudes(sgrid, p, c)
    return float(2.0 * np.sum(amp**2))


def target_point_psd(sgrid: SpectralGrid, p: DavenportParams,
                     c: CoherenceParams) -> tuple[np.ndarray, np.ndarray]:
    """One-sided auto-spectrum implied by the discretized lattice.

    Returns (omega samples, density).  Density at omega_k is the variance of
    all lattice nodes with that frequency divided by dw.
    """
    amp = tone_amplitudes(sgrid, p, c)
    density = 2.0 * np.sum(amp**2, axis=(0, 1)) / sgrid.dw
    return sgrid.omega_values(), density


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def srm_field(amplitudes: np.ndarray, sgrid: SpectralGrid, grid: GridSpec,
              phases: PhaseSet) -> np.ndarray:
    """Evaluate the quadruple-cosine superposition on the grid.

    For each lattice node (i, j, k) with amplitude A the four terms are
    cos(kx x + kz z +/- w t + phi), with independent phases per sign
    combination.  Grouping by the sign of (kz, w) turns the sums into
    complex matrix products over the lattice axes.
    """
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    lattice_shape = (sgrid.n_kx, sgrid.n_kz, sgrid.n_w)
    if amplitudes.shape != lattice_shape:
        raise ValueError(f"amplitudes shape {amplitudes.shape} does not match spectral grid {lattice_shape}")
    if phases.shape != lattice_shape:
        raise ValueError(f"phase shape {phases.shape} does not match spectral grid {lattice_shape}")
    if grid.dt > sgrid.max_dt() * (1.0 + 1e-12):
        raise ConfigError(
            f"dt={grid.dt} exceeds pi/omega_u={sgrid.max_dt():.6g}; refine dt or lower the frequency cutoff")

    ex = np.exp(1j * np.outer(grid.x_coords(), sgrid.kx_values()))      # (n_x, n_kx)
    ez = np.exp(1j * np.outer(sgrid.kz_values(), grid.z_coords()))      # (n_kz, n_z)
    et = np.exp(1j * np.outer(sgrid.omega_values(), grid.t_coords()))   # (n_w, n_t)

    def spatial_profile(c_plus, c_minus):
        # sum_ij e^{i kx x} (c_plus e^{i kz z} + c_minus e^{-i kz z}) -> (n_x, n_z, n_w)
        mix = np.tensordot(ex, c_plus, axes=([1], [0]))
        out = np.einsum("xjw,jz->xzw", mix, ez)
        mix = np.tensordot(ex, c_minus, axes=([1], [0]))
        out += np.einsum("xjw,jz->xzw", mix, ez.conj())
        return out

    g_plus = spatial_profile(amplitudes * np.exp(1j * phases.phi1),
                             amplitudes * np.exp(1j * phases.phi3))
    g_minus = spatial_profile(amplitudes * np.exp(1j * phases.phi2),
                              amplitudes * np.exp(1j * phases.phi4))

    flat_plus = g_plus.reshape(grid.n_points, sgrid.n_w)
    flat_minus = g_minus.reshape(grid.n_points, sgrid.n_w)
    values = (flat_plus @ et + flat_minus @ et.conj()).real
    return values.reshape(grid.n_x, grid.n_z, grid.n_t)


def simulate_realization(grid: GridSpec, sgrid: SpectralGrid, p: DavenportParams,
                         c: CoherenceParams, phases: PhaseSet) -> FieldTensor:
    """One velocity-field realization, fully determined by the phases."""
    return FieldTensor(grid, srm_field(tone_amplitudes(sgrid, p, c), sgrid, grid, phases))


@dataclass(frozen=True)
class RealizationEnsemble:
    grid: GridSpec
    sgrid: SpectralGrid
    seed: int
    realizations: tuple[FieldTensor, ...]

    @property
    def size(self) -> int:
        return len(self.realizations)

    def stacked(self) -> np.ndarray:
        """(size, n_x, n_z, n_t) view of all realizations."""
        return np.stack([f.values for f in self.realizations])


def simulate_ensemble(grid: GridSpec, sgrid: SpectralGrid, p: DavenportParams,
                      c: CoherenceParams, ensemble_size: int, seed: int,
                      threads: int = 1) -> RealizationEnsemble:
    """Generate independent realizations from per-index phase streams.

    Realization r always uses the phase stream (seed, r), so results do not
    depend on the thread count and any single realization can be regenerated
    in isolation.
    """
    if ensemble_size < 1:
        raise ConfigError("ensemble_size must be >= 1")
    amplitudes = tone_amplitudes(sgrid, p, c)

    def one(index: int) -> FieldTensor:
        phases = phase_set_for(sgrid, seed, index)
        return FieldTensor(grid, srm_field(amplitudes, sgrid, grid, phases))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fields = list(pool.map(one, range(ensemble_size)))
    else:
        fields = [one(i) for i in range(ensemble_size)]
    return RealizationEnsemble(grid, sgrid, seed, tuple(fields))


def simulation_params_doc(grid: GridSpec, sgrid: SpectralGrid, p: DavenportParams,
                          c: CoherenceParams) -> dict:
    """Physical parameter summary emitted next to simulated ensembles."""
    return {
        "T0": grid.duration,
        "wu": sgrid.omega_u,
        "dt": grid.dt,
        "dw": sgrid.dw,
        "ku_x": sgrid.kappa_u_x,
        "ku_z": sgrid.kappa_u_z,
        "dk_x": sgrid.dkx,
        "dk_z": sgrid.dkz,
        "freq_shift": sgrid.freq_shift,
        "C1x": c.c1x,
        "C1z": c.c1z,
        "U10": p.u10,
        "u_star": p.u_star,
    }
