"""Ensemble estimators and error/uncertainty diagnostics.

Spectral densities are mean periodograms over the ensemble, normalized so
the density integrates (sum times the frequency step) to the average sample
variance.  Coherence is a Welch-style cross/auto spectral ratio averaged
over segments and ensemble members.  Distribution discrepancies use the
Hellinger distance over shared histogram bins.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .core import ObservationMask

_COHERENCE_SEGMENTS = 8


@dataclass(frozen=True)
class PsdEstimate:
    """One-sided spectral density over angular frequency (rad/s)."""

    frequencies: np.ndarray
    density: np.ndarray
    n_ensemble: int
    point: tuple[int, int] | None = None

    @property
    def domega(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])


def _as_records(records) -> np.ndarray:
    arr = np.asarray(records, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("records must be a time series or a stack of equal-length time series")
    return arr


def ensemble_psd(records, dt: float, point: tuple[int, int] | None = None) -> PsdEstimate:
    """Mean periodogram of demeaned records.

    Normalization: sum(density) * (2 pi / (n_t dt)) equals the ensemble
    average of the biased sample variance, exactly (discrete Parseval).
    """
    arr = _as_records(records)
    if dt <= 0:
        raise ValueError("dt must be > 0")
    n_rec, n_t = arr.shape
    if n_t < 2:
        raise ValueError("records must have at least 2 samples")
    demeaned = arr - arr.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(demeaned, axis=1)
    density = (np.abs(spec) ** 2).mean(axis=0) * dt / (2.0 * np.pi * n_t)
    # One-sided doubling: every bin except DC and (for even n_t) Nyquist.
    double = np.full(density.shape, 2.0)
    double[0] = 1.0
    if n_t % 2 == 0:
        double[-1] = 1.0
    density = density * double
    freqs = 2.0 * np.pi * np.fft.rfftfreq(n_t, dt)
    return PsdEstimate(frequencies=freqs, density=density, n_ensemble=n_rec, point=point)


def cross_correlation(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble-averaged biased cross-correlation, unit-normalized at zero lag.

    Returns (lags, rho) with rho(l) estimating E[a(n) b(n+l)] normalized by
    the joint standard deviations, so rho peaks at lag k when b lags a by k
    samples.
    """
    a = _as_records(a)
    b = _as_records(b)
    if a.shape != b.shape:
        raise ValueError("record sets must have equal shapes")
    n_rec, n_t = a.shape
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    var_a = float((da * da).sum() / (n_rec * n_t))
    var_b = float((db * db).sum() / (n_rec * n_t))
    if var_a == 0.0 or var_b == 0.0:
        raise ValueError("zero-variance input")
    acc = np.zeros(2 * n_t - 1)
    for i in range(n_rec):
        # full correlation of (b, a): index l-(n_t-1) estimates E[a(n) b(n+l)]
        acc += np.correlate(db[i], da[i], mode="full")
    rho = acc / (n_rec * n_t * np.sqrt(var_a * var_b))
    lags = np.arange(-(n_t - 1), n_t)
    return lags, rho


def cross_coherence(a, b, dt: float,
                    n_segments: int = _COHERENCE_SEGMENTS) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude-squared coherence averaged over segments and ensemble.

    Requires at least two realizations (a single realization without
    averaging gives coherence identically 1, carrying no information).
    Records are split into ``n_segments`` contiguous Hann-windowed segments;
    the zero-frequency bin is dropped because segments are demeaned.
    """
    a = _as_records(a)
    b = _as_records(b)
    if a.shape != b.shape:
        raise ValueError("record sets must have equal shapes")
    n_rec, n_t = a.shape
    if n_rec < 2:
        raise ValueError("coherence needs an ensemble of >= 2 realizations; "
                         "a single pair averages to 1 identically")
    seg = n_t // n_segments
    if seg < 4:
        raise ValueError(f"records too short for {n_segments}-segment averaging")
    window = np.hanning(seg)
    s_ab = 0.0
    s_aa = 0.0
    s_bb = 0.0
    for i in range(n_rec):
        for j in range(n_segments):
            xa = a[i, j * seg:(j + 1) * seg]
            xb = b[i, j * seg:(j + 1) * seg]
            fa = np.fft.rfft((xa - xa.mean()) * window)
            fb = np.fft.rfft((xb - xb.mean()) * window)
            s_ab = s_ab + np.conj(fa) * fb
            s_aa = s_aa + np.abs(fa) ** 2
            s_bb = s_bb + np.abs(fb) ** 2
    freqs = 2.0 * np.pi * np.fft.rfftfreq(seg, dt)
    denom = s_aa * s_bb
    with np.errstate(invalid="ignore", divide="ignore"):
        coh = np.where(denom > 0, np.abs(s_ab) ** 2 / denom, 0.0)
    return freqs[1:], np.clip(coh[1:], 0.0, 1.0)


@dataclass(frozen=True)
class HistogramPdf:
    """Probability masses over shared bin edges (normalized to sum 1)."""

    bin_edges: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if edges.ndim != 1 or probs.ndim != 1 or edges.size != probs.size + 1:
            raise ValueError("need n+1 bin edges for n probabilities")
        if np.any(probs < 0):
            raise ValueError("probabilities must be >= 0")
        total = probs.sum()
        if total <= 0:
            raise ValueError("probabilities must have positive mass")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "probabilities", probs / total)


def shared_histogram_pair(x, y) -> tuple[HistogramPdf, HistogramPdf]:
    """Histogram both samples on Freedman-Diaconis bins of their union."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    pooled = np.concatenate([x, y])
    if pooled.size == 0:
        raise ValueError("empty samples")
    if np.ptp(pooled) == 0.0:
        center = pooled[0]
        edges = np.array([center - 0.5, center + 0.5])
    else:
        edges = np.histogram_bin_edges(pooled, bins="fd")
        if edges.size < 2:
            edges = np.histogram_bin_edges(pooled, bins=1)
    px, _ = np.histogram(x, bins=edges)
    py, _ = np.histogram(y, bins=edges)
    return HistogramPdf(edges, px.astype(float)), HistogramPdf(edges, py.astype(float))


def hellinger(p: HistogramPdf, q: HistogramPdf) -> float:
    """Hellinger distance (1/sqrt(2)) ||sqrt(p) - sqrt(q)||_2 in [0, 1]."""
    if not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share identical bin edges")
    dist = np.linalg.norm(np.sqrt(p.probabilities) - np.sqrt(q.probabilities)) / np.sqrt(2.0)
    return float(min(dist, 1.0))


@dataclass
class ErrorReport:
    """Per-missing-point reconstruction diagnostics.

    ``l1_error`` is the mean absolute deviation over time (and realizations);
    ``hellinger`` compares the pooled amplitude distributions; variance and
    the error/variance Spearman rank correlation are present only when a
    posterior variance is supplied.
    """

    points: list[tuple[int, int]]
    l1_error: np.ndarray
    hellinger: np.ndarray
    posterior_variance: np.ndarray | None
    spearman: float | None


def _stacked(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None, ...]
    if arr.ndim != 4:
        raise ValueError("expected (n_x, n_z, n_t) or a stack (n_real, n_x, n_z, n_t)")
    return arr


def error_report(truth, reconstruction, posterior_variance,
                 mask: ObservationMask) -> ErrorReport:
    """Evaluate reconstructions at the missing points only.

    ``truth``/``reconstruction`` accept one field or a stack of realizations;
    ``posterior_variance`` may be None (e.g. for the matrix-completion
    route).  Raises when no point is missing.
    """
    truth = _stacked(truth)
    recon = _stacked(reconstruction)
    if truth.shape != recon.shape:
        raise ValueError("truth and reconstruction shapes differ")
    if truth.shape[1:3] != (mask.grid.n_x, mask.grid.n_z):
        raise ValueError("fields do not match the mask grid")
    points = mask.missing_points()
    if not points:
        raise ValueError("no missing points to evaluate")
    var = None
    if posterior_variance is not None:
        var = _stacked(posterior_variance)
        if var.shape[1:3] != (mask.grid.n_x, mask.grid.n_z):
            raise ValueError("posterior variance does not match the mask grid")

    l1 = np.empty(len(points))
    hell = np.empty(len(points))
    pvar = np.empty(len(points)) if var is not None else None
    for idx, (ix, iz) in enumerate(points):
        diff = np.abs(truth[:, ix, iz, :] - recon[:, ix, iz, :])
        l1[idx] = diff.mean()
        p_true, p_rec = shared_histogram_pair(truth[:, ix, iz, :], recon[:, ix, iz, :])
        hell[idx] = hellinger(p_true, p_rec)
        if pvar is not None:
            pvar[idx] = var[:, ix, iz, :].mean()

    spearman = None
    if pvar is not None:
        if len(points) >= 2:
            spearman = float(sps.spearmanr(l1, pvar).statistic)
        else:
            spearman = float("nan")
    return ErrorReport(points=points, l1_error=l1, hellinger=hell,
                       posterior_variance=pvar, spearman=spearman)


def write_gnuplot_script(path, csv_path, columns: tuple[int, int] = (1, 2),
                         title: str = "") -> None:
    """Emit a minimal gnuplot script plotting one CSV column pair."""
    csv_name = Path(csv_path).name
    text = "\n".join([
        "set datafile separator ','",
        f"set title '{title or csv_name}'",
        "set key off",
        f"plot '{csv_name}' using {columns[0]}:{columns[1]} with lines",
        "",
    ])
    Path(path).write_text(text)
