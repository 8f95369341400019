"""Sparse dictionary learning of space-time blocks with a beta-Bernoulli
prior, inferred by Gibbs sampling.

The field is cut into overlapping spatial blocks that keep the full time
history, so each block vector has P = m_x * m_z * n_t entries.  Block i is
modeled as y_i = Sigma_i (D (z_i . s_i) + eps_i), where Sigma_i selects the
observed entries, D holds K dictionary atoms with N(0, P^-1 I) priors, the
binary supports z_ik are Bernoulli(pi_k) with pi_k ~ Beta(a/K, b(K-1)/K),
the weights s_ik are N(0, 1/gamma_s), and the noise precision gamma_eps and
weight precision gamma_s carry Gamma priors.  All six conditionals are
conjugate and sampled exactly; overlapping block reconstructions are
recombined by uniform per-point averaging, and the posterior mean/variance
per grid point are accumulated over the post-burn-in sweeps.

Gamma convention throughout: Gamma(shape, rate), mean = shape / rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import (
    STREAM_BPFA_CHAIN,
    STREAM_BPFA_INIT,
    ConfigError,
    FieldTensor,
    GridSpec,
    NumericalError,
    ObservationMask,
    flatten_values,
    stream_rng,
    unflatten_values,
)

GAMMA_CONVENTION = "shape-rate"

#: Precisions drawn from near-improper Gamma priors (e.g. shape = rate = 1e-6)
#: underflow to zero almost surely; initialization clamps into this range.
_PRECISION_INIT_RANGE = (1e-8, 1e8)


@dataclass(frozen=True)
class VoxelPartition:
    """Overlapping m_x-by-m_z spatial blocks carrying the whole time axis.

    The block lattice must tile exactly: (n_x - m_x) and (n_z - m_z) have to
    be divisible by the strides.  Block b sits at origin
    (b // n_bz * stride_x, b % n_bz * stride_z); entries inside a block are
    ordered t fastest, then local x, then local z, matching the global
    vectorization convention.
    """

    grid: GridSpec
    m_x: int
    m_z: int
    stride_x: int
    stride_z: int

    def __post_init__(self):
        if not (1 <= self.m_x <= self.grid.n_x and 1 <= self.m_z <= self.grid.n_z):
            raise ValueError("block sizes must satisfy 1 <= m <= grid extent")
        if self.stride_x < 1 or self.stride_z < 1:
            raise ValueError("strides must be >= 1")
        for span, stride, axis in (((self.grid.n_x - self.m_x), self.stride_x, "x"),
                                   ((self.grid.n_z - self.m_z), self.stride_z, "z")):
            if span % stride != 0:
                valid = [s for s in range(1, span + 1) if span % s == 0] or [1]
                raise ValueError(
                    f"{axis}-stride {stride} does not tile the grid exactly; "
                    f"valid strides for this geometry: {valid}")

    @property
    def n_bx(self) -> int:
        return (self.grid.n_x - self.m_x) // self.stride_x + 1

    @property
    def n_bz(self) -> int:
        return (self.grid.n_z - self.m_z) // self.stride_z + 1

    @property
    def n_total(self) -> int:
        return self.n_bx * self.n_bz

    @property
    def block_size(self) -> int:
        """Entries per block vector, P = m_x * m_z * n_t."""
        return self.m_x * self.m_z * self.grid.n_t

    def block_origin(self, b: int) -> tuple[int, int]:
        if not 0 <= b < self.n_total:
            raise IndexError(f"block index {b} out of range")
        return (b // self.n_bz) * self.stride_x, (b % self.n_bz) * self.stride_z

    def block_entry_indices(self, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global (ix, iz, it) indices of block b's P entries, in block order."""
        ox, oz = self.block_origin(b)
        shape = (self.m_x, self.m_z, self.grid.n_t)
        ix = flatten_values(np.broadcast_to(np.arange(ox, ox + self.m_x)[:, None, None], shape).astype(float))
        iz = flatten_values(np.broadcast_to(np.arange(oz, oz + self.m_z)[None, :, None], shape).astype(float))
        it = flatten_values(np.broadcast_to(np.arange(self.grid.n_t)[None, None, :], shape).astype(float))
        return ix.astype(int), iz.astype(int), it.astype(int)

    def point_cover_counts(self) -> np.ndarray:
        """(n_x, n_z) count of blocks covering each point."""
        counts = np.zeros((self.grid.n_x, self.grid.n_z))
        for b in range(self.n_total):
            ox, oz = self.block_origin(b)
            counts[ox:ox + self.m_x, oz:oz + self.m_z] += 1.0
        return counts


def make_partition(grid: GridSpec, m_x: int, m_z: int,
                   stride_x: int = 1, stride_z: int = 1) -> VoxelPartition:
    return VoxelPartition(grid, m_x, m_z, stride_x, stride_z)


@dataclass(frozen=True)
class BPFAHyperparams:
    """Prior parameters, truncation level and chain lengths.

    a, b parameterize the Beta prior on atom-usage probabilities; (c, d) and
    (e, f) are shape/rate pairs of the Gamma priors on the weight and noise
    precisions.  The defaults 1e-6 make those priors nearly flat.
    """

    a: float = 1.0
    b: float = 1.0
    c: float = 1e-6
    d: float = 1e-6
    e: float = 1e-6
    f: float = 1e-6
    n_atoms: int = 512
    n_burnin: int = 100
    n_samples: int = 100

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d, self.e, self.f) <= 0:
            raise ConfigError("all prior parameters must be > 0")
        if self.n_atoms < 1:
            raise ConfigError("n_atoms must be >= 1")
        if self.n_burnin < 0 or self.n_samples < 1:
            raise ConfigError("need n_burnin >= 0 and n_samples >= 1")


@dataclass
class GibbsState:
    """Latent state: dictionary, supports, weights, usage probabilities, precisions."""

    D: np.ndarray        # (P, K)
    Z: np.ndarray        # (n_total, K) bool
    S: np.ndarray        # (n_total, K)
    pi: np.ndarray       # (K,)
    gamma_s: float
    gamma_eps: float

    @property
    def n_atoms(self) -> int:
        return self.D.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Effective coefficients w = z . s, shape (n_total, K)."""
        return self.S * self.Z


@dataclass
class BlockData:
    """Vectorized blocks with their observation selectors.

    ``yobs[i]`` holds Sigma_i^T y_i: observed values at their in-block
    positions, zeros elsewhere.  ``omask[i]`` is the diagonal of
    Sigma_i^T Sigma_i.  ``counts[i]`` is the number of observed entries.
    """

    yobs: np.ndarray     # (n_total, P)
    omask: np.ndarray    # (n_total, P) bool
    counts: np.ndarray   # (n_total,) int
    partition: VoxelPartition

    @property
    def n_total(self) -> int:
        return self.yobs.shape[0]

    @property
    def block_size(self) -> int:
        return self.yobs.shape[1]

    def selector_matrix(self, b: int) -> np.ndarray:
        """Explicit row-selection operator Sigma_b of shape (counts[b], P)."""
        idx = np.flatnonzero(self.omask[b])
        sel = np.zeros((idx.size, self.block_size))
        sel[np.arange(idx.size), idx] = 1.0
        return sel


def extract_voxels(fieldt: FieldTensor, mask: ObservationMask,
                   partition: VoxelPartition) -> BlockData:
    """Cut the field into vectorized blocks and record what is observed."""
    if partition.grid != fieldt.grid:
        raise ValueError("partition grid does not match field grid")
    if mask.grid != fieldt.grid:
        raise ValueError("mask grid does not match field grid")
    entry_mask = mask.entry_mask()
    n, p = partition.n_total, partition.block_size
    yobs = np.zeros((n, p))
    omask = np.zeros((n, p), dtype=bool)
    for b in range(n):
        ox, oz = partition.block_origin(b)
        sl = (slice(ox, ox + partition.m_x), slice(oz, oz + partition.m_z), slice(None))
        omask[b] = flatten_values(entry_mask[sl].astype(np.float64)) > 0.5
        yobs[b] = flatten_values(fieldt.values[sl])
    yobs[~omask] = 0.0
    return BlockData(yobs=yobs, omask=omask, counts=omask.sum(axis=1), partition=partition)


def _guarded_precision_draw(rng: np.random.Generator, shape: float, rate: float) -> float:
    """Draw from Gamma(shape, rate), falling back to the prior mean.

    Near-improper priors (shape = rate = 1e-6) put almost all mass below
    the subnormal range, so an underflowing draw is replaced by the prior
    mean; the result is clamped into a numerically workable range.
    """
    lo, hi = _PRECISION_INIT_RANGE
    draw = float(rng.gamma(shape, 1.0 / rate))
    if not np.isfinite(draw) or draw < lo:
        draw = shape / rate
    return float(np.clip(draw, lo, hi))


def _prior_pi(hyper: BPFAHyperparams, rng: np.random.Generator) -> np.ndarray:
    k = hyper.n_atoms
    if k == 1:
        return np.ones(1)  # Beta second parameter degenerates to 0: mass at 1
    return rng.beta(hyper.a / k, hyper.b * (k - 1) / k, size=k)


def init_state(hyper: BPFAHyperparams, partition: VoxelPartition, seed: int,
               stream_index: int = 0) -> GibbsState:
    """Draw an initial state from the priors (deterministic given the seed).

    Atoms come from N(0, P^-1 I), pi from its Beta prior, supports from
    Bernoulli(pi), weights from N(0, 1/gamma_s), precisions from their
    Gamma priors (with the underflow guard of near-improper priors).
    """
    rng = stream_rng(seed, STREAM_BPFA_INIT, stream_index)
    p, n, k = partition.block_size, partition.n_total, hyper.n_atoms
    d = rng.standard_normal((p, k)) / np.sqrt(p)
    pi = _prior_pi(hyper, rng)
    z = rng.random((n, k)) < pi[None, :]
    gamma_s = _guarded_precision_draw(rng, hyper.c, hyper.d)
    s = rng.standard_normal((n, k)) / np.sqrt(gamma_s)
    gamma_eps = _guarded_precision_draw(rng, hyper.e, hyper.f)
    return GibbsState(D=d, Z=z, S=s, pi=pi, gamma_s=gamma_s, gamma_eps=gamma_eps)


def warm_start_state(hyper: BPFAHyperparams, data: BlockData, seed: int,
                     stream_index: int = 0) -> GibbsState:
    """Data-informed chain start (does not change the stationary law).

    Atoms are unit-normalized observed block vectors (plus tiny jitter);
    supports and weights then come from one pass of their exact
    conditionals.  With whole-time-history blocks the atom prior precision
    P far exceeds the per-atom likelihood weight, so a pure prior start
    sits in a metastable underfit mode and wastes the whole burn-in; the
    warm start enters the fitting regime immediately.
    """
    rng = stream_rng(seed, STREAM_BPFA_INIT, stream_index)
    p, n, k = data.block_size, data.n_total, hyper.n_atoms
    pi = _prior_pi(hyper, rng)
    gamma_s = _guarded_precision_draw(rng, hyper.c, hyper.d)
    gamma_eps = _guarded_precision_draw(rng, hyper.e, hyper.f)
    cols = rng.integers(0, n, size=k)
    d = data.yobs[cols].T.copy()
    norms = np.linalg.norm(d, axis=0)
    norms[norms == 0.0] = 1.0
    d = d / norms + 1e-3 * rng.standard_normal((p, k)) / np.sqrt(p)
    s = rng.standard_normal((n, k)) / np.sqrt(gamma_s)
    state = GibbsState(D=d, Z=np.zeros((n, k), dtype=bool), S=s, pi=pi,
                       gamma_s=gamma_s, gamma_eps=gamma_eps)
    ws = _Workspace(state, data)
    sample_supports(state, data, rng, ws)
    sample_weights(state, data, rng, ws)
    return state


class _Workspace:
    """Residual bookkeeping shared by the sweep updates.

    ``resid[i]`` = Sigma_i^T y_i - diag(o_i) D (z_i . s_i) is kept current
    after every atom update; ``w`` mirrors state.Z * state.S.
    """

    def __init__(self, state: GibbsState, data: BlockData):
        self.ofloat = data.omask.astype(np.float64)
        self.w = state.weights
        self.resid = data.yobs - self.ofloat * (self.w @ state.D.T)


def _atom_stats(state: GibbsState, ws: _Workspace, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-block (q_i, r_i) for atom k.

    q_i = d_k' diag(o_i) d_k and r_i = d_k' x_i^{-k}, where x_i^{-k} is the
    observed-entry residual with atom k's own contribution added back.
    """
    d = state.D[:, k]
    q = ws.ofloat @ (d * d)
    r = ws.resid @ d + ws.w[:, k] * q
    return q, r


# ---------------------------------------------------------------------------
# Conditional parameters (exercised directly by the correctness tests)
# ---------------------------------------------------------------------------

def dictionary_conditional(state: GibbsState, data: BlockData, k: int,
                           ws: _Workspace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (diagonal) variance of the atom-k Gaussian conditional.

    The covariance (P I + gamma_eps sum_i w_ik^2 diag(o_i))^-1 is diagonal,
    so it is returned as a variance vector.
    """
    ws = ws if ws is not None else _Workspace(state, data)
    p = data.block_size
    wk = ws.w[:, k]
    a = (wk * wk) @ ws.ofloat
    prec = p + state.gamma_eps * a
    xw = wk @ ws.resid + a * state.D[:, k]
    return state.gamma_eps * xw / prec, 1.0 / prec


def support_probabilities(state: GibbsState, data: BlockData, k: int,
                          ws: _Workspace | None = None) -> np.ndarray:
    """P(z_ik = 1 | -) for every block, computed in log space.

    p1 = pi_k exp(-gamma_eps/2 (s_ik^2 q_i - 2 s_ik r_i)), p0 = 1 - pi_k.
    """
    ws = ws if ws is not None else _Workspace(state, data)
    q, r = _atom_stats(state, ws, k)
    s = state.S[:, k]
    with np.errstate(divide="ignore"):
        log_p1 = np.log(state.pi[k]) - 0.5 * state.gamma_eps * (s * s * q - 2.0 * s * r)
        log_p0 = np.log1p(-state.pi[k])
    return expit(log_p1 - log_p0)


def weight_conditional(state: GibbsState, data: BlockData, k: int,
                       ws: _Workspace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the scalar weight conditionals for atom k.

    variance = 1 / (gamma_s + gamma_eps z_ik q_i),
    mean = gamma_eps * variance * z_ik * r_i; with z_ik = 0 this is exactly
    the N(0, 1/gamma_s) prior.
    """
    ws = ws if ws is not None else _Workspace(state, data)
    q, r = _atom_stats(state, ws, k)
    z = state.Z[:, k].astype(np.float64)
    var = 1.0 / (state.gamma_s + state.gamma_eps * z * q)
    return state.gamma_eps * var * z * r, var


def pi_conditional(state: GibbsState, hyper: BPFAHyperparams) -> tuple[np.ndarray, np.ndarray]:
    """Beta(alpha_k, beta_k) parameters of the usage-probability conditionals."""
    k = state.n_atoms
    counts = state.Z.sum(axis=0).astype(np.float64)
    alpha = hyper.a / k + counts
    beta = hyper.b * (k - 1) / k + state.Z.shape[0] - counts
    return alpha, beta


def precision_conditionals(state: GibbsState, data: BlockData, hyper: BPFAHyperparams,
                           ws: _Workspace | None = None) -> tuple[float, float, float, float]:
    """(shape_s, rate_s, shape_eps, rate_eps) of the two Gamma conditionals."""
    ws = ws if ws is not None else _Workspace(state, data)
    shape_s = hyper.c + 0.5 * state.n_atoms * data.n_total
    rate_s = hyper.d + 0.5 * float(np.sum(state.S * state.S))
    shape_eps = hyper.e + 0.5 * float(np.sum(data.counts))
    rate_eps = hyper.f + 0.5 * float(np.sum(ws.resid * ws.resid))
    return shape_s, rate_s, shape_eps, rate_eps


# ---------------------------------------------------------------------------
# Sweep updates (mutate state and workspace in place)
# ---------------------------------------------------------------------------

def sample_dictionary(state: GibbsState, data: BlockData, rng: np.random.Generator,
                      ws: _Workspace | None = None) -> _Workspace:
    """Resample every atom from its Gaussian conditional (sequential in k)."""
    ws = ws if ws is not None else _Workspace(state, data)
    p = data.block_size
    for k in range(state.n_atoms):
        noise = rng.standard_normal(p)
        wk = ws.w[:, k]
        active = np.flatnonzero(wk)
        if active.size:
            wa = wk[active]
            a = (wa * wa) @ ws.ofloat[active]
            prec = p + state.gamma_eps * a
            mean = state.gamma_eps * (wa @ ws.resid[active] + a * state.D[:, k]) / prec
            new_d = mean + noise / np.sqrt(prec)
            ws.resid[active] -= (wa[:, None] * (new_d - state.D[:, k])[None, :]) * ws.ofloat[active]
            state.D[:, k] = new_d
        else:
            # No block uses the atom: conditional reduces to the prior.
            state.D[:, k] = noise / np.sqrt(p)
    return ws


def sample_supports(state: GibbsState, data: BlockData, rng: np.random.Generator,
                    ws: _Workspace | None = None) -> _Workspace:
    """Resample all supports from their Bernoulli conditionals."""
    ws = ws if ws is not None else _Workspace(state, data)
    n = data.n_total
    for k in range(state.n_atoms):
        prob = support_probabilities(state, data, k, ws)
        new_z = rng.random(n) < prob
        delta_w = new_z * state.S[:, k] - ws.w[:, k]
        changed = np.flatnonzero(delta_w)
        if changed.size:
            d = state.D[:, k]
            ws.resid[changed] -= delta_w[changed, None] * (d[None, :] * ws.ofloat[changed])
            ws.w[:, k] = new_z * state.S[:, k]
        state.Z[:, k] = new_z
    return ws


def sample_weights(state: GibbsState, data: BlockData, rng: np.random.Generator,
                   ws: _Workspace | None = None) -> _Workspace:
    """Resample all weights from their scalar Gaussian conditionals."""
    ws = ws if ws is not None else _Workspace(state, data)
    n = data.n_total
    for k in range(state.n_atoms):
        mean, var = weight_conditional(state, data, k, ws)
        new_s = mean + rng.standard_normal(n) * np.sqrt(var)
        z = state.Z[:, k].astype(np.float64)
        delta_w = z * new_s - ws.w[:, k]
        changed = np.flatnonzero(delta_w)
        if changed.size:
            d = state.D[:, k]
            ws.resid[changed] -= delta_w[changed, None] * (d[None, :] * ws.ofloat[changed])
            ws.w[:, k] = z * new_s
        state.S[:, k] = new_s
    return ws


def sample_pi(state: GibbsState, hyper: BPFAHyperparams, rng: np.random.Generator) -> None:
    """Resample usage probabilities from their Beta conditionals."""
    alpha, beta = pi_conditional(state, hyper)
    degenerate = beta <= 0.0  # only possible for K = 1 with every block active
    pi = rng.beta(alpha, np.where(degenerate, 1.0, beta))
    pi[degenerate] = 1.0
    state.pi = pi


def sample_precisions(state: GibbsState, data: BlockData, hyper: BPFAHyperparams,
                      rng: np.random.Generator, ws: _Workspace | None = None) -> None:
    """Resample gamma_s and gamma_eps from their Gamma(shape, rate) conditionals."""
    ws = ws if ws is not None else _Workspace(state, data)
    shape_s, rate_s, shape_eps, rate_eps = precision_conditionals(state, data, hyper, ws)
    state.gamma_s = float(rng.gamma(shape_s, 1.0 / rate_s))
    state.gamma_eps = float(rng.gamma(shape_eps, 1.0 / rate_eps))


# ---------------------------------------------------------------------------
# Chain driver and reconstruction
# ---------------------------------------------------------------------------

def reconstruct_blocks(state: GibbsState) -> np.ndarray:
    """Full (unmasked) block reconstructions D (z_i . s_i), shape (n_total, P)."""
    return state.weights @ state.D.T


def recombine_blocks(block_values: np.ndarray, partition: VoxelPartition) -> np.ndarray:
    """Average overlapping block reconstructions back onto the grid.

    Every block covering a point contributes with uniform weight.
    """
    grid = partition.grid
    out = np.zeros(grid.shape)
    shape = (partition.m_x, partition.m_z, grid.n_t)
    for b in range(partition.n_total):
        ox, oz = partition.block_origin(b)
        out[ox:ox + partition.m_x, oz:oz + partition.m_z, :] += unflatten_values(block_values[b], shape)
    return out / partition.point_cover_counts()[:, :, None]


@dataclass
class PosteriorSummary:
    """Per-point posterior mean and variance plus per-sweep diagnostics.

    Traces cover every sweep (burn-in included); the mean/variance fields
    aggregate only the post-burn-in samples.  Variance is the population
    variance over those samples.
    """

    mean_field: FieldTensor
    var_field: FieldTensor
    noise_precision_trace: np.ndarray
    weight_precision_trace: np.ndarray
    active_atoms_trace: np.ndarray
    n_burnin: int
    n_samples: int


def run_chain(fieldt: FieldTensor, mask: ObservationMask, partition: VoxelPartition,
              hyper: BPFAHyperparams, seed: int, stream_index: int = 0,
              init: str = "warm") -> PosteriorSummary:
    """Run the full Gibbs chain and accumulate the posterior reconstruction.

    Sweep order: dictionary, supports, weights, pi, precisions.  After
    burn-in, each sweep's recombined reconstruction feeds the running
    per-point mean and variance.  ``init`` selects the chain start:
    ``"warm"`` (data-informed, the default) or ``"prior"``.  Non-finite
    state raises :class:`NumericalError` with the sweep index.
    """
    data = extract_voxels(fieldt, mask, partition)
    if init == "warm":
        state = warm_start_state(hyper, data, seed, stream_index)
    elif init == "prior":
        state = init_state(hyper, partition, seed, stream_index)
    else:
        raise ValueError(f"init must be 'warm' or 'prior', got {init!r}")
    ws = _Workspace(state, data)
    rng = stream_rng(seed, STREAM_BPFA_CHAIN, stream_index)

    grid = fieldt.grid
    total = hyper.n_burnin + hyper.n_samples
    mean_acc = np.zeros(grid.shape)
    sq_acc = np.zeros(grid.shape)
    trace_eps = np.empty(total)
    trace_s = np.empty(total)
    trace_active = np.empty(total, dtype=int)

    for sweep in range(total):
        sample_dictionary(state, data, rng, ws)
        sample_supports(state, data, rng, ws)
        sample_weights(state, data, rng, ws)
        sample_pi(state, hyper, rng)
        sample_precisions(state, data, hyper, rng, ws)
        if not (np.isfinite(state.gamma_s) and np.isfinite(state.gamma_eps)
                and np.all(np.isfinite(ws.resid))):
            raise NumericalError(f"Gibbs state diverged at sweep {sweep}")
        trace_eps[sweep] = state.gamma_eps
        trace_s[sweep] = state.gamma_s
        trace_active[sweep] = int(state.Z.any(axis=0).sum())
        if sweep >= hyper.n_burnin:
            recon = recombine_blocks(reconstruct_blocks(state), partition)
            mean_acc += recon
            sq_acc += recon * recon

    mean = mean_acc / hyper.n_samples
    var = np.clip(sq_acc / hyper.n_samples - mean * mean, 0.0, None)
    return PosteriorSummary(
        mean_field=FieldTensor(grid, mean),
        var_field=FieldTensor(grid, var),
        noise_precision_trace=trace_eps,
        weight_precision_trace=trace_s,
        active_atoms_trace=trace_active,
        n_burnin=hyper.n_burnin,
        n_samples=hyper.n_samples,
    )
