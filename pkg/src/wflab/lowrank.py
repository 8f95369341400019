"""Nuclear-norm matrix completion via an augmented Lagrangian iteration.

A partially observed matrix is completed by minimizing the nuclear norm
subject to agreement on the observed entries, with a discrepancy matrix E
supported on the unobserved set absorbing the unknowns.  Each iteration
shrinks the singular values of (M - E + Lambda/mu), projects the residual
onto the unobserved set to update E, then updates the multipliers and grows
the penalty.  A space-time field is completed by solving one such problem
per time slice.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, FieldTensor, NumericalError, ObservationMask


@dataclass(frozen=True)
class ALMParams:
    """Solver knobs.

    ``mu0=None`` scales the initial penalty to 1/||M||_2, matching common
    practice for this family of solvers; ``tol`` bounds the relative
    Frobenius residual ||M - Y - E||_F / ||M||_F.  Each outer iteration
    solves its (Y, E) subproblem by alternating shrinkage/projection passes
    until the Y-update stalls below ``inner_tol`` (relative Frobenius);
    a single pass per multiplier update converges to a feasible but
    suboptimal point and leaves the unobserved entries unrecovered.
    """

    mu0: float | None = None
    rho: float = 1.5
    tol: float = 1e-7
    max_iter: int = 500
    inner_tol: float = 1e-7
    max_inner: int = 200

    def __post_init__(self):
        if self.mu0 is not None and self.mu0 <= 0:
            raise ConfigError("mu0 must be > 0 (or None for 1/||M||_2)")
        if self.rho <= 1:
            raise ConfigError("rho must be > 1")
        if self.tol <= 0:
            raise ConfigError("tol must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.inner_tol <= 0 or self.max_inner < 1:
            raise ConfigError("need inner_tol > 0 and max_inner >= 1")


@dataclass
class CompletionResult:
    """Outcome of one completion solve.

    ``completed`` agrees with the observed entries to within tol (relative);
    ``discrepancy`` is zero on the observed set by construction.
    Non-convergence is reported through ``converged``, not raised, so
    slice-by-slice pipelines finish and flag.
    """

    completed: np.ndarray
    discrepancy: np.ndarray
    iterations: int
    residual_trace: np.ndarray
    converged: bool


def soft_threshold(x, eps):
    """Shrink toward zero: x -> sign(x) * max(|x| - eps, 0)."""
    if np.any(np.asarray(eps) < 0):
        raise ValueError("threshold must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - eps, 0.0)
    return out if out.ndim else float(out)


def nuclear_norm(y: np.ndarray) -> float:
    """Sum of singular values."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("matrix entries must be finite")
    try:
        return float(np.linalg.svd(y, compute_uv=False).sum())
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc


def alm_complete(observed: np.ndarray, mask: np.ndarray,
                 params: ALMParams = ALMParams()) -> CompletionResult:
    """Complete a matrix from entries marked True in ``mask``.

    Unobserved entries of ``observed`` are ignored (treated as zero inside
    the iteration, with E absorbing them).  A fully observed matrix is
    returned unchanged at the first convergence check.
    """
    m = np.asarray(observed, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.shape != mask.shape:
        raise ValueError("observed and mask must be 2-d arrays of equal shape")
    if not mask.any():
        raise ValueError("no observations")

    m = np.where(mask, m, 0.0)
    if mask.all():
        return CompletionResult(completed=m, discrepancy=np.zeros_like(m),
                                iterations=0, residual_trace=np.zeros(1), converged=True)

    norm_m = np.linalg.norm(m, "fro")
    if norm_m == 0.0:
        # All observed entries are zero; the zero matrix is already optimal.
        return CompletionResult(completed=np.zeros_like(m), discrepancy=np.zeros_like(m),
                                iterations=0, residual_trace=np.zeros(1), converged=True)

    mu = params.mu0 if params.mu0 is not None else 1.0 / np.linalg.norm(m, 2)
    lam = np.zeros_like(m)
    e = np.zeros_like(m)
    y = np.zeros_like(m)
    unobserved = ~mask
    trace = []
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iter + 1):
        # Y/E subproblem at fixed (lam, mu): alternate shrinkage and
        # off-support projection until the Y iterate stalls.
        for _ in range(params.max_inner):
            try:
                u, s, vt = np.linalg.svd(m - e + lam / mu, full_matrices=False)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"SVD failed at iteration {iterations}: {exc}") from exc
            y_new = (u * soft_threshold(s, 1.0 / mu)) @ vt
            e = np.where(unobserved, m - y_new + lam / mu, 0.0)
            delta_y = np.linalg.norm(y_new - y, "fro") / norm_m
            y = y_new
            if delta_y < params.inner_tol:
                break
        r = m - y - e
        lam = lam + mu * r
        mu = params.rho * mu
        residual = np.linalg.norm(r, "fro") / norm_m
        trace.append(residual)
        if residual <= params.tol:
            converged = True
            break

    return CompletionResult(completed=y, discrepancy=e, iterations=iterations,
                            residual_trace=np.asarray(trace), converged=converged)


def complete_time_series(fieldt: FieldTensor, mask: ObservationMask,
                         params: ALMParams = ALMParams(), threads: int = 1,
                         return_details: bool = False):
    """Run :func:`alm_complete` independently on every time slice.

    Requires a whole-history mask.  Observed entries are copied from the
    input bit-exactly; completed values fill the missing points.  With
    ``return_details`` the per-slice :class:`CompletionResult` list is
    returned alongside the field (slices are assembled in time order
    regardless of the thread count).
    """
    if mask.grid != fieldt.grid:
        raise ValueError("mask grid does not match field grid")
    if mask.mode != "whole-history":
        raise ValueError("time-sliced completion requires a whole-history mask")
    observed2d = np.asarray(mask.observed)

    def solve(it: int) -> CompletionResult:
        try:
            return alm_complete(fieldt.values[:, :, it], observed2d, params)
        except (ValueError, NumericalError) as exc:
            raise type(exc)(f"time slice {it}: {exc}") from exc

    indices = range(fieldt.grid.n_t)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, indices))
    else:
        results = [solve(it) for it in indices]

    values = np.stack([res.completed for res in results], axis=2)
    values[observed2d, :] = fieldt.values[observed2d, :]
    out = FieldTensor(fieldt.grid, values)
    if return_details:
        return out, results
    return out


def sampling_sufficiency_advisory(n1: int, n2: int, r: int, m: int,
                                  c: float = 1.0) -> str:
    """Advisory check of m observations against the c * n^(5/6) * r * log(n) bound.

    Natural log, default c = 1.  Returns "sufficient" when m meets the bound
    (a fully observed matrix always does), "marginal" above half of it, and
    "insufficient" below; never raises.
    """
    if min(n1, n2, r) < 1:
        raise ValueError("matrix dimensions and rank must be positive")
    if m < 0:
        raise ValueError("observation count must be >= 0")
    if m == 0:
        return "insufficient"
    if m >= n1 * n2:
        return "sufficient"
    n = min(n1, n2)
    bound = c * n ** (5.0 / 6.0) * r * np.log(n)
    if m >= bound:
        return "sufficient"
    if m >= 0.5 * bound:
        return "marginal"
    return "insufficient"
