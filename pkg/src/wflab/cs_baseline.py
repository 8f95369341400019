"""Small-scale compressive-sampling baseline: a tensor-product Fourier
dictionary combined with orthogonal matching pursuit.

The dictionary factors over the three axes, D = B_t x B_x x B_z in the
tensor-product sense, and is applied factor-wise so the full matrix is never
formed beyond an explicit size cap.  Row deletion by the observation mask
yields the sampled operator; the greedy solver picks atoms by maximum
absolute correlation and refits the active set by least squares each step.
Atoms are normalized to unit norm (greedy selection needs comparable
scales); the raw column scales are retained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    FieldTensor,
    NumericalError,
    ObservationMask,
    apply_mask,
    flatten_values,
    unflatten_values,
)

#: Elements allowed in an explicitly materialized dictionary matrix.
MATERIALIZE_CAP = 4_194_304

#: Signal dimension cap for full-grid reconstruction (about 32 x 32 x 64).
RECONSTRUCT_CAP = 65_536


@dataclass(frozen=True)
class FourierBasis1D:
    """Unit-norm cosine/sine basis of an even-length axis.

    Columns are ordered [cos w_0, sin w_1, cos w_1, ..., sin w_{N/2-1},
    cos w_{N/2-1}, cos w_{N/2}] with w_l = 2 pi l / N evaluated on sample
    indices 0..N-1, giving exactly N orthogonal columns.  ``frequencies``
    maps each column to its w_l; ``scales`` holds the pre-normalization
    column norms so the raw basis is recoverable.
    """

    length: int
    atoms: np.ndarray
    frequencies: np.ndarray
    scales: np.ndarray
    domain: str


def build_basis(length: int, domain: str = "time") -> FourierBasis1D:
    """Build the basis for one axis; ``length`` must be even and >= 2."""
    if length < 2 or length % 2 != 0:
        raise ValueError(f"basis length must be even and >= 2, got {length}")
    n = length
    t = np.arange(n)
    columns = [np.cos(0.0 * t)]
    freqs = [0.0]
    for ell in range(1, n // 2):
        w = 2.0 * np.pi * ell / n
        columns.append(np.sin(w * t))
        columns.append(np.cos(w * t))
        freqs.extend([w, w])
    w = 2.0 * np.pi * (n // 2) / n
    columns.append(np.cos(w * t))
    freqs.append(w)
    atoms = np.column_stack(columns)
    scales = np.linalg.norm(atoms, axis=0)
    return FourierBasis1D(length=n, atoms=atoms / scales, frequencies=np.asarray(freqs),
                          scales=scales, domain=domain)


@dataclass(frozen=True)
class TensorDictionary:
    """Factorized dictionary over (x, z, t); never materialized above the cap.

    Signals and coefficients are both vectorized t fastest, then x, then z,
    so the dense equivalent is kron(B_z, kron(B_x, B_t)).
    """

    basis_x: FourierBasis1D
    basis_z: FourierBasis1D
    basis_t: FourierBasis1D

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.basis_x.length, self.basis_z.length, self.basis_t.length)

    @property
    def n_signal(self) -> int:
        return self.basis_x.length * self.basis_z.length * self.basis_t.length

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Signal vector D w, computed factor by factor."""
        coeff = unflatten_values(np.asarray(w, dtype=np.float64), self.shape)
        return flatten_values(self._contract(coeff, transpose=False))

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        """Coefficient-space correlations D^T x."""
        signal = unflatten_values(np.asarray(x, dtype=np.float64), self.shape)
        return flatten_values(self._contract(signal, transpose=True))

    def _contract(self, tensor: np.ndarray, transpose: bool) -> np.ndarray:
        for axis, basis in ((0, self.basis_x), (1, self.basis_z), (2, self.basis_t)):
            mat = basis.atoms.T if transpose else basis.atoms
            tensor = np.moveaxis(np.tensordot(mat, tensor, axes=([1], [axis])), 0, axis)
        return tensor

    def column(self, q: int) -> np.ndarray:
        """Atom q as a full signal vector (separable triple product)."""
        nx, nz, nt = self.shape
        qt = q % nt
        qx = (q // nt) % nx
        qz = q // (nt * nx)
        prod = (self.basis_x.atoms[:, qx][:, None, None]
                * self.basis_z.atoms[:, qz][None, :, None]
                * self.basis_t.atoms[:, qt][None, None, :])
        return flatten_values(prod)

    def materialize(self) -> np.ndarray:
        """Dense (n_signal, n_signal) matrix; errors above MATERIALIZE_CAP."""
        if self.n_signal**2 > MATERIALIZE_CAP:
            raise ValueError(
                f"dictionary of {self.n_signal}^2 elements exceeds the materialization cap; "
                "use the factor-wise apply/adjoint instead")
        return np.kron(self.basis_z.atoms, np.kron(self.basis_x.atoms, self.basis_t.atoms))


def dictionary_for_grid(n_x: int, n_z: int, n_t: int) -> TensorDictionary:
    return TensorDictionary(basis_x=build_basis(n_x, "wavenumber-x"),
                            basis_z=build_basis(n_z, "wavenumber-z"),
                            basis_t=build_basis(n_t, "time"))


def dictionary_apply(dictionary: TensorDictionary, w: np.ndarray) -> np.ndarray:
    return dictionary.apply(w)


@dataclass(frozen=True)
class OMPParams:
    max_atoms: int = 32
    residual_tol: float = 1e-10

    def __post_init__(self):
        if self.max_atoms < 1:
            raise ValueError("max_atoms must be >= 1")
        if self.residual_tol < 0:
            raise ValueError("residual_tol must be >= 0")


@dataclass
class OMPResult:
    """Greedy solution: selected atom indices with their refit coefficients."""

    support: np.ndarray
    coefficients: np.ndarray
    residual_norm: float
    n_columns: int

    def dense(self) -> np.ndarray:
        w = np.zeros(self.n_columns)
        w[self.support] = self.coefficients
        return w


class SampledOperator:
    """Rows of a tensor dictionary surviving an observation pattern.

    ``rows`` are positions into the flattened signal; correlations are
    computed factor-wise through the adjoint, so the operator works above
    the materialization cap.
    """

    def __init__(self, dictionary: TensorDictionary, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.intp)
        if rows.size == 0:
            raise ValueError("no observations")
        self.dictionary = dictionary
        self.rows = rows
        self.shape = (rows.size, dictionary.n_signal)

    def correlate(self, residual: np.ndarray) -> np.ndarray:
        full = np.zeros(self.dictionary.n_signal)
        full[self.rows] = residual
        return self.dictionary.adjoint(full)

    def column(self, q: int) -> np.ndarray:
        return self.dictionary.column(q)[self.rows]


class _DenseOperator:
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("dense operator must be a matrix")
        self.shape = self.matrix.shape

    def correlate(self, residual: np.ndarray) -> np.ndarray:
        return self.matrix.T @ residual

    def column(self, q: int) -> np.ndarray:
        return self.matrix[:, q]


def omp_solve(operator, x: np.ndarray, params: OMPParams = OMPParams()) -> OMPResult:
    """Greedy sparse recovery of x ~ A w.

    Each step selects the unused atom with maximum absolute correlation to
    the residual, then refits all active coefficients by least squares, so
    the residual norm strictly decreases.  Stops at ``residual_tol`` or
    ``max_atoms``.
    """
    if isinstance(operator, np.ndarray):
        operator = _DenseOperator(operator)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != operator.shape[0]:
        raise ValueError(f"observation vector of size {x.size} does not match operator rows {operator.shape[0]}")
    if x.size == 0:
        raise ValueError("no observations")

    n_cols = operator.shape[1]
    support: list[int] = []
    active = np.empty((x.size, 0))
    coeffs = np.zeros(0)
    residual = x.copy()
    res_norm = float(np.linalg.norm(residual))
    while res_norm > params.residual_tol and len(support) < min(params.max_atoms, n_cols):
        corr = operator.correlate(residual)
        corr[support] = 0.0
        pick = int(np.argmax(np.abs(corr)))
        if corr[pick] == 0.0:
            break  # residual orthogonal to every remaining atom
        support.append(pick)
        active = np.column_stack([active, operator.column(pick)])
        coeffs, _, rank, _ = np.linalg.lstsq(active, x, rcond=None)
        if rank < len(support):
            raise NumericalError(f"rank-deficient active set at step {len(support)}")
        residual = x - active @ coeffs
        res_norm = float(np.linalg.norm(residual))

    return OMPResult(support=np.asarray(support, dtype=int), coefficients=np.asarray(coeffs),
                     residual_norm=res_norm, n_columns=n_cols)


def cs_reconstruct(fieldt: FieldTensor, mask: ObservationMask,
                   params: OMPParams = OMPParams()) -> FieldTensor:
    """Reconstruct the full grid from observed entries via the Fourier route.

    Builds the sampled operator by deleting unobserved rows, solves for the
    sparse coefficients, and scatters D w back onto the grid.  Refuses grids
    beyond RECONSTRUCT_CAP entries, where the dense-dictionary route stops
    being viable; use the matrix-completion or dictionary-learning methods
    there.
    """
    grid = fieldt.grid
    if grid.size > RECONSTRUCT_CAP:
        raise ValueError(
            f"grid has {grid.size} entries, above the compressive-sampling cap of {RECONSTRUCT_CAP}; "
            "use the alm or bpfa methods for grids this large")
    dictionary = dictionary_for_grid(grid.n_x, grid.n_z, grid.n_t)
    observed, rows = apply_mask(fieldt, mask)
    result = omp_solve(SampledOperator(dictionary, rows), observed, params)
    return FieldTensor(grid, unflatten_values(dictionary.apply(result.dense()), grid.shape))
