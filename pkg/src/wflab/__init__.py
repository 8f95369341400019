"""Space-time wind field simulation, sparse reconstruction and validation.

Modules: :mod:`wflab.core` (grids, tensors, masks, IO), :mod:`wflab.spectral_sim`
(stochastic-wave field synthesis), :mod:`wflab.lowrank` (nuclear-norm matrix
completion), :mod:`wflab.bpfa` (beta-process dictionary learning with Gibbs
sampling), :mod:`wflab.cs_baseline` (Fourier dictionary + matching pursuit),
:mod:`wflab.stats` (ensemble estimators and error diagnostics),
:mod:`wflab.cli` (pipeline driver).
"""

from .core import (
    ConfigError,
    ExperimentConfig,
    FieldTensor,
    GridSpec,
    NumericalError,
    ObservationMask,
    apply_mask,
    devectorize,
    read_tensor,
    scatter_observed,
    vectorize,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "FieldTensor",
    "GridSpec",
    "NumericalError",
    "ObservationMask",
    "apply_mask",
    "devectorize",
    "read_tensor",
    "scatter_observed",
    "vectorize",
    "write_tensor",
    "__version__",
]
