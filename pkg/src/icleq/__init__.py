"""In-context-learning MIMO equalization with exact Bayesian references."""

from . import _malloc

_malloc.tune()

from .channel import (
    UNQUANTIZED,
    Constellation,
    ContextSet,
    Quantizer,
    Task,
    TaskDistributionSpec,
    apply_channel,
    cell_bounds,
    log_likelihood,
    qam4_constellation,
    quantize,
    sample_context,
    sample_task,
    snr_of,
)
from .numerics import (
    cmatmul,
    gauss_cdf,
    hermitian,
    log_gauss_cell_prob,
    logsumexp,
    solve_hpd,
)
from .rng import RngStream, standard_complex_normal

__all__ = [
    "UNQUANTIZED",
    "Constellation",
    "ContextSet",
    "Quantizer",
    "RngStream",
    "Task",
    "TaskDistributionSpec",
    "apply_channel",
    "cell_bounds",
    "cmatmul",
    "gauss_cdf",
    "hermitian",
    "log_gauss_cell_prob",
    "log_likelihood",
    "logsumexp",
    "qam4_constellation",
    "quantize",
    "sample_context",
    "sample_task",
    "snr_of",
    "solve_hpd",
    "standard_complex_normal",
]

__version__ = "0.1.0"
