"""Complex linear algebra and tail-stable Gaussian probability primitives.

All statistical computation in the package runs in binary64.  The Gaussian
cell probabilities needed by the quantized observation likelihood are the
numerically delicate part: at high SNR or fine quantization a cell can sit
many standard deviations from the mean, where a naive CDF difference
cancels catastrophically.  :func:`log_gauss_cell_prob` therefore evaluates
same-side cells through the complementary error function on the side away
from the mean (via ``scipy.special.log_ndtr``) and only uses a direct erf
difference when the cell straddles the mean.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import erf, log_ndtr, ndtr
from scipy.special import logsumexp as _scipy_logsumexp

__all__ = [
    "cmatmul",
    "hermitian",
    "solve_hpd",
    "gauss_cdf",
    "log_gauss_cell_prob",
    "logsumexp",
]


def cmatmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Complex matrix product with an explicit dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"expected 2-D matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def hermitian(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return np.asarray(a).conj().T


def solve_hpd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for Hermitian positive definite ``a``.

    Uses a Cholesky factorization; a non-positive-definite pivot raises
    ``numpy.linalg.LinAlgError``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got {a.shape}")
    try:
        c, low = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"matrix is not positive definite: {exc}") from exc
    return cho_solve((c, low), b, check_finite=False)


def gauss_cdf(x):
    """Standard normal CDF, evaluated via the complementary error function."""
    return ndtr(x)


def _logdiffexp(la, lb):
    """log(exp(la) - exp(lb)) for la >= lb, elementwise."""
    with np.errstate(invalid="ignore"):
        d = np.where(np.isneginf(la), 0.0, lb - la)
    return la + np.log1p(-np.exp(d))


def _log_cell_prob_std(a, b):
    """log(Phi(b) - Phi(a)) for standardized bounds a < b (entries may be inf).

    Same-side cells go through upper-tail log-CDFs so the result stays finite
    far into the tails; cells straddling zero use a cancellation-free erf
    difference of opposite signs.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape, dtype=float)

    right = a >= 0.0
    left = b <= 0.0
    mid = ~(right | left)

    if np.any(right):
        ar, br = a[right], b[right]
        out[right] = _logdiffexp(log_ndtr(-ar), log_ndtr(-br))
    if np.any(left):
        al, bl = a[left], b[left]
        out[left] = _logdiffexp(log_ndtr(bl), log_ndtr(al))
    if np.any(mid):
        am, bm = a[mid], b[mid]
        s = 0.5 * (erf(bm / np.sqrt(2.0)) - erf(am / np.sqrt(2.0)))
        out[mid] = np.log(s)
    return out


def log_gauss_cell_prob(lo, hi, mean: float, std: float):
    """log P(lo < X <= hi) for X ~ N(mean, std^2); bounds may be -inf/+inf.

    Stays finite in the far tail for any bounds representable in binary64
    unless the true probability itself underflows.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo >= hi):
        raise ValueError("cell requires lo < hi")
    if np.any(np.asarray(std) <= 0):
        raise ValueError("std must be positive")
    a = (lo - mean) / std
    b = (hi - mean) / std
    out = _log_cell_prob_std(a, b)
    if out.ndim == 0:
        return float(out)
    return out


def logsumexp(v, axis=None):
    """log(sum(exp(v))); shift-invariant, tolerates -inf entries."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("logsumexp of empty input")
    out = _scipy_logsumexp(v, axis=axis)
    if np.ndim(out) == 0:
        return float(out)
    return out
