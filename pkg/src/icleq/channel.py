"""Quantized MIMO forward model: constellations, tasks, pilot contexts.

A fading task is a pair ``(H, sigma2)``.  The receiver observes
``y = Q_b(H x + z)`` where ``z`` is circularly-symmetric complex Gaussian
noise with per-antenna power ``sigma2`` (each real dimension has variance
``sigma2 / 2``) and ``Q_b`` is a saturating mid-rise uniform quantizer on
``[-4, 4]`` applied separately to in-phase and quadrature components.
``Quantizer(bits=None)`` disables quantization.

The exact observation likelihood under this model is what all Bayesian
reference equalizers are built on: for finite ``b`` the probability of a
received sample is the Gaussian mass of its quantization cell, with the
two extreme cells extending to infinity (the quantizer saturates).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import _log_cell_prob_std
from .rng import RngStream, standard_complex_normal

__all__ = [
    "Quantizer",
    "Constellation",
    "Task",
    "TaskDistributionSpec",
    "ContextSet",
    "snr_of",
    "sample_task",
    "quantize",
    "cell_bounds",
    "apply_channel",
    "log_likelihood",
    "sample_context",
]


# ---------------------------------------------------------------------------
# quantizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quantizer:
    """Mid-rise uniform quantizer with ``2**bits`` levels; ``bits=None`` is a
    pass-through (unquantized receiver)."""

    bits: int | None
    range_lo: float = -4.0
    range_hi: float = 4.0

    def __post_init__(self):
        if self.bits is not None and self.bits < 1:
            raise ValueError("bits must be >= 1 or None")
        if not self.range_lo < self.range_hi:
            raise ValueError("range_lo must be below range_hi")

    @property
    def quantized(self) -> bool:
        return self.bits is not None

    @property
    def n_levels(self) -> int:
        if self.bits is None:
            raise ValueError("unquantized: no levels")
        return 1 << self.bits

    @property
    def step(self) -> float:
        return (self.range_hi - self.range_lo) / self.n_levels

    def levels(self) -> np.ndarray:
        """All output levels, midpoints of the cells."""
        k = np.arange(self.n_levels)
        return self.range_lo + self.step * (k + 0.5)


UNQUANTIZED = Quantizer(bits=None)


def quantize(q: Quantizer, v):
    """Quantize real value(s): returns ``(level_index, level_value)``.

    Mid-rise rule with saturation: values outside the range clamp to the
    extreme levels.  Unquantized mode returns ``(-1, v)`` unchanged.
    """
    v = np.asarray(v, dtype=float)
    if not q.quantized:
        idx = np.full(v.shape, -1, dtype=int)
        if v.ndim == 0:
            return -1, float(v)
        return idx, v.copy()
    step = q.step
    idx = np.clip(np.floor((v - q.range_lo) / step), 0, q.n_levels - 1).astype(int)
    val = q.range_lo + step * (idx + 0.5)
    if v.ndim == 0:
        return int(idx), float(val)
    return idx, val


def cell_bounds(q: Quantizer, level_index: int) -> tuple[float, float]:
    """Quantization cell of a level: ``[lo, hi)``; the extreme cells are
    half-open to -inf / +inf because the quantizer saturates."""
    if not q.quantized:
        raise ValueError("unquantized: no cells")
    if not 0 <= level_index < q.n_levels:
        raise ValueError(f"level index {level_index} out of range [0, {q.n_levels})")
    step = q.step
    lo = q.range_lo + level_index * step
    hi = lo + step
    if level_index == 0:
        lo = -np.inf
    if level_index == q.n_levels - 1:
        hi = np.inf
    return lo, hi


def level_index_of(q: Quantizer, v) -> np.ndarray:
    """Recover level indices of value(s) assumed to lie on the output grid.

    Raises ValueError for any value that is not a quantizer output level.
    """
    v = np.asarray(v, dtype=float)
    step = q.step
    idx = np.rint((v - q.range_lo) / step - 0.5).astype(int)
    ok = (idx >= 0) & (idx < q.n_levels)
    ok &= np.abs(q.range_lo + step * (idx + 0.5) - v) <= 1e-9
    if not np.all(ok):
        raise ValueError("value not on a quantizer output level")
    return idx


# ---------------------------------------------------------------------------
# constellation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Constellation:
    """Per-antenna alphabet and the enumerated joint input set.

    ``joint`` holds all ``len(per_antenna) ** n_t`` input vectors in
    lexicographic order by per-antenna symbol index (antenna 0 is the most
    significant digit).  The fixed order is what the soft classifier head
    and the checkpoints rely on.
    """

    n_t: int
    per_antenna: np.ndarray
    joint: np.ndarray = field(repr=False)

    @property
    def n_joint(self) -> int:
        return self.joint.shape[0]

    def real_joint(self) -> np.ndarray:
        """Joint inputs realified: shape (2 * n_t, n_joint), [Re; Im] rows."""
        return np.concatenate([self.joint.real.T, self.joint.imag.T], axis=0)


def qam4_constellation(n_t: int) -> Constellation:
    """Per-antenna 4-QAM with unit total average power.

    Symbols are ``(+-1 +-1j) / sqrt(2 n_t)`` ordered (+,+), (+,-), (-,+),
    (-,-) in (re, im) sign, so the uniform joint set has E||x||^2 = 1.
    """
    scale = 1.0 / np.sqrt(2.0 * n_t)
    per = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) * scale
    m = per.size
    n = m**n_t
    digits = (np.arange(n)[:, None] // (m ** np.arange(n_t - 1, -1, -1))[None, :]) % m
    joint = per[digits]
    mean_energy = float(np.mean(np.sum(np.abs(joint) ** 2, axis=1)))
    assert abs(mean_energy - 1.0) < 1e-12
    return Constellation(n_t=n_t, per_antenna=per, joint=joint)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    """One equalization task: channel matrix plus noise power."""

    h: np.ndarray
    sigma2: float

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        object.__setattr__(self, "h", h)
        if h.ndim != 2:
            raise ValueError("channel matrix must be 2-D")
        if not np.all(np.isfinite(h.view(float))):
            raise ValueError("channel matrix must be finite")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def n_r(self) -> int:
        return self.h.shape[0]

    @property
    def n_t(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True)
class TaskDistributionSpec:
    """Task law: i.i.d. CN(0,1) channel entries, noise power log-uniform
    (uniform in dB) over ``[sigma2_db_min, sigma2_db_max]``."""

    n_t: int
    n_r: int
    sigma2_db_min: float
    sigma2_db_max: float

    def __post_init__(self):
        if self.sigma2_db_min > self.sigma2_db_max:
            raise ValueError("sigma2_db_min must be <= sigma2_db_max")


def snr_of(task: Task) -> float:
    """Per-receive-antenna SNR as a linear ratio (unit transmit power)."""
    return 1.0 / task.sigma2


def sample_task(spec: TaskDistributionSpec, rng: RngStream) -> Task:
    h = standard_complex_normal(rng, size=(spec.n_r, spec.n_t))
    u = rng.uniform(spec.sigma2_db_min, spec.sigma2_db_max)
    return Task(h=h, sigma2=float(10.0 ** (u / 10.0)))


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------


def _quantize_complex(q: Quantizer, z: np.ndarray) -> np.ndarray:
    if not q.quantized:
        return z
    _, re = quantize(q, z.real)
    _, im = quantize(q, z.imag)
    return re + 1j * im


def apply_channel(task: Task, q: Quantizer, x: np.ndarray, rng: RngStream) -> np.ndarray:
    """One use of the channel: ``y = Q_b(H x + z)`` with fresh noise."""
    x = np.asarray(x, dtype=complex)
    if x.shape != (task.n_t,):
        raise ValueError(f"expected input of shape ({task.n_t},), got {x.shape}")
    z = standard_complex_normal(rng, size=task.n_r) * np.sqrt(task.sigma2)
    return _quantize_complex(q, task.h @ x + z)


@dataclass(frozen=True)
class ContextSet:
    """N pilot pairs from one task; ``x_idx`` caches joint-input indices."""

    xs: np.ndarray
    ys: np.ndarray
    x_idx: np.ndarray | None = None

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=complex)
        ys = np.asarray(self.ys, dtype=complex)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if xs.ndim != 2 or ys.ndim != 2 or xs.shape[0] != ys.shape[0]:
            raise ValueError("xs, ys must be (n, n_t) and (n, n_r)")

    def __len__(self) -> int:
        return self.xs.shape[0]


def empty_context(n_t: int, n_r: int) -> ContextSet:
    return ContextSet(
        xs=np.zeros((0, n_t), dtype=complex),
        ys=np.zeros((0, n_r), dtype=complex),
        x_idx=np.zeros(0, dtype=int),
    )


def sample_context(
    task: Task,
    q: Quantizer,
    constellation: Constellation,
    n: int,
    rng: RngStream,
) -> ContextSet:
    """n i.i.d. pilot pairs: inputs uniform over the joint set, outputs
    through :func:`apply_channel`'s law (vectorized)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    idx = np.asarray(rng.integers(0, constellation.n_joint, size=n), dtype=int)
    xs = constellation.joint[idx]
    z = standard_complex_normal(rng, size=(n, task.n_r)) * np.sqrt(task.sigma2)
    ys = _quantize_complex(q, xs @ task.h.T + z)
    return ContextSet(xs=xs, ys=ys, x_idx=idx)


# ---------------------------------------------------------------------------
# observation likelihood
# ---------------------------------------------------------------------------


def realify_obs(z: np.ndarray) -> np.ndarray:
    """Complex (..., n) -> real (..., 2n), real parts then imaginary parts."""
    return np.concatenate([z.real, z.imag], axis=-1)


def observation_cells(q: Quantizer, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantization cells of received values, per real dimension.

    ``y`` is complex (..., n_r) with components on the output grid; returns
    ``(lo, hi)`` arrays of shape (..., 2 n_r) with +-inf on the extreme cells.
    """
    y_ri = realify_obs(np.asarray(y, dtype=complex))
    idx = level_index_of(q, y_ri)
    step = q.step
    lo = q.range_lo + idx * step
    hi = lo + step
    lo = np.where(idx == 0, -np.inf, lo)
    hi = np.where(idx == q.n_levels - 1, np.inf, hi)
    return lo, hi


def cell_loglik(lo, hi, means_ri, sigma2):
    """Summed log cell probabilities over the trailing real-dimension axis.

    ``lo``/``hi`` broadcast against ``means_ri``; each real dimension has
    standard deviation ``sqrt(sigma2 / 2)``.
    """
    std = np.sqrt(np.asarray(sigma2, dtype=float) / 2.0)
    if std.ndim:
        std = std[..., None]
    a = (lo - means_ri) / std
    b = (hi - means_ri) / std
    return np.sum(_log_cell_prob_std(a, b), axis=-1)


def gauss_loglik(y_ri, means_ri, sigma2):
    """Unquantized counterpart: summed Gaussian log densities (a density, so
    the total may exceed 0)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.ndim:
        sigma2 = sigma2[..., None]
    with np.errstate(over="ignore"):  # distant observations overflow to -inf
        d2 = (y_ri - means_ri) ** 2
        return np.sum(-0.5 * np.log(np.pi * sigma2) - d2 / sigma2, axis=-1)


def loglik_means(q: Quantizer, means: np.ndarray, sigma2, y: np.ndarray):
    """Log-likelihood of observations ``y`` for noiseless means ``H x``.

    ``means`` and ``y`` are complex arrays broadcastable to a common
    (..., n_r) shape; the return value sums over the 2 n_r real dimensions.
    """
    means_ri = realify_obs(np.asarray(means, dtype=complex))
    if q.quantized:
        lo, hi = observation_cells(q, y)
        return cell_loglik(lo, hi, means_ri, sigma2)
    return gauss_loglik(realify_obs(np.asarray(y, dtype=complex)), means_ri, sigma2)


def log_likelihood(task: Task, q: Quantizer, x: np.ndarray, y: np.ndarray) -> float:
    """Exact observation log-likelihood log P(y | x, task) under the
    (possibly quantized) forward model."""
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    if x.shape != (task.n_t,) or y.shape != (task.n_r,):
        raise ValueError("x, y must have shapes (n_t,), (n_r,)")
    return float(loglik_means(q, task.h @ x, task.sigma2, y))
