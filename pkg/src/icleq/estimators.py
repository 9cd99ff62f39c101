"""Reference equalizers: exact MMSE, LMMSE, and Bayesian channel-prior MMSE.

Four estimators of the transmitted vector x from a received y:

* :func:`mmse_known_task` - posterior mean over the finite joint input set
  when the channel and noise power are known (the optimal equalizer).
* :func:`lmmse_known_task` - the linear MMSE solution derived under a
  Gaussian input assumption, ignoring the quantizer.
* :func:`bayes_mmse_discrete` - channel unknown but drawn from a known
  finite set: mixes per-channel MMSE estimates under the channel posterior
  given the pilot context.
* :func:`bayes_mmse_continuous_mc` - channel prior is the true continuous
  CN(0,1) law; the channel posterior average is approximated by
  self-normalized importance sampling with the prior as proposal.

:func:`bayes_mmse_gaussian_exact` closes the loop for validation: with an
unquantized receiver the CN(0,1) prior is conjugate, so the full posterior
predictive over inputs is available in closed form.

All posterior arithmetic runs in the log domain; quantized pilot
likelihoods at high SNR underflow otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Constellation, ContextSet, Quantizer, Task, loglik_means
from .numerics import hermitian, logsumexp, solve_hpd
from .rng import RngStream, standard_complex_normal

__all__ = [
    "ChannelPrior",
    "DegenerateEvidenceError",
    "input_posterior",
    "mmse_known_task",
    "lmmse_known_task",
    "channel_log_posterior_weights",
    "bayes_mmse_discrete",
    "bayes_mmse_continuous_mc",
    "bayes_mmse_gaussian_exact",
]


class DegenerateEvidenceError(ValueError):
    """Every candidate input has zero likelihood for the observation."""


@dataclass(frozen=True)
class ChannelPrior:
    """Channel prior: the true continuous CN(0,1) law, or a uniform discrete
    law over a stored set of channel matrices."""

    channels: np.ndarray | None = None

    @classmethod
    def continuous(cls) -> "ChannelPrior":
        return cls(channels=None)

    @classmethod
    def discrete(cls, channels) -> "ChannelPrior":
        ch = np.asarray(channels, dtype=complex)
        if ch.ndim != 3 or ch.shape[0] == 0:
            raise ValueError("discrete prior needs a non-empty (M, n_r, n_t) stack")
        return cls(channels=ch)

    @property
    def is_discrete(self) -> bool:
        return self.channels is not None

    @property
    def n_channels(self) -> int:
        if self.channels is None:
            raise ValueError("continuous prior has no channel list")
        return self.channels.shape[0]


# ---------------------------------------------------------------------------
# known-task MMSE and LMMSE
# ---------------------------------------------------------------------------


def _posteriors_for_channel(
    h: np.ndarray,
    sigma2,
    q: Quantizer,
    constellation: Constellation,
    ys: np.ndarray,
) -> np.ndarray:
    """Input posteriors for a batch of observations under one channel.

    ``ys`` is (n, n_r); returns (n, n_joint) rows summing to 1.
    """
    means = constellation.joint @ h.T  # (n_joint, n_r)
    ll = loglik_means(q, means[None, :, :], sigma2, ys[:, None, :])  # (n, n_joint)
    norm = logsumexp(ll, axis=1)
    if np.any(np.isneginf(norm)):
        raise DegenerateEvidenceError("observation has zero likelihood for all inputs")
    return np.exp(ll - np.asarray(norm)[:, None])


def input_posterior(
    task: Task, q: Quantizer, constellation: Constellation, y: np.ndarray
) -> np.ndarray:
    """Posterior over the joint input set given y, uniform input prior."""
    y = np.asarray(y, dtype=complex)
    return _posteriors_for_channel(task.h, task.sigma2, q, constellation, y[None, :])[0]


def mmse_known_task(
    task: Task, q: Quantizer, constellation: Constellation, y: np.ndarray
) -> np.ndarray:
    """Posterior-mean equalizer for a known task (exact MMSE)."""
    probs = input_posterior(task, q, constellation, y)
    return probs @ constellation.joint


def mmse_known_task_batch(
    task: Task, q: Quantizer, constellation: Constellation, ys: np.ndarray
) -> np.ndarray:
    probs = _posteriors_for_channel(task.h, task.sigma2, q, constellation, ys)
    return probs @ constellation.joint


def lmmse_known_task(task: Task, y: np.ndarray, n_t: int) -> np.ndarray:
    """Linear MMSE under a Gaussian input model, quantizer ignored.

    x_hat = (sigma2 * n_t * I + H^H H)^{-1} H^H y, applied to y as received.
    """
    h = task.h
    a = task.sigma2 * n_t * np.eye(n_t) + hermitian(h) @ h
    y = np.asarray(y, dtype=complex)
    rhs = hermitian(h) @ (y.T if y.ndim == 2 else y)
    x = solve_hpd(a, rhs)
    return x.T if y.ndim == 2 else x


# ---------------------------------------------------------------------------
# channel-posterior mixtures
# ---------------------------------------------------------------------------


def _context_log_weights(
    channels: np.ndarray, sigma2, q: Quantizer, context: ContextSet
) -> np.ndarray:
    """Unnormalized log posterior weight of each channel given the context."""
    m = channels.shape[0]
    if len(context) == 0:
        return np.zeros(m)
    means = np.einsum("mrt,nt->mnr", channels, context.xs)  # (M, N, n_r)
    ll = loglik_means(q, means, sigma2, context.ys[None, :, :])  # (M, N)
    return np.sum(ll, axis=1)


def channel_log_posterior_weights(
    prior: ChannelPrior, sigma2: float, q: Quantizer, context: ContextSet
) -> np.ndarray:
    """Log weights of Eq.-style channel posterior: prior uniform over the
    stored channels, likelihood the product over context pairs.  Caller
    normalizes (e.g. via logsumexp)."""
    if not prior.is_discrete:
        raise ValueError("channel posterior weights need a discrete prior")
    return _context_log_weights(prior.channels, sigma2, q, context)


def _mixture_estimate(
    channels: np.ndarray,
    weights: np.ndarray,
    sigma2,
    q: Quantizer,
    constellation: Constellation,
    ys: np.ndarray,
    prune_tol: float,
) -> np.ndarray:
    """Posterior-weighted average of per-channel MMSE estimates.

    Channels whose normalized weight is below ``prune_tol`` (or exactly
    zero) are skipped; kept weights are renormalized.
    """
    keep = weights > max(prune_tol, 0.0)
    if not np.any(keep):
        keep = weights == weights.max()
    ch = channels[keep]
    w = weights[keep]
    w = w / w.sum()
    means = np.einsum("mrt,ct->mcr", ch, constellation.joint)  # (Mk, C, n_r)
    ll = loglik_means(
        q, means[:, None, :, :], sigma2, ys[None, :, None, :]
    )  # (Mk, n, C)
    norm = logsumexp(ll, axis=2)
    probs = np.exp(ll - norm[:, :, None])
    est = probs @ constellation.joint  # (Mk, n, n_t)
    return np.einsum("m,mnt->nt", w, est)


def bayes_mmse_discrete_batch(
    prior: ChannelPrior,
    sigma2: float,
    q: Quantizer,
    constellation: Constellation,
    context: ContextSet,
    ys: np.ndarray,
    prune_tol: float = 0.0,
) -> np.ndarray:
    lw = channel_log_posterior_weights(prior, sigma2, q, context)
    w = np.exp(lw - logsumexp(lw))
    return _mixture_estimate(
        prior.channels, w, sigma2, q, constellation, ys, prune_tol
    )


def bayes_mmse_discrete(
    prior: ChannelPrior,
    sigma2: float,
    q: Quantizer,
    constellation: Constellation,
    context: ContextSet,
    y: np.ndarray,
    prune_tol: float = 0.0,
) -> np.ndarray:
    """MMSE equalizer under a uniform prior over stored channels:
    channel-posterior average of per-channel MMSE estimates (exact)."""
    y = np.asarray(y, dtype=complex)
    return bayes_mmse_discrete_batch(
        prior, sigma2, q, constellation, context, y[None, :], prune_tol
    )[0]


def bayes_mmse_continuous_mc_batch(
    sigma2: float,
    q: Quantizer,
    constellation: Constellation,
    context: ContextSet,
    ys: np.ndarray,
    k: int,
    rng: RngStream,
    prune_tol: float = 1e-13,
) -> tuple[np.ndarray, float]:
    """Importance-sampling approximation of the continuous-prior MMSE.

    Draws ``k`` channels from the CN(0,1) prior (the proposal), weights them
    by the context likelihood, and averages the per-channel MMSE estimates.
    Returns the estimates for all rows of ``ys`` plus the effective sample
    size 1 / sum(w^2); a small ESS means the context has concentrated the
    posterior far from the prior and the estimate is noisy.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_r = ys.shape[1]
    n_t = constellation.n_t
    channels = standard_complex_normal(rng, size=(k, n_r, n_t))
    lw = _context_log_weights(channels, sigma2, q, context)
    w = np.exp(lw - logsumexp(lw))
    ess = float(1.0 / np.sum(w**2))
    est = _mixture_estimate(channels, w, sigma2, q, constellation, ys, prune_tol)
    return est, ess


def bayes_mmse_continuous_mc(
    sigma2: float,
    q: Quantizer,
    constellation: Constellation,
    context: ContextSet,
    y: np.ndarray,
    k: int,
    rng: RngStream,
    prune_tol: float = 1e-13,
) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=complex)
    est, ess = bayes_mmse_continuous_mc_batch(
        sigma2, q, constellation, context, y[None, :], k, rng, prune_tol
    )
    return est[0], ess


# ---------------------------------------------------------------------------
# conjugate oracle (unquantized only)
# ---------------------------------------------------------------------------


def _gaussian_predictive_stats(
    sigma2: float, constellation: Constellation, context: ContextSet
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean (n_joint, n_r) and variance (n_joint,) of the next
    observation for each candidate input, channel rows marginalized under
    their CN(0, I) prior and the unquantized pilot evidence."""
    a = context.xs  # (N, n_t), rows x_i^T
    n_t = constellation.n_t
    prec = np.eye(n_t) + hermitian(a) @ a / sigma2
    cov = solve_hpd(prec, np.eye(n_t))
    if len(context):
        mu = cov @ (hermitian(a) @ context.ys) / sigma2  # (n_t, n_r)
    else:
        mu = np.zeros((n_t, context.ys.shape[1]), dtype=complex)
    joint = constellation.joint
    pred_mean = joint @ mu  # (n_joint, n_r)
    quad = np.einsum("cj,jk,ck->c", joint, cov, joint.conj())
    pred_var = sigma2 + quad.real  # (n_joint,)
    return pred_mean, pred_var


def bayes_mmse_gaussian_exact_batch(
    sigma2: float,
    constellation: Constellation,
    context: ContextSet,
    ys: np.ndarray,
    quantizer: Quantizer | None = None,
) -> np.ndarray:
    if quantizer is not None and quantizer.quantized:
        raise ValueError("conjugate oracle requires unquantized observations")
    pred_mean, pred_var = _gaussian_predictive_stats(sigma2, constellation, context)
    n_r = ys.shape[1]
    d2 = np.sum(np.abs(ys[:, None, :] - pred_mean[None, :, :]) ** 2, axis=2)
    ll = -n_r * np.log(np.pi * pred_var)[None, :] - d2 / pred_var[None, :]
    norm = logsumexp(ll, axis=1)
    probs = np.exp(ll - np.asarray(norm)[:, None])
    return probs @ constellation.joint


def bayes_mmse_gaussian_exact(
    sigma2: float,
    constellation: Constellation,
    context: ContextSet,
    y: np.ndarray,
    quantizer: Quantizer | None = None,
) -> np.ndarray:
    """Exact continuous-prior MMSE for the unquantized model.

    Per receive antenna the channel row has a CN(0, I) prior conjugate to
    the Gaussian pilot likelihood, so the posterior predictive of y given
    each candidate input is Gaussian in closed form; the input posterior
    and its mean follow by enumeration.
    """
    y = np.asarray(y, dtype=complex)
    return bayes_mmse_gaussian_exact_batch(
        sigma2, constellation, context, y[None, :], quantizer
    )[0]
