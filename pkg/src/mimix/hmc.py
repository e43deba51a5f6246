"""Hamiltonian Monte Carlo update of the latent compositions.

Each sample's unconstrained composition has conditional density
exp(-U(theta_i)) with

    U(theta_i) = -Y_i' theta_i + m_i * log(sum_k exp(theta_ik))
                 + 0.5 * sum_k (theta_ik - mean_ik)^2 / sigma_k^2

where mean_i is the conditional prior mean (overall mean plus the factor
contribution).  The samples are conditionally independent, so the whole block
updates as one vectorized leapfrog trajectory with per-sample accept/reject.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import inverse_log_ratio
from .errors import ValidationError


@dataclass(frozen=True)
class HmcSettings:
    epsilon: float = 0.01
    n_steps: int = 25
    accept_low: float = 0.25
    accept_high: float = 0.45
    adapt_window: int = 100

    def __post_init__(self):
        if self.epsilon < 0 or self.n_steps < 1:
            raise ValidationError("need epsilon >= 0 and n_steps >= 1")
        if not 0.0 <= self.accept_low < self.accept_high <= 1.0:
            raise ValidationError("invalid acceptance band")


def _as_batch(*arrays):
    squeeze = arrays[0].ndim == 1
    return squeeze, [np.atleast_2d(a) for a in arrays]


def neg_log_posterior_theta(theta, counts, totals, prior_mean, sigma_sq):
    """Negative log conditional density, up to an additive constant.

    Accepts a single composition (K,) or a batch (n, K); returns a scalar or
    an (n,) vector accordingly.
    """
    theta = np.asarray(theta, dtype=float)
    counts = np.asarray(counts, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    squeeze, (th, y, mu) = _as_batch(theta, counts, np.broadcast_to(
        prior_mean, theta.shape))
    m = np.atleast_1d(np.asarray(totals, dtype=float))
    if th.shape != y.shape or mu.shape != th.shape or sigma_sq.shape[-1] != th.shape[-1]:
        raise ValidationError("dimension mismatch in composition update")
    peak = th.max(axis=1)
    lse = peak + np.log(np.exp(th - peak[:, None]).sum(axis=1))
    quad = 0.5 * (((th - mu) ** 2) / sigma_sq).sum(axis=1)
    value = -(y * th).sum(axis=1) + m * lse + quad
    return float(value[0]) if squeeze else value


def grad_neg_log_posterior_theta(theta, counts, totals, prior_mean, sigma_sq):
    """Gradient of :func:`neg_log_posterior_theta` in theta."""
    theta = np.asarray(theta, dtype=float)
    counts = np.asarray(counts, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    squeeze, (th, y, mu) = _as_batch(theta, counts, np.broadcast_to(
        prior_mean, theta.shape))
    m = np.atleast_1d(np.asarray(totals, dtype=float))
    if th.shape != y.shape or mu.shape != th.shape or sigma_sq.shape[-1] != th.shape[-1]:
        raise ValidationError("dimension mismatch in composition update")
    grad = -y + m[:, None] * inverse_log_ratio(th) + (th - mu) / sigma_sq
    return grad[0] if squeeze else grad


def hmc_step(theta, counts, totals, prior_mean, sigma_sq, settings, rng):
    """One leapfrog trajectory with Metropolis correction, per sample.

    Returns the updated compositions and a boolean acceptance flag per sample.
    Non-finite proposals are rejected outright.
    """
    theta = np.asarray(theta, dtype=float)
    squeeze = theta.ndim == 1
    th = np.atleast_2d(theta)
    y = np.atleast_2d(np.asarray(counts, dtype=float))
    m = np.atleast_1d(np.asarray(totals, dtype=float))
    mu = np.broadcast_to(np.asarray(prior_mean, dtype=float), th.shape)
    eps = settings.epsilon

    def potential(u):
        return neg_log_posterior_theta(u, y, m, mu, sigma_sq)

    def grad(u):
        return grad_neg_log_posterior_theta(u, y, m, mu, sigma_sq)

    v = rng.standard_normal(th.shape)
    h0 = potential(th) + 0.5 * (v**2).sum(axis=1)

    with np.errstate(over="ignore", invalid="ignore"):
        u = th.copy()
        v = v - 0.5 * eps * grad(u)
        for _ in range(settings.n_steps - 1):
            u = u + eps * v
            v = v - eps * grad(u)
        u = u + eps * v
        v = v - 0.5 * eps * grad(u)
        v = -v  # momentum negation; kinetic energy is symmetric
        h1 = potential(u) + 0.5 * (v**2).sum(axis=1)
        log_ratio = h0 - h1

    accept = np.log(rng.random(th.shape[0])) < np.where(
        np.isfinite(log_ratio), log_ratio, -np.inf)
    out = np.where(accept[:, None], u, th)
    if squeeze:
        return out[0], bool(accept[0])
    return out, accept


def adapt_epsilon(settings: HmcSettings, acceptance_rate: float) -> HmcSettings:
    """Multiplicative burn-in tuning toward the target acceptance band."""
    if acceptance_rate > settings.accept_high:
        return replace(settings, epsilon=settings.epsilon * 1.1)
    if acceptance_rate < settings.accept_low:
        return replace(settings, epsilon=settings.epsilon / 1.1)
    return settings
