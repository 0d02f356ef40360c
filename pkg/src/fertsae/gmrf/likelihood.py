"""Observation log-likelihoods and their derivatives in the linear predictor."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln


def nb_loglik(y, mu, d):
    """Negative-binomial log pmf with mean ``mu`` and variance ``mu (1 + mu / d)``."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    d = np.asarray(d, float)
    if np.any(mu <= 0) or np.any(d <= 0):
        raise ValueError("mu and d must be positive")
    return (
        gammaln(y + d)
        - gammaln(d)
        - gammaln(y + 1)
        + d * (np.log(d) - np.logaddexp(np.log(d), np.log(mu)))
        + y * (np.log(mu) - np.logaddexp(np.log(d), np.log(mu)))
    )


def poisson_loglik(y, mu):
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    return y * np.log(mu) - mu - gammaln(y + 1)


def nb_eta_terms(y, log_offset, eta, log_d):
    """Log-likelihood, gradient and negative Hessian in ``eta`` for ``mu = n exp(eta)``.

    Returns per-observation arrays ``(loglik, grad, neg_hess)``.
    """
    d = np.exp(log_d)
    log_mu = log_offset + eta
    log_dmu = np.logaddexp(log_d, log_mu)
    ll = (
        gammaln(y + d)
        - gammaln(d)
        - gammaln(y + 1)
        + d * (log_d - log_dmu)
        + y * (log_mu - log_dmu)
    )
    p = np.exp(log_mu - log_dmu)  # mu / (d + mu)
    grad = y - (y + d) * p
    neg_hess = (y + d) * p * (1.0 - p)
    return ll, grad, neg_hess


def nb_eta_core(y, log_offset, eta, d):
    """Parts of :func:`nb_eta_terms` that depend on ``eta``, without log-gamma terms.

    Returns ``(sum of eta-dependent log-likelihood, grad, neg_hess)``; add
    ``sum(gammaln(y + d) - gammaln(d) - gammaln(y + 1)) + n d log d`` for the
    full log-likelihood.
    """
    mu = np.exp(log_offset + eta)
    dmu = d + mu
    log_dmu = np.log(dmu)
    ll = float(y @ (log_offset + eta) - (y + d) @ log_dmu)
    p = mu / dmu
    grad = y - (y + d) * p
    neg_hess = (y + d) * p * (d / dmu)
    return ll, grad, neg_hess


def gaussian_loglik(y, eta, variance):
    r = np.asarray(y, float) - eta
    return -0.5 * (r * r / variance + np.log(2 * np.pi * variance))
