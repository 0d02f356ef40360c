"""Hyperparameter priors.

Each prior exposes ``logpdf`` on its natural scale and ``logpdf_internal``
on the unconstrained scale used by the sampler (log for standard deviations
and overdispersion, logit for mixing proportions), Jacobian included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .structures import StructureMatrix


@dataclass(frozen=True)
class PCPriorSigma:
    """Exponential prior on a standard deviation with ``P(sigma > U) = alpha``."""

    U: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        if not self.U > 0:
            raise ValueError("U must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def rate(self) -> float:
        return -np.log(self.alpha) / self.U

    def logpdf(self, sigma):
        sigma = np.asarray(sigma, float)
        with np.errstate(divide="ignore"):
            return np.where(sigma > 0, np.log(self.rate) - self.rate * sigma, -np.inf)

    def pdf(self, sigma):
        return np.exp(self.logpdf(sigma))

    def logpdf_internal(self, log_sigma):
        return self.logpdf(np.exp(log_sigma)) + log_sigma

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def mode_internal(self) -> float:
        return float(np.log(1.0 / self.rate))


def pc_prior_sigma(U: float = 1.0, alpha: float = 0.01) -> PCPriorSigma:
    return PCPriorSigma(U, alpha)


@dataclass
class PCPriorPhi:
    """PC prior on the BYM2 mixing proportion, with ``P(phi < U) = alpha``.

    The distance from the base model ``phi = 0`` is ``sqrt(2 KLD(phi))`` with
    ``KLD(phi) = (phi * sum(g - 1) - sum(log(1 + phi (g - 1)))) / 2``, where
    ``g`` are the eigenvalues of the scaled structure's generalized inverse.
    """

    eigenvalues: np.ndarray
    U: float = 0.5
    alpha: float = 2.0 / 3.0
    _norm: float = field(default=1.0, init=False)

    def __post_init__(self):
        if not 0 < self.U < 1:
            raise ValueError("U must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.eigenvalues = np.asarray(self.eigenvalues, float)
        self._a = self.eigenvalues - 1.0
        if not np.any(np.abs(self._a) > 1e-12):
            raise ValueError("structure has no spatial signal (all eigenvalues equal 1)")
        self.theta = -np.log(1.0 - self.alpha) / float(self.distance(self.U)[0])
        # the distance is exponential on [0, d(1)); d(1) is infinite when the
        # structure has a null space, so the normaliser is usually exactly 1
        self._norm = float(-np.expm1(-self.theta * self.distance(1.0)[0]))

    def kld(self, phi):
        phi = np.atleast_1d(np.asarray(phi, float))
        a = self._a
        out = np.empty_like(phi)
        small = phi < 1e-3
        if np.any(small):
            p = phi[small][:, None]
            pa = p * a
            out[small] = 0.5 * np.sum(pa**2 / 2 - pa**3 / 3 + pa**4 / 4 - pa**5 / 5, axis=1)
        big = ~small
        if np.any(big):
            p = phi[big][:, None]
            with np.errstate(divide="ignore"):
                out[big] = 0.5 * (p[:, 0] * a.sum() - np.sum(np.log1p(p * a), axis=1))
        return out

    def distance(self, phi):
        return np.sqrt(2.0 * np.maximum(self.kld(phi), 0.0))

    def _ddistance(self, phi):
        phi = np.atleast_1d(np.asarray(phi, float))
        a = self._a
        dk = 0.5 * np.sum(a**2 * phi[:, None] / (1.0 + phi[:, None] * a), axis=1)
        d = self.distance(phi)
        lim = np.sqrt(0.5 * np.sum(a**2))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(d > 1e-10, dk / d, lim)

    def logpdf(self, phi):
        phi = np.atleast_1d(np.asarray(phi, float))
        inside = (phi > 0) & (phi < 1)
        out = np.full(phi.shape, -np.inf)
        p = phi[inside]
        if p.size:
            d = self.distance(p)
            dd = self._ddistance(p)
            with np.errstate(divide="ignore"):
                out[inside] = np.log(self.theta) - self.theta * d + np.log(dd) - np.log(self._norm)
        return out

    def pdf(self, phi):
        return np.exp(self.logpdf(phi))

    def cdf(self, phi):
        return float(-np.expm1(-self.theta * self.distance(phi)[0]) / self._norm)

    def logpdf_internal(self, logit_phi):
        x = np.atleast_1d(np.asarray(logit_phi, float))
        phi = expit(x)
        jac = -np.logaddexp(0, -x) - np.logaddexp(0, x)
        out = self.logpdf(phi) + jac
        hi = x > 0
        if np.any(hi):
            out[hi] = self._logpdf_upper(x[hi])
        return out

    def _logpdf_upper(self, x):
        """Density on the logit scale for positive logits, stable as phi -> 1.

        Uses ``1 + phi (g - 1) = (g + exp(-x)) / (1 + exp(-x))`` so the
        null-space terms never form ``1 - phi`` explicitly.
        """
        a = self._a
        g = a + 1.0
        e = np.exp(-x)[:, None]
        phi = expit(x)
        with np.errstate(divide="ignore"):
            log_g = np.log(np.maximum(g, 0.0))
        log_terms = np.logaddexp(log_g[None, :], -x[:, None]) - np.log1p(e)
        kld = 0.5 * (phi * a.sum() - log_terms.sum(axis=1))
        d = np.sqrt(2.0 * np.maximum(kld, 0.0))
        with np.errstate(invalid="ignore"):
            ratio = np.where(g[None, :] > 0, e / (g[None, :] + e), 1.0)
        dkld = 0.5 * phi**2 * np.sum(a**2 * ratio, axis=1)
        return np.log(self.theta) - self.theta * d + np.log(dkld / d) - np.log(self._norm)

    def sample(self, rng, size=None):
        # distance is exponential; invert numerically on a grid
        grid = np.linspace(0.0, 1.0, 20001)[1:-1]
        d = self.distance(grid)
        u = rng.uniform(size=size) * self._norm
        draws = -np.log1p(-u) / self.theta
        return np.interp(draws, d, grid, right=grid[-1])

    def mode_internal(self) -> float:
        grid = np.linspace(-6, 6, 241)
        return float(grid[np.argmax(self.logpdf_internal(grid))])


def pc_prior_phi(structure: StructureMatrix, U: float = 0.5, alpha: float = 2.0 / 3.0) -> PCPriorPhi:
    if not structure.scaled:
        raise ValueError("PC prior for phi needs a scaled structure")
    vals, _ = structure.eigen()
    return PCPriorPhi(vals, U, alpha)


@dataclass(frozen=True)
class LogNormalPrior:
    """Log-normal prior given by median and log-scale standard deviation."""

    median: float = 10.0
    log_sd: float = 2.0

    def logpdf(self, x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(x) - np.log(self.median)) / self.log_sd
            return np.where(x > 0, -0.5 * z**2 - np.log(x * self.log_sd * np.sqrt(2 * np.pi)), -np.inf)

    def logpdf_internal(self, log_x):
        z = (np.asarray(log_x, float) - np.log(self.median)) / self.log_sd
        return -0.5 * z**2 - np.log(self.log_sd * np.sqrt(2 * np.pi))

    def mode_internal(self) -> float:
        return float(np.log(self.median))

    def sample(self, rng, size=None):
        return np.exp(rng.normal(np.log(self.median), self.log_sd, size))


@dataclass(frozen=True)
class NormalPrior:
    mean: float = 0.0
    variance: float = 1000.0

    def logpdf(self, x):
        x = np.asarray(x, float)
        return -0.5 * (x - self.mean) ** 2 / self.variance - 0.5 * np.log(2 * np.pi * self.variance)


ZETA_PRIOR = NormalPrior(0.05, 0.1)
FIXED_EFFECT_PRIOR = NormalPrior(0.0, 1000.0)
