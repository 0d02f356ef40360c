"""Posterior sampling for latent Gaussian models.

Hyperparameters ``theta`` and the latent field ``x`` are updated jointly:
``theta*`` is proposed from a mixture of an adaptive random walk and an
independence multivariate t centred at the Laplace-approximate mode, then
``x*`` is drawn from a Gaussian approximation of ``x | theta*, y`` built at
its conditional mode.  For Gaussian observations that approximation is exact.
Linear constraints are imposed on every draw by conditioning by kriging.
Each iteration also makes an independence move on ``x`` alone.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy import optimize, stats
from scipy.special import gammaln

from .model import GAUSSIAN, CompiledModel, LatentModelSpec, Observations

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """The sampler or mode search failed."""


@dataclass
class SamplerSettings:
    n_draws: int = 1000
    burn_in: int = 500
    thin: int = 1
    chains: int = 2
    seed: int = 0
    threads: int | None = None
    p_independence: float = 0.4
    t_df: float = 5.0
    newton_tol: float = 1e-8
    newton_max: int = 100
    min_acceptance: float = 0.01
    optimize: bool = True
    init_theta: np.ndarray | None = None
    init_cov: np.ndarray | None = None


@dataclass
class GaussianApprox:
    theta: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of G
    mu_u: np.ndarray
    mode: np.ndarray
    V: np.ndarray  # G^-1 C'
    w_chol: np.ndarray | None
    logdet_g: float
    logdet_w: float
    w_quad: float
    prior_q: np.ndarray
    prior_logdet: float
    C: np.ndarray

    def constrain(self, x: np.ndarray) -> np.ndarray:
        if self.w_chol is None:
            return x
        cx = self.C @ x
        return x - self.V @ sla.cho_solve((self.w_chol, True), cx)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.mu_u.size)
        x = self.mu_u + sla.solve_triangular(self.chol, z, lower=True, trans="T", check_finite=False)
        x = self.constrain(x)
        if self.w_chol is not None and np.max(np.abs(self.C @ x), initial=0.0) > 1e-10:
            x = self.constrain(x)
        return x

    def logq(self, x: np.ndarray) -> float:
        r = self.chol.T @ (x - self.mu_u)
        return 0.5 * self.logdet_g - 0.5 * float(r @ r) + 0.5 * self.logdet_w + 0.5 * self.w_quad


class LatentSampler:
    """Gaussian approximations, Laplace marginal and the MCMC kernel for one model."""

    def __init__(self, model: CompiledModel, settings: SamplerSettings):
        self.m = model
        self.s = settings
        self._last_mode = None
        self.n_approx = 0

    # ------------------------------------------------------------------
    def _factor(self, g: np.ndarray):
        try:
            return sla.cholesky(g, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise ConvergenceError("latent precision not positive definite") from exc

    def _finish(self, theta, l, b, q, logdet):
        m = self.m
        mu_u = sla.cho_solve((l, True), b, check_finite=False)
        logdet_g = 2.0 * float(np.sum(np.log(np.diag(l))))
        if m.C.shape[0]:
            v = sla.cho_solve((l, True), m.C.T, check_finite=False)
            w = m.C @ v
            wl = self._factor(0.5 * (w + w.T))
            cmu = m.C @ mu_u
            wq = float(cmu @ sla.cho_solve((wl, True), cmu))
            logdet_w = 2.0 * float(np.sum(np.log(np.diag(wl))))
        else:
            v = np.zeros((m.P, 0))
            wl = None
            wq = 0.0
            logdet_w = 0.0
        approx = GaussianApprox(theta, l, mu_u, mu_u, v, wl, logdet_g, logdet_w, wq, q, logdet, m.C)
        approx.mode = approx.constrain(mu_u)
        return approx

    def approx(self, theta: np.ndarray, x0: np.ndarray | None = None) -> GaussianApprox:
        """Gaussian approximation of ``x | theta, y`` at the constrained conditional mode."""
        m = self.m
        self.n_approx += 1
        theta = np.asarray(theta, float)
        q, logdet = m.prior_precision(theta)
        dq = np.diag(q)
        kappa = float(np.mean(dq[dq > 0])) if np.any(dq > 0) else 1.0
        base = q + kappa * m.CtC
        qm = q @ m.prior_mean
        if m.family == GAUSSIAN:
            g = base + m.data_precision(m.gauss_h)
            b = m.A_data.T @ m.gauss_b + qm
            return self._finish(theta, self._factor(g), b, q, logdet)

        x = np.array(m.prior_mean if x0 is None else x0, float)
        if x0 is None and self._last_mode is not None:
            x = self._last_mode.copy()
        obj = self._objective(x, theta, q)
        for _ in range(self.s.newton_max):
            eta = m.eta_data(x)
            _, grad, h = m.loglik_terms(eta, theta)
            g = base + m.data_precision(h)
            b = m.A_data.T @ (grad + h * eta) + qm
            l = self._factor(g)
            approx = self._finish(theta, l, b, q, logdet)
            step = approx.mode - x
            t = 1.0
            while True:
                cand = x + t * step
                new = self._objective(cand, theta, q)
                if new >= obj - 1e-10 * max(1.0, abs(obj)) or t < 1e-6:
                    break
                t *= 0.5
            x = cand
            obj = new
            if np.max(np.abs(t * step)) < self.s.newton_tol:
                break
        else:
            logger.debug("Newton iteration limit reached at theta=%s", theta)
        self._last_mode = approx.mode.copy()
        return approx

    def _objective(self, x, theta, q):
        r = x - self.m.prior_mean
        return self.m.loglik(self.m.eta_data(x), theta) - 0.5 * float(r @ q @ r)

    def log_joint(self, theta, x, approx: GaussianApprox) -> float:
        m = self.m
        r = x - m.prior_mean
        return (
            m.log_hyperprior(theta)
            + m.loglik(m.eta_data(x), theta)
            + 0.5 * approx.prior_logdet
            - 0.5 * float(r @ approx.prior_q @ r)
        )

    def log_marginal(self, theta, approx=None) -> float:
        """Laplace approximation of ``log pi(theta | y)`` up to a constant."""
        if approx is None:
            approx = self.approx(theta)
        x = approx.mode
        return self.log_joint(theta, x, approx) - approx.logq(x)

    # ------------------------------------------------------------------
    def find_mode(self, theta0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mode of the Laplace marginal and a covariance from its curvature."""
        m = self.m
        bounds = [h.bounds for h in m.hyper]
        theta0 = np.clip(np.asarray(theta0, float), [b[0] + 0.5 for b in bounds], [b[1] - 0.5 for b in bounds])

        def f(t):
            try:
                v = -self.log_marginal(t)
            except ConvergenceError:
                return 1e10
            return v if np.isfinite(v) else 1e10

        res = optimize.minimize(f, theta0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 200})
        mode = res.x
        cov = self.curvature_cov(mode, f, bounds)
        logger.info("hyperparameter mode %s (%d approximations)", np.round(mode, 3), self.n_approx)
        return mode, cov

    def curvature_cov(self, mode, f, bounds, h: float = 0.05) -> np.ndarray:
        k = mode.size
        f0 = f(mode)
        hess = np.zeros((k, k))
        e = np.eye(k) * h
        fp = [f(mode + e[i]) for i in range(k)]
        fm = [f(mode - e[i]) for i in range(k)]
        for i in range(k):
            hess[i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
            for j in range(i):
                fpp = f(mode + e[i] + e[j])
                fmm = f(mode - e[i] - e[j])
                hess[i, j] = hess[j, i] = (fpp - fp[i] - fp[j] + 2 * f0 - fm[i] - fm[j] + fmm) / (2 * h**2)
        vals, vecs = np.linalg.eigh(0.5 * (hess + hess.T))
        vals = np.clip(vals, 0.25, None)  # variance at most 4 on the internal scale
        return (vecs / vals) @ vecs.T

    # ------------------------------------------------------------------
    def run_chain(self, rng, theta0, center, cov, n_keep):
        m, s = self.m, self.s
        H = m.H
        n_iter = s.burn_in + n_keep * s.thin
        theta = np.array(theta0, float)
        approx = self.approx(theta)
        x = approx.sample(rng)
        lj = self.log_joint(theta, x, approx)
        lq = approx.logq(x)
        keep_x = np.empty((n_keep, m.P))
        keep_t = np.empty((n_keep, H))
        acc_theta = 0
        acc_x = 0
        n_post = 0
        hist = []
        rw_cov = cov * (2.38**2 / max(H, 1))
        rw_chol = np.linalg.cholesky(rw_cov) if H else None
        t_chol = np.linalg.cholesky(cov) if H else None
        t_icov = np.linalg.inv(cov) if H else None
        lo = np.array([h.bounds[0] for h in m.hyper])
        hi = np.array([h.bounds[1] for h in m.hyper])
        k = 0
        for it in range(n_iter):
            post = it >= s.burn_in
            if H:
                if rng.uniform() < s.p_independence:
                    z = rng.standard_normal(H)
                    w = rng.chisquare(s.t_df) / s.t_df
                    prop = center + t_chol @ z / np.sqrt(w)
                else:
                    prop = theta + rw_chol @ rng.standard_normal(H)
                accepted = False
                if np.all(prop > lo) and np.all(prop < hi):
                    try:
                        a_new = self.approx(prop, approx.mode)
                        x_new = a_new.sample(rng)
                        lj_new = self.log_joint(prop, x_new, a_new)
                        lq_new = a_new.logq(x_new)
                        log_r = (
                            lj_new
                            - lj
                            + lq
                            - lq_new
                            + self._log_qtheta(theta, prop, center, t_icov, rw_cov)
                            - self._log_qtheta(prop, theta, center, t_icov, rw_cov)
                        )
                        if np.isfinite(log_r) and np.log(rng.uniform()) < log_r:
                            theta, approx, x, lj, lq = prop, a_new, x_new, lj_new, lq_new
                            accepted = True
                    except ConvergenceError:
                        pass
                if post:
                    acc_theta += accepted
            # independence move on x given theta
            x_new = approx.sample(rng)
            lj_new = self.log_joint(theta, x_new, approx)
            lq_new = approx.logq(x_new)
            if np.log(rng.uniform()) < (lj_new - lq_new) - (lj - lq):
                x, lj, lq = x_new, lj_new, lq_new
                if post:
                    acc_x += 1
            if not post and H:
                hist.append(theta.copy())
                if it >= 199 and (it + 1) % 100 == 0:
                    emp = np.cov(np.array(hist[len(hist) // 2 :]).T).reshape(H, H)
                    rw_cov = emp * (2.38**2 / H) + 1e-6 * np.eye(H)
                    rw_chol = np.linalg.cholesky(rw_cov)
            if post:
                n_post += 1
                if (it - s.burn_in) % s.thin == 0:
                    keep_x[k] = x
                    keep_t[k] = theta
                    k += 1
        diag = {
            "theta_acceptance": acc_theta / n_post if H and n_post else 1.0,
            "x_acceptance": acc_x / n_post if n_post else 1.0,
        }
        return keep_x, keep_t, diag

    def _log_qtheta(self, to, frm, center, t_icov, rw_cov):
        p = self.s.p_independence
        lt = _mvt_logpdf(to, center, t_icov, self.s.t_df)
        lr = stats.multivariate_normal.logpdf(to, frm, rw_cov)
        return float(np.logaddexp(np.log(p) + lt, np.log1p(-p) + lr))


def _mvt_logpdf(x, mu, icov, df):
    k = x.size
    r = x - mu
    q = float(r @ icov @ r)
    sign, logdet = np.linalg.slogdet(icov)
    return (
        float(gammaln((df + k) / 2) - gammaln(df / 2))
        - 0.5 * k * np.log(df * np.pi)
        + 0.5 * logdet
        - 0.5 * (df + k) * np.log1p(q / df)
    )


@dataclass
class PosteriorSamples:
    """Posterior draws of the latent field and hyperparameters.

    ``x`` has one row per draw and one column per latent value (see
    ``names``); ``hyper`` holds hyperparameters on their natural scale.
    """

    model: CompiledModel
    x: np.ndarray
    hyper: np.ndarray
    theta: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return self.model.names

    @property
    def hyper_names(self) -> list[str]:
        return self.model.hyper_names

    @property
    def n_draws(self) -> int:
        return self.x.shape[0]

    def block(self, name: str) -> np.ndarray:
        return self.x[:, self.model.slices[name]]

    def predictor(self, rows=None, reported: bool = True) -> np.ndarray:
        """Draws of the linear predictor (draws x rows).

        With ``reported`` the components flagged as not reported (e.g. the
        cutoff adjustment) are left out.
        """
        a = self.model.A_report if reported else self.model.A
        if rows is not None:
            a = a[np.asarray(rows)]
        return np.asarray((a @ self.x.T).T)

    def constraint_residuals(self) -> np.ndarray:
        """Largest absolute constraint residual per draw."""
        c = self.model.C
        if c.shape[0] == 0:
            return np.zeros(self.n_draws)
        return np.max(np.abs(self.x @ c.T), axis=1)

    def hyper_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.hyper, columns=self.hyper_names)

    def to_long(self, include_latent: bool = True) -> pd.DataFrame:
        """Long-format ``draw, parameter, value`` table."""
        parts = []
        draws = np.arange(self.n_draws)
        if include_latent:
            parts.append(
                pd.DataFrame(
                    {
                        "draw": np.repeat(draws, self.x.shape[1]),
                        "parameter": np.tile(np.array(self.names, dtype=object), self.n_draws),
                        "value": self.x.ravel(),
                    }
                )
            )
        if self.hyper.shape[1]:
            parts.append(
                pd.DataFrame(
                    {
                        "draw": np.repeat(draws, self.hyper.shape[1]),
                        "parameter": np.tile(np.array(self.hyper_names, dtype=object), self.n_draws),
                        "value": self.hyper.ravel(),
                    }
                )
            )
        return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["draw", "parameter", "value"])


def effective_sample_size(chain: np.ndarray) -> float:
    """ESS from the initial monotone positive sequence of autocorrelations."""
    x = np.asarray(chain, float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    x = x - x.mean()
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (np.arange(n, 0, -1))
    acf /= acf[0]
    pairs = acf[: n - 1 : 2][: (n - 1) // 2] + acf[1:n:2][: (n - 1) // 2]
    s = 0.0
    prev = np.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        s += p
        prev = p
    tau = -1.0 + 2.0 * s
    return float(n / max(tau, 1e-12))


def sample_posterior(
    spec: LatentModelSpec | CompiledModel, obs: Observations | None = None, settings: SamplerSettings | None = None
) -> PosteriorSamples:
    """Run the sampler and return merged post-burn-in draws from all chains."""
    settings = settings or SamplerSettings()
    model = spec if isinstance(spec, CompiledModel) else CompiledModel(spec, obs)
    base = LatentSampler(model, settings)
    if model.H:
        theta0 = settings.init_theta if settings.init_theta is not None else model.initial_theta()
        if settings.optimize:
            center, cov = base.find_mode(theta0)
        else:
            center = np.asarray(theta0, float)
            cov = settings.init_cov if settings.init_cov is not None else np.eye(model.H) * 0.25
    else:
        center = np.zeros(0)
        cov = np.zeros((0, 0))
    seeds = np.random.SeedSequence(settings.seed).spawn(settings.chains)

    def one(i):
        smp = LatentSampler(model, settings)
        smp._last_mode = base._last_mode
        rng = np.random.default_rng(seeds[i])
        return smp.run_chain(rng, center, center, cov, settings.n_draws)

    workers = max(1, min(settings.threads or 1, settings.chains))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(settings.chains)))
    else:
        results = [one(i) for i in range(settings.chains)]
    xs = np.vstack([r[0] for r in results])
    ts = np.vstack([r[1] for r in results])
    acc = [r[2]["theta_acceptance"] for r in results]
    diag = {
        "theta_acceptance": acc,
        "x_acceptance": [r[2]["x_acceptance"] for r in results],
        "theta_mode": center,
        "theta_cov": cov,
        "n_chains": settings.chains,
    }
    if model.H:
        diag["ess"] = {
            name: float(sum(effective_sample_size(r[1][:, j]) for r in results))
            for j, name in enumerate(model.hyper_names)
        }
        if min(acc) < settings.min_acceptance:
            raise ConvergenceError(
                f"hyperparameter acceptance {min(acc):.3%} below {settings.min_acceptance:.0%} after burn-in"
            )
    hyper = np.array([model.natural_hyper(t) for t in ts]).reshape(len(ts), model.H)
    logger.info("sampled %d draws; acceptance %s", xs.shape[0], np.round(acc, 3))
    return PosteriorSamples(model, xs, hyper, ts, diag)
