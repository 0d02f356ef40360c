"""Latent Gaussian model specification and its compiled dense form.

A model has ``n_rows`` linear-predictor rows.  Each row is
``eta = sum_k f_k * beta_k + sum_b x_b[index_b]``: fixed effects with values
per row and random-effect blocks with a level index per row.  Data points
point at predictor rows, so several observations (e.g. clusters) can share
one predictor value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .likelihood import nb_eta_core

from .priors import FIXED_EFFECT_PRIOR, LogNormalPrior, NormalPrior, PCPriorPhi, PCPriorSigma
from .structures import StructureMatrix

logger = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
NEGATIVE_BINOMIAL = "nbinomial"


class SpecError(ValueError):
    pass


@dataclass
class FixedEffect:
    name: str
    values: np.ndarray
    prior: NormalPrior = FIXED_EFFECT_PRIOR
    report: bool = True


@dataclass
class EffectBlock:
    """A random-effect block.

    ``kind`` is ``"standard"`` (precision ``R / sigma^2`` with hard
    constraints ``C x = 0``) or ``"bym2"`` (precision built from the scaled
    structure's generalized inverse, mixing IID and structured variation).
    ``sigma`` / ``phi`` fix a hyperparameter instead of sampling it.
    """

    name: str
    structure: StructureMatrix
    index: np.ndarray
    kind: str = "standard"
    sigma_prior: PCPriorSigma = field(default_factory=PCPriorSigma)
    phi_prior: PCPriorPhi | None = None
    sigma: float | None = None
    phi: float | None = None
    report: bool = True

    @property
    def size(self) -> int:
        return self.structure.n


@dataclass
class Observations:
    """Data attached to predictor rows.

    ``variance`` is required for the Gaussian family, ``offset`` (exposure,
    positive) for the negative binomial.
    """

    row: np.ndarray
    y: np.ndarray
    variance: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.row = np.asarray(self.row, dtype=np.int64)
        self.y = np.asarray(self.y, float)
        if self.variance is not None:
            self.variance = np.asarray(self.variance, float)
        if self.offset is not None:
            self.offset = np.asarray(self.offset, float)

    def __len__(self):
        return self.y.size

    def subset(self, mask) -> "Observations":
        mask = np.asarray(mask)
        return Observations(
            self.row[mask],
            self.y[mask],
            None if self.variance is None else self.variance[mask],
            None if self.offset is None else self.offset[mask],
        )


@dataclass
class LatentModelSpec:
    n_rows: int
    fixed: list[FixedEffect]
    blocks: list[EffectBlock]
    family: str = GAUSSIAN
    d_prior: LogNormalPrior = field(default_factory=LogNormalPrior)
    d: float | None = None

    def validate(self):
        if self.family not in (GAUSSIAN, NEGATIVE_BINOMIAL):
            raise SpecError(f"unknown family {self.family!r}")
        names = [f.name for f in self.fixed] + [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise SpecError("component names must be unique")
        for f in self.fixed:
            if np.shape(f.values) != (self.n_rows,):
                raise SpecError(f"fixed effect {f.name} needs {self.n_rows} values")
            if not np.all(np.isfinite(f.values)):
                raise SpecError(f"fixed effect {f.name} has non-finite values")
        for b in self.blocks:
            idx = np.asarray(b.index)
            if idx.shape != (self.n_rows,):
                raise SpecError(f"block {b.name} needs {self.n_rows} indices")
            if idx.min(initial=0) < 0 or idx.max(initial=0) >= b.size:
                raise SpecError(f"block {b.name} index out of range")
            if b.kind not in ("standard", "bym2"):
                raise SpecError(f"block {b.name}: unknown kind {b.kind!r}")
            if b.kind == "bym2" and b.phi is None and b.phi_prior is None:
                raise SpecError(f"block {b.name}: BYM2 needs a phi prior or a fixed phi")
        if self.fixed:
            x = np.column_stack([f.values for f in self.fixed])
            if np.linalg.matrix_rank(x) < x.shape[1]:
                raise SpecError("fixed-effect design is rank deficient")


@dataclass
class HyperParameter:
    name: str
    block: int  # -1 for overdispersion
    kind: str  # "log_sigma", "logit_phi", "log_d"
    prior: object
    bounds: tuple[float, float]


class CompiledModel:
    """Dense representation used by the sampler."""

    def __init__(self, spec: LatentModelSpec, obs: Observations):
        spec.validate()
        self.spec = spec
        self.family = spec.family
        if np.any(obs.row < 0) or np.any(obs.row >= spec.n_rows):
            raise SpecError("observation rows out of range")
        if self.family == GAUSSIAN:
            if obs.variance is None or np.any(~(obs.variance > 0)):
                raise SpecError("Gaussian observations need positive variances")
        else:
            if obs.offset is None or np.any(~(obs.offset > 0)):
                raise SpecError("negative-binomial observations need positive offsets")
            if np.any(obs.y < 0):
                raise SpecError("counts must be non-negative")
        if not np.all(np.isfinite(obs.y)):
            raise SpecError("non-finite observations")
        self.obs = obs

        # latent layout
        self.slices: dict[str, slice] = {}
        names = []
        start = 0
        for f in spec.fixed:
            self.slices[f.name] = slice(start, start + 1)
            names.append(f.name)
            start += 1
        self.n_fixed = start
        for b in spec.blocks:
            self.slices[b.name] = slice(start, start + b.size)
            names += [f"{b.name}[{i}]" for i in range(b.size)]
            start += b.size
        self.P = start
        self.names = names

        # design matrix
        rows, cols, vals = [], [], []
        r = np.arange(spec.n_rows)
        for f in spec.fixed:
            rows.append(r)
            cols.append(np.full(spec.n_rows, self.slices[f.name].start))
            vals.append(np.asarray(f.values, float))
        for b in spec.blocks:
            rows.append(r)
            cols.append(self.slices[b.name].start + np.asarray(b.index, dtype=np.int64))
            vals.append(np.ones(spec.n_rows))
        self.A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(spec.n_rows, self.P)
        )
        report = np.ones(self.P, dtype=bool)
        for f in spec.fixed:
            report[self.slices[f.name]] = f.report
        for b in spec.blocks:
            report[self.slices[b.name]] = b.report
        self.report_mask = report
        self.A_report = (self.A @ sp.diags(report.astype(float))).tocsr()

        # rows carrying data
        self.data_rows = np.unique(obs.row)
        self.obs_pos = np.searchsorted(self.data_rows, obs.row)
        self.A_data = self.A[self.data_rows].tocsr()
        self._pair_setup()

        # fixed-effect priors
        self.prior_mean = np.zeros(self.P)
        self.fixed_prec = np.zeros(self.P)
        for f in spec.fixed:
            s = self.slices[f.name].start
            self.prior_mean[s] = f.prior.mean
            self.fixed_prec[s] = 1.0 / f.prior.variance
        self.fixed_logdet = float(np.sum(np.log(self.fixed_prec[: self.n_fixed])))

        # constraints
        # a BYM2 block with phi fixed at 1 is the constrained scaled structure itself
        self._standard = [b.kind == "standard" or (b.phi is not None and b.phi >= 1.0) for b in spec.blocks]
        c_rows = []
        for b, std in zip(spec.blocks, self._standard):
            if std and b.structure.constraints.shape[0]:
                c = np.zeros((b.structure.constraints.shape[0], self.P))
                c[:, self.slices[b.name]] = b.structure.constraints
                c_rows.append(c)
        self.C = np.vstack(c_rows) if c_rows else np.zeros((0, self.P))
        self.CtC = self.C.T @ self.C

        # block caches
        self._eig = {}
        for k, b in enumerate(spec.blocks):
            if b.kind == "bym2":
                vals, vecs = b.structure.eigen()
                self._eig[k] = (vals, vecs)

        # hyperparameters
        hp = []
        for k, b in enumerate(spec.blocks):
            if b.sigma is None:
                hp.append(HyperParameter(f"sigma[{b.name}]", k, "log_sigma", b.sigma_prior, (-9.0, 4.0)))
            if b.kind == "bym2" and b.phi is None:
                hp.append(HyperParameter(f"phi[{b.name}]", k, "logit_phi", b.phi_prior, (-9.0, 9.0)))
        if self.family == NEGATIVE_BINOMIAL and spec.d is None:
            hp.append(HyperParameter("d", -1, "log_d", spec.d_prior, (-4.0, 14.0)))
        self.hyper = hp
        self.H = len(hp)
        self.hyper_names = [h.name for h in hp]

        if self.family == GAUSSIAN:
            w = 1.0 / obs.variance
            self.gauss_h = np.bincount(self.obs_pos, weights=w, minlength=self.data_rows.size)
            self.gauss_b = np.bincount(self.obs_pos, weights=w * obs.y, minlength=self.data_rows.size)
            self.gauss_const = float(-0.5 * np.sum(obs.y**2 * w + np.log(2 * np.pi * obs.variance)))
        else:
            self.log_offset = np.log(obs.offset)
            self._lgy1 = float(np.sum(gammaln(obs.y + 1)))
            self._nb_cache = (None, 0.0)

    # ------------------------------------------------------------------
    def _pair_setup(self):
        """Precompute flat (p, q) indices so ``A' diag(h) A`` is one bincount."""
        a = self.A_data.tocsr()
        a.sort_indices()
        counts = np.diff(a.indptr)
        pr, pc, pv, rr = [], [], [], []
        for k in np.unique(counts):
            rows = np.flatnonzero(counts == k)
            if k == 0:
                continue
            starts = a.indptr[rows]
            idx = starts[:, None] + np.arange(k)[None, :]
            cols = a.indices[idx]
            vals = a.data[idx]
            pr.append(np.repeat(cols, k, axis=1).ravel())
            pc.append(np.tile(cols, (1, k)).ravel())
            pv.append((vals[:, :, None] * vals[:, None, :]).ravel())
            rr.append(np.repeat(rows, k * k))
        if pr:
            self._pair_flat = np.concatenate(pr) * self.P + np.concatenate(pc)
            self._pair_val = np.concatenate(pv)
            self._pair_row = np.concatenate(rr)
        else:
            self._pair_flat = np.zeros(0, dtype=np.int64)
            self._pair_val = np.zeros(0)
            self._pair_row = np.zeros(0, dtype=np.int64)

    def data_precision(self, h_rows: np.ndarray) -> np.ndarray:
        """Dense ``A_data' diag(h) A_data``."""
        w = self._pair_val * h_rows[self._pair_row]
        return np.bincount(self._pair_flat, weights=w, minlength=self.P * self.P).reshape(self.P, self.P)

    # ------------------------------------------------------------------
    def unpack(self, theta: np.ndarray) -> tuple[list[float], list[float], float | None]:
        """Natural-scale (sigma per block, phi per block, d) from internal ``theta``."""
        sig = [b.sigma for b in self.spec.blocks]
        phi = [b.phi for b in self.spec.blocks]
        d = self.spec.d
        for t, h in zip(theta, self.hyper):
            if h.kind == "log_sigma":
                sig[h.block] = float(np.exp(t))
            elif h.kind == "logit_phi":
                phi[h.block] = float(1.0 / (1.0 + np.exp(-t)))
            else:
                d = float(np.exp(t))
        return sig, phi, d

    def natural_hyper(self, theta: np.ndarray) -> np.ndarray:
        out = np.empty(self.H)
        for i, (t, h) in enumerate(zip(theta, self.hyper)):
            out[i] = 1.0 / (1.0 + np.exp(-t)) if h.kind == "logit_phi" else np.exp(t)
        return out

    def log_hyperprior(self, theta: np.ndarray) -> float:
        lp = 0.0
        for t, h in zip(theta, self.hyper):
            lp += float(np.squeeze(h.prior.logpdf_internal(t)))
        return lp

    def prior_precision(self, theta) -> tuple[np.ndarray, float]:
        """Prior precision of x and the theta-dependent part of its log normaliser."""
        sig, phi, _ = self.unpack(theta)
        q = np.diag(self.fixed_prec)
        logdet = 0.0
        for k, b in enumerate(self.spec.blocks):
            s = self.slices[b.name]
            if self._standard[k]:
                tau = 1.0 / sig[k] ** 2
                q[s, s] = tau * b.structure.matrix
                logdet += b.structure.rank * np.log(tau)
            else:
                vals, vecs = self._eig[k]
                var = sig[k] ** 2 * (1.0 - phi[k] + phi[k] * vals)
                q[s, s] = (vecs / var) @ vecs.T
                logdet -= float(np.sum(np.log(var)))
        return q, logdet

    def log_prior_x(self, x, q, logdet) -> float:
        r = x - self.prior_mean
        return 0.5 * logdet - 0.5 * float(r @ q @ r)

    def eta_data(self, x) -> np.ndarray:
        return self.A_data @ x

    def _nb_const(self, d: float) -> float:
        """Log-likelihood terms that depend on ``d`` but not on the predictor."""
        cached_d, c = self._nb_cache  # one tuple read keeps this safe across chain threads
        if cached_d != d:
            y = self.obs.y
            c = float(np.sum(gammaln(y + d)) - y.size * gammaln(d) - self._lgy1 + y.size * d * np.log(d))
            self._nb_cache = (d, c)
        return c

    def loglik_terms(self, eta_rows, theta):
        """Log-likelihood plus per-row gradient and negative Hessian."""
        if self.family == GAUSSIAN:
            ll = self.gauss_const + float(self.gauss_b @ eta_rows) - 0.5 * float(self.gauss_h @ eta_rows**2)
            grad = self.gauss_b - self.gauss_h * eta_rows
            return ll, grad, self.gauss_h
        _, _, d = self.unpack(theta)
        ll, g, h = nb_eta_core(self.obs.y, self.log_offset, eta_rows[self.obs_pos], d)
        n = self.data_rows.size
        return (
            ll + self._nb_const(d),
            np.bincount(self.obs_pos, weights=g, minlength=n),
            np.bincount(self.obs_pos, weights=h, minlength=n),
        )

    def loglik(self, eta_rows, theta) -> float:
        if self.family == GAUSSIAN:
            return self.gauss_const + float(self.gauss_b @ eta_rows) - 0.5 * float(self.gauss_h @ eta_rows**2)
        _, _, d = self.unpack(theta)
        mu = np.exp(self.log_offset + eta_rows[self.obs_pos])
        y = self.obs.y
        return float(y @ np.log(mu) - (y + d) @ np.log(d + mu)) + self._nb_const(d)

    def initial_theta(self) -> np.ndarray:
        return np.array([h.prior.mode_internal() if h.kind != "log_sigma" else np.log(0.3) for h in self.hyper])


def compile_model(spec: LatentModelSpec, obs: Observations) -> CompiledModel:
    return CompiledModel(spec, obs)
