"""Structure matrices for intrinsic and proper Gaussian Markov random fields.

Matrices are held dense: the models in this package have at most a few
thousand latent values and dense LAPACK is faster than a pure-Python sparse
Cholesky at that size.  Every structured matrix carries a constraint matrix
whose rows span its null space, so ``C x = 0`` makes the prior proper.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from ..survey import GraphError, RegionGraph

logger = logging.getLogger(__name__)

KINDS = ("iid", "rw1", "rw2", "icar", "kronecker")
MAX_KRON_DIM = 20_000
_NULL_TOL = 1e-8


@dataclass
class StructureMatrix:
    """Symmetric positive semi-definite structure ``R`` with constraints.

    Attributes
    ----------
    kind : str
    matrix : ndarray (n, n)
    constraints : ndarray (k, n)
        Rows span the null space of ``matrix`` (empty for full-rank kinds).
    scale : float
        Factor already multiplied into ``matrix``; 1.0 when unscaled.
    scaled : bool
    components : list of index arrays, for graph-based kinds.
    """

    kind: str
    matrix: np.ndarray
    constraints: np.ndarray
    scale: float = 1.0
    scaled: bool = False
    components: list = field(default_factory=list)
    factors: tuple = ()

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def rank(self) -> int:
        return self.n - self.constraints.shape[0]

    @property
    def rank_deficiency(self) -> int:
        return self.constraints.shape[0]

    def generalized_inverse(self) -> np.ndarray:
        """Covariance of the field under ``C x = 0``."""
        return _constrained_inverse(self.matrix, self.constraints)

    def marginal_variances(self) -> np.ndarray:
        return np.diag(self.generalized_inverse()).copy()

    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues and eigenvectors of the generalized inverse."""
        cov = self.generalized_inverse()
        vals, vecs = np.linalg.eigh(cov)
        vals[np.abs(vals) < _NULL_TOL * max(vals.max(), 1.0)] = 0.0
        return vals, vecs

    def geometric_mean_variance(self) -> float:
        return float(np.exp(np.mean(np.log(self.marginal_variances()))))


def _constrained_inverse(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Covariance of N(0, Q^-1) restricted to ``C x = 0``.

    For rows of ``C`` spanning the null space this equals the Moore-Penrose
    inverse when ``C`` is orthonormal; in general it is the kriging-corrected
    inverse of ``Q + C'C``.
    """
    if c.shape[0] == 0:
        return np.linalg.inv(q)
    g = q + c.T @ c
    gi = np.linalg.inv(g)
    v = gi @ c.T
    w = c @ v
    cov = gi - v @ np.linalg.solve(w, v.T)
    return 0.5 * (cov + cov.T)


def _null_basis(q: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(q)
    tol = _NULL_TOL * max(1.0, np.abs(vals).max())
    return vecs[:, np.abs(vals) < tol].T


def iid(n: int) -> StructureMatrix:
    if n < 1:
        raise ValueError("iid needs n >= 1")
    return StructureMatrix("iid", np.eye(n), np.zeros((0, n)), 1.0, True)


def _difference_matrix(n: int, order: int) -> np.ndarray:
    return np.diff(np.eye(n), n=order, axis=0)


def rw1(n: int, scale: bool = True) -> StructureMatrix:
    if n < 2:
        raise ValueError("RW1 needs n >= 2")
    d = _difference_matrix(n, 1)
    s = StructureMatrix("rw1", d.T @ d, np.ones((1, n)))
    return scale_structure(s) if scale else s


def rw2(n: int, scale: bool = True) -> StructureMatrix:
    """Second-order random walk; constrained on the constant and linear trend."""
    if n < 3:
        raise ValueError("RW2 needs n >= 3")
    d = _difference_matrix(n, 2)
    t = np.arange(n, dtype=float)
    t = t - t.mean()
    c = np.vstack([np.ones(n), t / np.linalg.norm(t) * np.sqrt(n)])
    s = StructureMatrix("rw2", d.T @ d, c)
    return scale_structure(s) if scale else s


def icar(graph: RegionGraph, scale: bool = True) -> StructureMatrix:
    """Besag intrinsic CAR structure with one sum-to-zero constraint per component.

    Isolated regions get a unit diagonal entry and no constraint, which makes
    them independent standard normal under the structure.
    """
    n = graph.n
    if n < 2:
        raise GraphError("ICAR needs at least 2 regions")
    a = graph.adjacency().toarray()
    if not np.array_equal(a, a.T):
        raise GraphError("adjacency is not symmetric")
    if np.any(np.diag(a)):
        raise GraphError("adjacency has self-loops")
    q = np.diag(a.sum(axis=1)) - a
    comps = graph.components()
    rows = []
    for comp in comps:
        if comp.size == 1:
            q[comp[0], comp[0]] = 1.0
            continue
        r = np.zeros(n)
        r[comp] = 1.0
        rows.append(r)
    c = np.array(rows) if rows else np.zeros((0, n))
    if len(comps) > 1:
        sizes = sorted((len(cp) for cp in comps), reverse=True)
        logger.info("graph has %d connected components (sizes %s)", len(comps), sizes)
    s = StructureMatrix("icar", q, c, components=comps)
    return scale_structure(s) if scale else s


def scale_structure(s: StructureMatrix) -> StructureMatrix:
    """Rescale so each connected component's marginal variances have geometric mean 1.

    Singleton components are left unscaled.  ``scale`` stores the overall
    geometric-mean factor for single-component structures.
    """
    comps = s.components or [np.arange(s.n)]
    q = s.matrix.copy()
    factors = []
    for comp in comps:
        if comp.size == 1:
            continue
        sub = np.ix_(comp, comp)
        rows = s.constraints[:, comp]
        rows = rows[np.abs(rows).sum(axis=1) > 0]
        cov = _constrained_inverse(q[sub], rows)
        gm = float(np.exp(np.mean(np.log(np.diag(cov)))))
        q[sub] *= gm
        factors.append(gm)
    scale = factors[0] if len(factors) == 1 else float(np.prod(factors) ** (1 / max(len(factors), 1)))
    return StructureMatrix(s.kind, q, s.constraints.copy(), scale, True, list(comps), s.factors)


def build_structure(kind: str, size, scale: bool = True) -> StructureMatrix:
    """Dispatch on ``kind``; ``size`` is an int or a :class:`RegionGraph` for ICAR."""
    if kind == "iid":
        return iid(int(size))
    if kind == "rw1":
        return rw1(int(size), scale)
    if kind == "rw2":
        return rw2(int(size), scale)
    if kind == "icar":
        if not isinstance(size, RegionGraph):
            raise TypeError("ICAR needs a RegionGraph")
        return icar(size, scale)
    raise ValueError(f"unknown structure kind {kind!r}")


def _independent_rows(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if m.shape[0] == 0:
        return m
    _, r, piv = sla.qr(m.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    k = int(np.sum(d > tol * d.max()))
    return m[np.sort(piv[:k])]


def build_interaction(a: StructureMatrix, b: StructureMatrix) -> StructureMatrix:
    """Kronecker (type IV) interaction ``A (x) B``, indexed ``i * n_b + j``.

    The constraint rows span the null space of the product: the null space
    of ``A`` crossed with every level of ``B``, and every level of ``A``
    crossed with the null space of ``B``, with dependent rows removed.
    """
    if a.kind == "iid" or b.kind == "iid":
        raise ValueError("interaction factors must both be structured")
    n = a.n * b.n
    if n > MAX_KRON_DIM:
        raise ValueError(f"interaction dimension {n} exceeds {MAX_KRON_DIM}")
    q = np.kron(a.matrix, b.matrix)
    na = _null_space_rows(a)
    nb = _null_space_rows(b)
    rows = []
    if na.shape[0]:
        rows.append(np.kron(na, np.eye(b.n)))
    if nb.shape[0]:
        rows.append(np.kron(np.eye(a.n), nb))
    c = _independent_rows(np.vstack(rows)) if rows else np.zeros((0, n))
    return StructureMatrix(
        "kronecker", q, c, a.scale * b.scale, a.scaled and b.scaled, [np.arange(n)], (a.kind, b.kind)
    )


def _null_space_rows(s: StructureMatrix) -> np.ndarray:
    """Basis of the null space of ``s.matrix`` (may include isolated-node directions)."""
    return _null_basis(s.matrix)
