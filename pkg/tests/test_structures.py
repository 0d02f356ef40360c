import numpy as np
import pytest

from fertsae.gmrf.model import EffectBlock, LatentModelSpec, Observations
from fertsae.gmrf.priors import pc_prior_phi
from fertsae.gmrf.sampler import SamplerSettings, sample_posterior
from fertsae.gmrf.structures import build_interaction, build_structure, icar, iid, rw1, rw2
from fertsae.survey import GraphError, RegionGraph


def pinv_geometric_mean(q):
    """Geometric mean of the Moore-Penrose inverse diagonal, via a dense eigendecomposition."""
    vals, vecs = np.linalg.eigh(q)
    keep = vals > 1e-9 * vals.max()
    cov = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return float(np.exp(np.mean(np.log(np.diag(cov)))))


def test_rw1_n3_matrix():
    np.testing.assert_array_equal(rw1(3, scale=False).matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_icar_path_equals_rw1(path3):
    np.testing.assert_array_equal(icar(path3, scale=False).matrix, rw1(3, scale=False).matrix)


def test_rw2_pentadiagonal_and_rank():
    s = rw2(6, scale=False)
    q = s.matrix
    assert np.all(np.triu(q, 3) == 0)
    np.testing.assert_array_equal(q[0, :3], [1, -2, 1])
    assert s.rank == 4
    np.testing.assert_allclose(q @ np.arange(6.0), 0, atol=1e-12)


@pytest.mark.parametrize("kind, size", [("rw1", 7), ("rw2", 9), ("rw1", 3), ("rw2", 3)])
def test_scaled_gm_matches_eigen_oracle(kind, size):
    s = build_structure(kind, size)
    assert abs(pinv_geometric_mean(s.matrix) - 1.0) <= 1e-6
    assert abs(s.geometric_mean_variance() - 1.0) <= 1e-6


def test_scaled_icar_graph23(graph23):
    s = icar(graph23)
    assert abs(pinv_geometric_mean(s.matrix) - 1.0) <= 1e-6
    assert s.rank == 22


def test_scaled_interaction_gm(graph23):
    s = build_interaction(icar(graph23), rw2(9))
    assert abs(pinv_geometric_mean(s.matrix) - 1.0) <= 1e-6


def test_interaction_rank_and_constraints(path3):
    s = build_interaction(icar(path3, scale=False), rw1(3, scale=False))
    assert s.matrix.shape == (9, 9)
    assert np.linalg.matrix_rank(s.matrix) == 4
    assert s.constraints.shape[0] == 5
    np.testing.assert_allclose(s.constraints @ s.matrix, 0, atol=1e-10)


def test_interaction_symmetry_under_permutation():
    a, b = rw1(3, scale=False), rw2(4, scale=False)
    ab = build_interaction(a, b).matrix
    ba = build_interaction(b, a).matrix
    perm = np.array([j * 3 + i for i in range(3) for j in range(4)])
    np.testing.assert_array_equal(ab, ba[np.ix_(perm, perm)])


def test_constraint_span_is_null(graph23, rng):
    for s in (rw1(7), rw2(9), icar(graph23), build_interaction(icar(graph23), rw1(7))):
        x = rng.normal(size=s.constraints.shape[0]) @ s.constraints
        assert abs(x @ s.matrix @ x) <= 1e-8 * max(1.0, x @ x)


def test_symmetric_psd(graph23, rng):
    for s in (rw1(7), rw2(9), icar(graph23), build_interaction(rw1(7), rw2(5)), iid(4)):
        assert np.array_equal(s.matrix, s.matrix.T)
        for _ in range(20):
            x = rng.normal(size=s.n)
            assert x @ s.matrix @ x >= -1e-10


def test_row_sums_zero(graph23):
    for s in (rw1(5, scale=False), rw2(6, scale=False), icar(graph23, scale=False)):
        np.testing.assert_allclose(s.matrix.sum(axis=1), 0, atol=1e-12)


def test_disconnected_graph_per_component():
    g = RegionGraph.from_edges(6, [(0, 1), (1, 2), (3, 4)])
    s = icar(g)
    assert s.constraints.shape[0] == 2
    assert s.matrix[5, 5] == 1.0
    var = s.marginal_variances()
    for comp in ([0, 1, 2], [3, 4]):
        assert abs(np.exp(np.mean(np.log(var[comp]))) - 1.0) <= 1e-6
    assert var[5] == pytest.approx(1.0)


def test_structure_errors():
    with pytest.raises(ValueError):
        rw1(1)
    with pytest.raises(ValueError):
        rw2(2)
    with pytest.raises(TypeError):
        build_structure("icar", 5)
    with pytest.raises(GraphError):
        icar(RegionGraph.from_edges(1, []))
    with pytest.raises(ValueError):
        build_interaction(iid(3), rw1(3))


@pytest.mark.parametrize("phi", [0.0, 1.0])
def test_bym2_prior_covariance(graph23, phi):
    """Prior draws of a BYM2 block with fixed (sigma, phi) have the composed covariance."""
    n = graph23.n
    s = icar(graph23)
    sigma = 0.7
    block = EffectBlock(
        "u", s, np.arange(n), kind="bym2", sigma=sigma, phi=phi, phi_prior=pc_prior_phi(s)
    )
    spec = LatentModelSpec(n, [], [block])
    obs = Observations(np.zeros(0), np.zeros(0), variance=np.zeros(0))
    draws = sample_posterior(spec, obs, SamplerSettings(n_draws=4000, burn_in=0, chains=1, seed=3)).x
    target = sigma**2 * (np.eye(n) if phi == 0 else s.generalized_inverse())
    emp = np.cov(draws, rowvar=False)
    # MC-SE of a sample covariance entry: sqrt((s_ii s_jj + s_ij^2) / m)
    d = np.diag(target)
    se = np.sqrt((np.outer(d, d) + target**2) / draws.shape[0])
    z = np.abs(emp - target) / se
    assert np.mean(z <= 3) >= 0.98
    assert z.max() < 5
