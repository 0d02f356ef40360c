import numpy as np
import pytest

from fertsae.gmrf.model import (
    NEGATIVE_BINOMIAL,
    EffectBlock,
    FixedEffect,
    LatentModelSpec,
    Observations,
    SpecError,
)
from fertsae.gmrf.priors import NormalPrior, PCPriorSigma
from fertsae.gmrf.sampler import SamplerSettings, effective_sample_size, sample_posterior
from fertsae.gmrf.structures import iid, rw1
from oracles import fh_grid_oracle

FH_Y = np.array([-1.0, 1.5])
FH_V = np.array([0.3, 0.2])


def mc_se(draws):
    return np.std(draws) / np.sqrt(effective_sample_size(draws))


def conjugate_spec(kind):
    if kind == "fixed":
        return LatentModelSpec(1, [FixedEffect("x", np.ones(1), NormalPrior(0.0, 1.0))], [])
    return LatentModelSpec(1, [], [EffectBlock("x", iid(1), np.zeros(1, dtype=int), sigma=1.0)])


def fh_spec():
    return LatentModelSpec(
        2,
        [FixedEffect("intercept", np.ones(2))],
        [EffectBlock("u", iid(2), np.arange(2), sigma_prior=PCPriorSigma(1.0, 0.01))],
    )


@pytest.mark.parametrize("kind", ["fixed", "block"])
def test_conjugate_normal(kind):
    obs = Observations([0], [1.0], variance=[1.0])
    x = sample_posterior(conjugate_spec(kind), obs, SamplerSettings(n_draws=4000, burn_in=100, chains=2, seed=5)).x[:, 0]
    n = x.size
    assert abs(x.mean() - 0.5) <= 3 * mc_se(x)
    # sample-variance MC-SE for a normal: sigma^2 sqrt(2 / n)
    assert abs(x.var(ddof=1) - 0.5) <= 3 * 0.5 * np.sqrt(2 / n)


def test_fh_toy_matches_grid_oracle():
    spec = fh_spec()
    obs = Observations([0, 1], FH_Y, variance=FH_V)
    post = sample_posterior(spec, obs, SamplerSettings(n_draws=3000, burn_in=500, chains=2, seed=11))
    eta = post.predictor()
    oracle, sigma_mean = fh_grid_oracle(FH_Y, FH_V, spec.blocks[0].sigma_prior)
    np.testing.assert_allclose(eta.mean(axis=0), oracle, atol=0.02)
    assert abs(post.hyper[:, 0].mean() - sigma_mean) <= 0.1 * sigma_mean


def test_prior_only_recovers_prior_moments():
    prior = PCPriorSigma(1.0, 0.01)
    spec = LatentModelSpec(
        3,
        [FixedEffect("b", np.ones(3), NormalPrior(2.0, 4.0))],
        [EffectBlock("u", iid(3), np.arange(3), sigma_prior=prior)],
    )
    obs = Observations(np.zeros(0), np.zeros(0), variance=np.zeros(0))
    post = sample_posterior(spec, obs, SamplerSettings(n_draws=6000, burn_in=500, chains=2, seed=2))
    b = post.block("b")[:, 0]
    assert abs(b.mean() - 2.0) <= 3 * mc_se(b)
    sig = post.hyper[:, 0]
    assert abs(sig.mean() - 1 / prior.rate) <= 3 * mc_se(sig)
    u = post.block("u")[:, 0]
    assert abs(u.mean()) <= 3 * mc_se(u)
    # Var(u) = E[sigma^2] = 2 / rate^2; MC-SE from the squared draws
    assert abs(np.mean(u**2) - 2 / prior.rate**2) <= 3 * mc_se(u**2)


def test_same_seed_identical_draws():
    obs = Observations([0, 1], FH_Y, variance=FH_V)
    s = SamplerSettings(n_draws=200, burn_in=50, chains=2, seed=9)
    a = sample_posterior(fh_spec(), obs, s)
    b = sample_posterior(fh_spec(), obs, s)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.hyper, b.hyper)


def test_threads_do_not_change_draws():
    obs = Observations([0, 1], FH_Y, variance=FH_V)
    a = sample_posterior(fh_spec(), obs, SamplerSettings(n_draws=150, burn_in=50, chains=2, seed=9, threads=1))
    b = sample_posterior(fh_spec(), obs, SamplerSettings(n_draws=150, burn_in=50, chains=2, seed=9, threads=2))
    np.testing.assert_array_equal(a.x, b.x)


def test_constraints_hold_every_draw(rng):
    n = 12
    spec = LatentModelSpec(
        n,
        [FixedEffect("intercept", np.ones(n))],
        [EffectBlock("t", rw1(n), np.arange(n))],
    )
    y = np.sin(np.arange(n) / 2) + rng.normal(0, 0.2, n)
    post = sample_posterior(spec, Observations(np.arange(n), y, variance=np.full(n, 0.04)), SamplerSettings(300, 100))
    assert post.constraint_residuals().max() <= 1e-8


def test_nb_offset_scaling_invariance(rng):
    """Scaling exposures by c shifts the intercept by -log c and leaves the rate unchanged."""
    n = 40
    off = rng.uniform(5, 50, n)
    y = rng.poisson(0.2 * off)
    rates = []
    for c in (1.0, 7.0):
        spec = LatentModelSpec(n, [FixedEffect("intercept", np.ones(n))], [], family=NEGATIVE_BINOMIAL, d=20.0)
        post = sample_posterior(
            spec, Observations(np.arange(n), y, offset=off * c), SamplerSettings(800, 200, chains=1, seed=1)
        )
        rates.append(np.exp(np.median(post.block("intercept"))) * c)
    assert rates[0] == pytest.approx(rates[1], rel=0.02)


def test_long_format_and_names():
    obs = Observations([0, 1], FH_Y, variance=FH_V)
    post = sample_posterior(fh_spec(), obs, SamplerSettings(n_draws=20, burn_in=10, chains=1))
    long = post.to_long()
    assert list(long.columns) == ["draw", "parameter", "value"]
    assert set(long["parameter"]) == {"intercept", "u[0]", "u[1]", "sigma[u]"}
    assert len(long) == 20 * 4


def test_spec_validation():
    with pytest.raises(SpecError):
        LatentModelSpec(2, [FixedEffect("a", np.ones(2)), FixedEffect("b", 2 * np.ones(2))], []).validate()
    with pytest.raises(SpecError):
        LatentModelSpec(2, [], [EffectBlock("u", iid(2), np.array([0, 2]))]).validate()
    spec = LatentModelSpec(1, [FixedEffect("a", np.ones(1))], [])
    with pytest.raises(SpecError):
        sample_posterior(spec, Observations([0], [1.0], variance=[0.0]))


def test_ess_reference_values(rng):
    x = rng.normal(size=20000)
    assert effective_sample_size(x) == pytest.approx(20000, rel=0.1)
    rho = 0.8
    z = np.empty(20000)
    z[0] = 0
    for i in range(1, z.size):
        z[i] = rho * z[i - 1] + rng.normal()
    assert effective_sample_size(z) == pytest.approx(20000 * (1 - rho) / (1 + rho), rel=0.2)
