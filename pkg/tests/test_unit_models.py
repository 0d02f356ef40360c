import numpy as np
import pandas as pd
import pytest

from fertsae.area_models import ModelInputError
from fertsae.direct import TFR_AGE
from fertsae.estimates import SmoothedEstimates
from fertsae.gmrf.sampler import SamplerSettings
from fertsae.unit_models import (
    ALL_PERIODS,
    COMPONENTS,
    FLAG_LOW_INFORMATION,
    FLAG_RESAMPLED,
    FLAG_STRATUM_MISSING,
    GridLayer,
    UnitModelInput,
    aggregate_ur,
    exceedance_probability,
    fit_stratified,
    fit_unit_model,
    population_variance,
    read_urban_fractions,
    tfr_estimates,
    urban_fraction,
    urban_fraction_table,
    variance_decomposition,
)
from fertsae.survey import RegionGraph

FAST = SamplerSettings(n_draws=300, burn_in=200, chains=1, seed=3)
YEARS = [2019, 2020, 2021]


def synthetic_cells(rng, n_areas=3, rate=0.1, exposure=40.0):
    rows = []
    for a in range(1, n_areas + 1):
        for y in YEARS:
            for g in range(7):
                rows.append((f"c{a}", a, y, g, rng.poisson(rate * exposure), exposure))
    return pd.DataFrame(rows, columns=["cluster_id", "area_id", "year", "age_group", "births", "exposure"])


def asfr_est(draws, n_areas=1, periods=("2020",), model="m"):
    keys = pd.DataFrame(
        [(a, p, g) for a in range(1, n_areas + 1) for p in periods for g in range(7)],
        columns=["area_id", "period", "age_group"],
    )
    return SmoothedEstimates(model, "admin1", keys, np.asarray(draws, float))


def tfr_est(draws):
    keys = pd.DataFrame({"area_id": [1], "period": ["2020"], "age_group": [TFR_AGE]})
    return SmoothedEstimates("m", "admin1", keys, np.asarray(draws, float).reshape(-1, 1))


# ---------------------------------------------------------------- urban fractions


def grid_example():
    pop = np.zeros((3, 7))
    pop[:, 0] = [100, 100, 100]
    pop[:, 1:] = 10
    return GridLayer([1, 2, 3], [1, 1, 1], [1, 1, 0], pop)


def test_urban_fraction_example():
    assert urban_fraction(grid_example(), 1, 0) == pytest.approx(2 / 3)


def test_urban_fraction_all_urban():
    g = GridLayer([1, 2], [1, 1], [1, 1], np.ones((2, 7)))
    assert urban_fraction(g, 1, 3) == 1.0


def test_urban_fraction_zero_population():
    g = GridLayer([1, 2], [1, 1], [1, 0], np.zeros((2, 7)))
    with pytest.raises(ValueError, match="zero population"):
        urban_fraction(g, 1, 0)


def test_urban_fraction_brute_force(rng):
    n = 100
    area = rng.integers(1, 4, n)
    urban = rng.integers(0, 2, n)
    pop = rng.uniform(0, 50, (n, 7))
    table = urban_fraction_table(GridLayer(np.arange(n), area, urban, pop))
    for a, _, g, r in table.itertuples(index=False):
        num = sum(pop[i, g] for i in range(n) if area[i] == a and urban[i] == 1)
        den = sum(pop[i, g] for i in range(n) if area[i] == a)
        assert r == pytest.approx(num / den, rel=1e-12)
    assert (table["period"] == ALL_PERIODS).all() and len(table) == 21


def test_grid_validation(tmp_path):
    with pytest.raises(ValueError):
        GridLayer([1], [1], [2], np.ones((1, 7)))
    with pytest.raises(ValueError):
        GridLayer([1], [1], [1], -np.ones((1, 7)))
    p = tmp_path / "r.csv"
    pd.DataFrame({"area_id": [1], "period": ["*"], "age_group": [0], "r": [1.2]}).to_csv(p, index=False)
    with pytest.raises(ValueError):
        read_urban_fractions(p)


def test_grid_from_csv(tmp_path):
    cols = ["pop_15_19", "pop_20_24", "pop_25_29", "pop_30_34", "pop_35_39", "pop_40_44", "pop_45_49"]
    df = pd.DataFrame(np.full((2, 7), 5.0), columns=cols)
    df.insert(0, "urban_label", [1, 0])
    df.insert(0, "area_id", [4, 4])
    df.insert(0, "pixel_id", [10, 11])
    df.to_csv(tmp_path / "g.csv", index=False)
    assert urban_fraction(GridLayer.from_csv(tmp_path / "g.csv"), 4, 6) == 0.5


# ---------------------------------------------------------------- U/R aggregation


def r_table(value):
    return pd.DataFrame({"area_id": 1, "period": ALL_PERIODS, "age_group": range(7), "r": value})


def test_aggregate_ur_example():
    u = asfr_est(np.full((4, 7), 2.0))
    ru = asfr_est(np.full((4, 7), 5.0))
    out = aggregate_ur(u, ru, r_table(0.4))
    np.testing.assert_allclose(out.draws, 0.4 * 2.0 + 0.6 * 5.0)
    assert out.draws[0, 0] == pytest.approx(3.8)
    out = aggregate_ur(u, ru, r_table(0.0))
    np.testing.assert_array_equal(out.draws, ru.draws)


def test_aggregate_ur_convex_and_monotone(rng):
    u = asfr_est(rng.uniform(50, 150, (100, 7)))
    ru = asfr_est(rng.uniform(100, 250, (100, 7)))
    prev = None
    for r in np.linspace(0, 1, 11):
        d = aggregate_ur(u, ru, r_table(r)).draws
        assert np.all(d >= np.minimum(u.draws, ru.draws) - 1e-12)
        assert np.all(d <= np.maximum(u.draws, ru.draws) + 1e-12)
        if prev is not None:
            # moving toward urban moves every draw toward the urban value
            step = d - prev
            assert np.all(step * (u.draws - ru.draws) >= -1e-12)
        prev = d


def test_aggregate_ur_period_specific_r():
    u = asfr_est(np.full((2, 7), 1.0))
    ru = asfr_est(np.full((2, 7), 3.0))
    r = pd.concat([r_table(0.5), pd.DataFrame({"area_id": [1], "period": ["2020"], "age_group": [0], "r": [1.0]})])
    out = aggregate_ur(u, ru, r)
    assert out.draws[0, 0] == 1.0 and out.draws[0, 1] == 2.0
    with pytest.raises(KeyError):
        aggregate_ur(u, ru, r_table(0.5).iloc[:3])


def test_aggregate_ur_missing_and_resampled(rng):
    u = asfr_est(np.full((3, 7), 1.0))
    ru = asfr_est(np.full((5, 7), 3.0))
    out = aggregate_ur(u, ru, r_table(0.5), seed=1)
    assert out.n_draws == 5 and out.keys["flags"].str.contains(FLAG_RESAMPLED).all()
    only = aggregate_ur(None, ru, r_table(0.5))
    np.testing.assert_array_equal(only.draws, ru.draws)
    assert only.keys["flags"].str.contains(f"{FLAG_STRATUM_MISSING}:urban").all()
    with pytest.raises(ValueError):
        aggregate_ur(None, None, r_table(0.5))


# ---------------------------------------------------------------- exceedance


def test_exceedance_examples(rng):
    d = rng.uniform(2, 6, 500)
    assert exceedance_probability(tfr_est(d), tfr_est(d))["probability"].iloc[0] == 0.0
    assert exceedance_probability(tfr_est(d), tfr_est(d + 3.0))["probability"].iloc[0] == 1.0
    p = exceedance_probability(tfr_est(d), tfr_est(d + 1.0), threshold=0.5)
    assert p["probability"].iloc[0] == 1.0 and p["threshold"].iloc[0] == 0.5
    with pytest.raises(ValueError):
        exceedance_probability(tfr_est(d), tfr_est(d[:10]))


# ---------------------------------------------------------------- variance decomposition


def test_population_variance():
    assert population_variance([-1, 0, 1]) == pytest.approx(2 / 3)
    assert population_variance([0, 0, 0]) == 0.0
    assert population_variance([]) == 0.0


@pytest.fixture(scope="module")
def unit_fit():
    rng = np.random.default_rng(5)
    inp = UnitModelInput(synthetic_cells(rng), 3, YEARS, RegionGraph.from_edges(3, [(0, 1), (1, 2)]), 2021)
    return fit_unit_model(inp, settings=SamplerSettings(n_draws=400, burn_in=300, chains=1, seed=2))


def test_unit_fit_recovers_constant_rate(unit_fit):
    med = np.median(unit_fit.estimates.draws, axis=0)
    # about 250 births in total at a flat rate of 100 per 1,000
    assert abs(np.exp(np.mean(np.log(med))) - 100.0) <= 10.0
    assert unit_fit.samples.constraint_residuals().max() <= 1e-8
    assert len(unit_fit.estimates.keys) == 3 * 3 * 7


def test_unit_fit_tfr_identity(unit_fit):
    tfr = tfr_estimates(unit_fit)
    k = unit_fit.estimates.keys
    sel = ((k["area_id"] == 2) & (k["period"] == "2020")).to_numpy()
    direct = 5 * unit_fit.estimates.draws[:, sel].sum(axis=1) / 1000
    np.testing.assert_allclose(tfr.column(2, "2020"), direct, rtol=1e-12)


def test_variance_shares_sum_to_one(unit_fit):
    dec = variance_decomposition(unit_fit)
    assert set(dec.shares) == set(COMPONENTS)
    assert sum(dec.shares.values()) == pytest.approx(1.0)
    assert all(v >= 0 for v in dec.variances.values())
    assert list(dec.frame().columns) == ["component", "variance", "share"]


# ---------------------------------------------------------------- stratified fits


def test_identical_strata_same_seed_identical(rng):
    g = RegionGraph.from_edges(3, [(0, 1), (1, 2)])
    cells = synthetic_cells(rng, exposure=10.0)
    a = UnitModelInput(cells, 3, YEARS, g, 2021, stratum="urban")
    b = UnitModelInput(cells.copy(), 3, YEARS, g, 2021, stratum="rural")
    fit = fit_stratified(a, b, settings=FAST, seeds=(4, 4))
    np.testing.assert_array_equal(fit.urban.estimates.draws, fit.rural.estimates.draws)


def test_empty_stratum_flagged(rng):
    g = RegionGraph.from_edges(3, [(0, 1), (1, 2)])
    cells = synthetic_cells(rng, exposure=10.0)
    empty = UnitModelInput(cells.iloc[:0], 3, YEARS, g, 2021, stratum="urban")
    fit = fit_stratified(empty, UnitModelInput(cells, 3, YEARS, g, 2021, stratum="rural"), settings=FAST, threads=1)
    assert fit.urban is None and f"{FLAG_STRATUM_MISSING}:urban" in fit.flags
    with pytest.raises(ModelInputError):
        fit_stratified(empty, empty, settings=FAST)


def test_unit_model_validation(rng):
    g = RegionGraph.from_edges(3, [(0, 1), (1, 2)])
    cells = synthetic_cells(rng)
    with pytest.raises(ModelInputError):
        fit_unit_model(UnitModelInput(cells[cells["year"] < 2021], 3, YEARS[:2], g, 2021), settings=FAST)


def test_component_without_data_low_information(rng):
    g = RegionGraph.from_edges(4, [(0, 1), (1, 2)])
    cells = synthetic_cells(rng, exposure=10.0)
    fit = fit_unit_model(UnitModelInput(cells, 4, YEARS, g, 2021), settings=FAST)
    assert FLAG_LOW_INFORMATION in fit.flags
    k = fit.estimates.keys
    assert (k.loc[k["area_id"] == 4, "flags"] == FLAG_LOW_INFORMATION).all()
    assert np.isfinite(fit.estimates.draws).all()
