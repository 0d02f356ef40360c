import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fertsae.direct import (
    FLAG_JK_UNAVAILABLE,
    FLAG_MISSING_AGE,
    FLAG_SPARSE,
    TFR_AGE,
    DirectEstimate,
    NoDataError,
    direct_asfr,
    direct_estimates,
    direct_tfr,
    jackknife,
    jackknife_variance,
    log_transform,
)
from fertsae.exposure import FertilityTable
from oracles import jackknife_oracle


def make_table(rows, year=2020):
    """``rows`` are (cluster_id, admin1_id, age_group, births, exposure, weight)."""
    df = pd.DataFrame(rows, columns=["cluster_id", "admin1_id", "age_group", "births", "exposure", "weight"])
    df["cluster_id"] = df["cluster_id"].astype(str)
    df["admin2_id"] = df["admin1_id"]
    df["urban"] = df["admin1_id"] % 2 == 1
    df["stratum_id"] = df["admin1_id"].astype(str)
    df["year"] = year
    df["w_births"] = df["births"] * df["weight"]
    df["w_exposure"] = df["exposure"] * df["weight"]
    return FertilityTable(df.drop(columns="weight"), (year, year))


def random_table(rng, n_clusters=20, ages=range(7)):
    rows = []
    for c in range(n_clusters):
        w = rng.uniform(0.5, 4.0)
        for a in ages:
            e = rng.uniform(0.5, 30.0)
            rows.append((c, 1 + c % 2, a, int(rng.poisson(e * 0.15)), e, w))
    return make_table(rows)


def test_asfr_unweighted():
    cells = pd.DataFrame({"w_births": [2.0], "w_exposure": [4.0]})
    assert direct_asfr(cells).point == 500.0


def test_asfr_weighted():
    cells = pd.DataFrame({"w_births": [1 * 1.0, 3 * 0.0], "w_exposure": [1 * 1.0, 3 * 1.0]})
    assert direct_asfr(cells).point == 250.0


def test_asfr_zero_births_flagged_sparse():
    e = direct_asfr(pd.DataFrame({"w_births": [0.0], "w_exposure": [10.0]}))
    assert e.point == 0.0 and FLAG_SPARSE in e.flags


def test_asfr_zero_exposure_is_no_data():
    with pytest.raises(NoDataError):
        direct_asfr(pd.DataFrame({"w_births": [0.0], "w_exposure": [0.0]}))


@pytest.mark.parametrize("value, tfr", [(100.0, 3.5), (0.0, 0.0)])
def test_tfr_examples(value, tfr):
    e = direct_tfr([DirectEstimate(1, "p", a, value) for a in range(7)])
    assert e.point == pytest.approx(tfr, abs=1e-15)
    assert e.age_group == TFR_AGE and e.flags == ()


def test_tfr_missing_age_flag():
    e = direct_tfr([DirectEstimate(1, "p", a, 100.0) for a in range(6)])
    assert e.point == pytest.approx(3.0) and FLAG_MISSING_AGE in e.flags


def test_jackknife_two_replicates():
    v, c = jackknife([0.4, 0.6])
    assert v == pytest.approx(0.01, abs=1e-15) and c == 2


def test_jackknife_identical_clusters_zero():
    rows = [(c, 1, 0, 2, 10.0, 1.5) for c in range(6)]
    assert jackknife_variance(make_table(rows), (0, "2020", 0)) == 0.0


def test_jackknife_drops_undefined():
    v, c = jackknife([1.0, np.nan, 3.0])
    assert c == 2 and v == pytest.approx(1.0)
    assert np.isnan(jackknife([1.0])[0])


@pytest.mark.parametrize("point, var, logvar", [(100.0, 4.0, 4e-4), (1.0, 0.0, 0.0)])
def test_log_transform(point, var, logvar):
    e = log_transform(DirectEstimate(1, "p", 0, point, var))
    assert e.log_variance == pytest.approx(logvar, abs=1e-18)
    assert e.log_point == pytest.approx(np.log(point / 1000.0))


def test_log_transform_tfr_not_rescaled():
    e = log_transform(DirectEstimate(1, "p", TFR_AGE, 4.0, 0.16))
    assert e.log_point == pytest.approx(np.log(4.0)) and e.log_variance == pytest.approx(0.01)


def test_log_transform_rejects_zero():
    with pytest.raises(ValueError):
        log_transform(DirectEstimate(1, "p", 0, 0.0, 0.0))


def test_jackknife_matches_oracle(rng):
    for _ in range(10):
        table = random_table(rng)
        c = table.cells
        rows = list(zip(c["cluster_id"], c["age_group"], c["w_births"], c["w_exposure"]))
        for a in (0, 3, 6):
            sub = [r for r in rows if r[1] == a]
            got = jackknife_variance(table, (0, "2020", a))
            np.testing.assert_allclose(got, jackknife_oracle(sub, "asfr"), rtol=1e-10)
        got = jackknife_variance(table, (0, "2020"), "tfr")
        np.testing.assert_allclose(got, jackknife_oracle(rows, "tfr"), rtol=1e-10)


def test_jackknife_single_cluster_unavailable():
    est = direct_estimates(make_table([(1, 1, 0, 3, 10.0, 1.0)]), "national")
    row = est[est["age_group"] == 0].iloc[0]
    assert np.isnan(row["variance"]) and FLAG_JK_UNAVAILABLE in row["flags"]


def test_tfr_identity_and_log_fields(rng):
    est = direct_estimates(random_table(rng), "admin1")
    for area, g in est.groupby("area_id"):
        asfr = g[g["age_group"] >= 0].sort_values("age_group")["point"].to_numpy()
        tfr = g[g["age_group"] == TFR_AGE]["point"].iloc[0]
        assert abs(tfr - 5 * asfr.sum() / 1000) <= 1e-12
    pos = est["point"] > 0
    assert est.loc[pos, "log_point"].notna().all()
    np.testing.assert_allclose(est.loc[pos, "log_variance"], est.loc[pos, "variance"] / est.loc[pos, "point"] ** 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_weight_scale_invariance(seed, c):
    t1 = random_table(np.random.default_rng(seed), n_clusters=6)
    cells = t1.cells.copy()
    cells["w_births"] *= c
    cells["w_exposure"] *= c
    t2 = FertilityTable(cells, t1.window)
    e1 = direct_estimates(t1, "national")
    e2 = direct_estimates(t2, "national")
    np.testing.assert_allclose(e1["point"], e2["point"], rtol=1e-10)
    np.testing.assert_allclose(e1["variance"], e2["variance"], rtol=1e-8, atol=1e-12)


def test_no_exposure_key_absent_and_error(rng):
    table = random_table(rng, n_clusters=4, ages=range(5))
    est = direct_estimates(table, "national")
    assert 6 not in est["age_group"].tolist()
    tfr = est[est["age_group"] == TFR_AGE].iloc[0]
    assert FLAG_MISSING_AGE in tfr["flags"]
    with pytest.raises(NoDataError):
        jackknife_variance(table, (0, "2020", 6))
