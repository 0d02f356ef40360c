import numpy as np
import pandas as pd
import pytest

from fertsae.exposure import period_labels, tabulate
from fertsae.gmrf.sampler import SamplerSettings
from fertsae.unit_models import unit_input
from fertsae.validation.cv import CvPlan, _fold_seed, make_plan, plan_from_data, run_cv, write_report
from fertsae.validation.simulate import SimConfig, simulate_survey

PERIODS = period_labels((2013, 2021), 3)


def full_cells(n_areas=23):
    grid = np.meshgrid(np.arange(1, n_areas + 1), np.arange(2013, 2022), np.arange(7), indexing="ij")
    return pd.DataFrame({"area_id": grid[0].ravel(), "year": grid[1].ravel(), "age_group": grid[2].ravel()})


def test_fold_counts():
    assert len(make_plan("tfr", 23, PERIODS)) == 69
    assert len(make_plan("asfr", 23, PERIODS, age_groups=range(6))) == 138


@pytest.mark.parametrize("scheme", ["tfr", "asfr"])
def test_folds_partition_cells(scheme):
    cells = full_cells(5)
    plan = make_plan(scheme, 5, PERIODS)
    masks = np.array([plan.held_out_mask(cells, f) for f in range(len(plan))])
    # every cell is held out by exactly one fold
    np.testing.assert_array_equal(masks.sum(axis=0), 1)


def test_tfr_fold_rectangle():
    cells = full_cells(3)
    plan = make_plan("tfr", 3, PERIODS)
    held = cells[plan.held_out_mask(cells, plan.folds.index((2, "2016-2018")))]
    assert set(held["area_id"]) == {2} and set(held["year"]) == {2016, 2017, 2018}
    assert len(held) == 3 * 7


def test_plan_validation():
    with pytest.raises(ValueError):
        CvPlan("tfr", [(1, "a"), (1, "a")])
    with pytest.raises(ValueError):
        make_plan("other", 3)
    with pytest.raises(ValueError):
        make_plan("tfr", 3)


def test_fold_seeds_deterministic_and_distinct():
    seeds = [_fold_seed(0, f) for f in range(200)]
    assert len(set(seeds)) == 200
    assert seeds == [_fold_seed(0, f) for f in range(200)]
    assert _fold_seed(1, 0) != seeds[0]


@pytest.fixture(scope="module")
def small_survey():
    cfg = SimConfig(n_areas=3, n_clusters=90, seed=2)
    sv = simulate_survey(cfg)
    return tabulate(sv.dataset, cfg.window), sv.dataset.graph("admin1")


@pytest.mark.parametrize("model, scheme", [("area", "tfr"), ("area", "asfr"), ("unit", "tfr")])
def test_small_run_scores(small_survey, model, scheme, tmp_path):
    table, g = small_survey
    plan = plan_from_data(scheme, table, 3)
    assert len(plan) > 0
    plan = CvPlan(plan.scheme, plan.folds[:2], plan.periods)
    res = run_cv(table, plan, model, g, 2021, SamplerSettings(n_draws=200, burn_in=150, chains=1))
    assert res.n_folds == 2 and res.n_failed == 0
    frame = res.frame()
    assert np.isfinite(frame["value"]).all()
    assert list(frame.columns) == ["model", "scheme", "metric", "level", "value", "n_folds", "n_failed"]
    write_report([res], tmp_path / "cv.csv")
    assert len(pd.read_csv(tmp_path / "cv.csv")) == len(frame)


def test_unit_training_excludes_held_out(small_survey):
    table, g = small_survey
    plan = plan_from_data("tfr", table, 3)
    cells = unit_input(table, g, survey_year=2021).cells
    for f in range(len(plan)):
        mask = plan.held_out_mask(cells, f)
        area, lab = plan.folds[f]
        train = cells[~mask]
        years = [y for y, p in plan.periods.items() if p == lab]
        assert not ((train["area_id"] == area) & train["year"].isin(years)).any()
        assert mask.sum() > 0
