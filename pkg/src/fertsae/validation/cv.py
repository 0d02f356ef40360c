"""Leave-one-combination-out cross-validation.

Two schemes hold out a rectangle of the (area, year, age) cube:

* ``tfr``: one Admin-1 area x one multi-year period, all age groups; the
  prediction is the period TFR (equal-weight average of yearly TFRs).
* ``asfr``: one Admin-1 area x one age group, all years; the prediction is
  the window ASFR (equal-weight average of yearly ASFRs for yearly models).

Predictions are compared with the log direct estimate of the held-out key.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ..area_models import ModelInputError, area_input, fit_fh_asfr, fit_fh_tfr
from ..direct import PER, direct_estimates
from ..exposure import FertilityTable, period_labels
from ..gmrf.sampler import ConvergenceError, SamplerSettings
from ..survey import N_AGE_GROUPS, RegionGraph
from ..unit_models import fit_unit_model, unit_input
from .metrics import LEVELS, ScoreReport, report_frame, score

logger = logging.getLogger(__name__)

SCHEMES = ("tfr", "asfr")
MODELS = ("unit", "unit_cov", "area", "area_cov")
WINDOW_PERIOD = "window"


@dataclass
class CvPlan:
    """Held-out combinations, one per fold.

    For ``tfr`` each fold is ``(area_id, period_label)``; for ``asfr`` it is
    ``(area_id, age_group)``.  ``periods`` maps year -> period label.
    """

    scheme: str
    folds: list[tuple]
    periods: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if len(set(self.folds)) != len(self.folds):
            raise ValueError("folds repeat a held-out combination")

    def __len__(self):
        return len(self.folds)

    def held_out_mask(self, cells: pd.DataFrame, fold: int, area_col: str = "area_id") -> np.ndarray:
        """Rows of a cell table inside the fold's held-out rectangle."""
        area, other = self.folds[fold]
        in_area = cells[area_col].to_numpy() == area
        if self.scheme == "tfr":
            years = [y for y, lab in self.periods.items() if lab == other]
            return in_area & np.isin(cells["year"].to_numpy(), years)
        return in_area & (cells["age_group"].to_numpy() == other)


def make_plan(scheme: str, n_areas: int, periods: dict[int, str] | None = None, age_groups=None) -> CvPlan:
    """One fold per (area, period) or (area, age group), in that order."""
    areas = range(1, n_areas + 1)
    if scheme == "tfr":
        if not periods:
            raise ValueError("the TFR scheme needs a year -> period mapping")
        labels = list(dict.fromkeys(periods[y] for y in sorted(periods)))
        return CvPlan(scheme, [(a, p) for a in areas for p in labels], dict(periods))
    if scheme == "asfr":
        ages = list(range(N_AGE_GROUPS) if age_groups is None else age_groups)
        return CvPlan(scheme, [(a, int(g)) for a in areas for g in ages], dict(periods or {}))
    raise ValueError(f"unknown scheme {scheme!r}")


def plan_from_data(scheme: str, table: FertilityTable, n_areas: int, period_length: int = 3) -> CvPlan:
    """Plan restricted to keys whose Admin-1 direct estimate is positive with a variance."""
    periods = period_labels(table.window, period_length)
    target = _targets(table, scheme, periods)
    ok = target.dropna(subset=["log_point", "log_variance"])
    ok = ok[ok["log_variance"] > 0]
    if scheme == "tfr":
        keep = set(zip(ok["area_id"], ok["period"]))
        base = make_plan(scheme, n_areas, periods)
    else:
        keep = set(zip(ok["area_id"], ok["age_group"]))
        base = make_plan(scheme, n_areas, periods)
    folds = [f for f in base.folds if f in keep]
    dropped = len(base.folds) - len(folds)
    if dropped:
        logger.info("%d combinations lack a usable direct estimate and are not validated", dropped)
    return CvPlan(scheme, folds, periods)


def _targets(table: FertilityTable, scheme: str, periods: dict[int, str]) -> pd.DataFrame:
    if scheme == "tfr":
        est = direct_estimates(table, "admin1", periods, include_asfr=False)
        est["key"] = list(zip(est["area_id"], est["period"]))
    else:
        window = {y: WINDOW_PERIOD for y in table.years}
        est = direct_estimates(table, "admin1", window, include_tfr=False)
        est["key"] = list(zip(est["area_id"], est["age_group"]))
    return est


@dataclass
class CvResult:
    model: str
    scheme: str
    keys: pd.DataFrame  # fold, area_id, other, pred, obs, variance
    draws: list[np.ndarray]
    report: ScoreReport | None
    n_folds: int
    failures: list[tuple[int, str]]

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def frame(self) -> pd.DataFrame:
        if self.report is None:
            return pd.DataFrame(columns=["model", "scheme", "metric", "level", "value", "n_folds", "n_failed"])
        return report_frame(self.model, self.scheme, self.report, self.n_folds, self.n_failed)


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


class _Runner:
    """Fits one model variant on training data and predicts the held-out key."""

    def __init__(self, table, plan, model, graph, survey_year, covariates, covariate_names):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}")
        self.table = table
        self.plan = plan
        self.model = model
        self.graph = graph
        self.survey_year = survey_year
        self.use_cov = model.endswith("_cov")
        self.covariates = covariates
        self.covariate_names = covariate_names
        self.years = list(range(table.window[0], table.window[1] + 1))
        if self.model.startswith("area"):
            if plan.scheme == "tfr":
                self.direct = direct_estimates(table, "admin1", None, include_asfr=False)
            else:
                window = {y: WINDOW_PERIOD for y in self.years}
                self.direct = direct_estimates(table, "admin1", window, include_tfr=False)

    def fit(self, fold: int | None, settings: SamplerSettings):
        """Posterior draws of the held-out key's log rate (or the fit for warm-up)."""
        n = self.graph.n
        if self.model.startswith("unit"):
            inp = unit_input(
                self.table, self.graph, "admin1", "both", self.survey_year, self.covariates, self.covariate_names
            )
            if fold is not None:
                inp.cells = inp.cells[~self.plan.held_out_mask(inp.cells, fold)].reset_index(drop=True)
            fit = fit_unit_model(inp, self.use_cov, settings)
            return fit, self._unit_prediction(fit, fold)
        d = self.direct
        if fold is not None:
            area, other = self.plan.folds[fold]
            if self.plan.scheme == "tfr":
                years = {str(y) for y, lab in self.plan.periods.items() if lab == other}
                drop = (d["area_id"] == area) & d["period"].isin(years)
            else:
                drop = (d["area_id"] == area) & (d["age_group"] == other)
            d = d[~drop]
        if self.plan.scheme == "tfr":
            inp = area_input(
                d, n, [str(y) for y in self.years], "admin1", self.covariates, self.covariate_names, self.survey_year
            )
            fit = fit_fh_tfr(inp, self.graph, self.survey_year, self.use_cov, settings)
        else:
            inp = area_input(d, n, [WINDOW_PERIOD], "admin1", self.covariates, self.covariate_names)
            fit = fit_fh_asfr(inp, self.graph, self.use_cov, settings)
        return fit, self._area_prediction(fit, fold)

    def _unit_prediction(self, fit, fold):
        if fold is None:
            return None
        area, other = self.plan.folds[fold]
        est = fit.estimates
        k = est.keys
        sel = (k["area_id"] == area).to_numpy()
        if self.plan.scheme == "tfr":
            years = {str(y) for y, lab in self.plan.periods.items() if lab == other}
            sel &= k["period"].isin(years).to_numpy()
            # yearly TFR then equal-weight period average
            d = est.draws[:, sel].reshape(est.n_draws, -1, N_AGE_GROUPS)
            tfr = 5.0 * d.sum(axis=2) / PER
            return np.log(tfr.mean(axis=1))
        sel &= (k["age_group"] == other).to_numpy()
        return np.log(est.draws[:, sel].mean(axis=1) / PER)

    def _area_prediction(self, fit, fold):
        if fold is None:
            return None
        area, other = self.plan.folds[fold]
        est = fit.estimates
        k = est.keys
        if self.plan.scheme == "tfr":
            years = {str(y) for y, lab in self.plan.periods.items() if lab == other}
            sel = ((k["area_id"] == area) & k["period"].isin(years)).to_numpy()
            return np.log(est.draws[:, sel].mean(axis=1))
        sel = ((k["area_id"] == area) & (k["age_group"] == other)).to_numpy()
        return np.log(est.draws[:, sel][:, 0] / PER)


def run_cv(
    table: FertilityTable,
    plan: CvPlan,
    model: str,
    graph: RegionGraph,
    survey_year: int | None = None,
    settings: SamplerSettings | None = None,
    covariates=None,
    covariate_names=None,
    threads: int = 1,
    warm_start: bool = True,
    levels=LEVELS,
    seed: int = 0,
) -> CvResult:
    """Refit ``model`` once per fold and score held-out predictions.

    With ``warm_start`` a full-data fit supplies the hyperparameter mode and
    proposal covariance, and every fold starts from them without a fresh
    mode search.  Each fold's sampler seed derives from ``(seed, fold)``.
    Folds whose fit fails are recorded and left out of the scores.
    """
    settings = settings or SamplerSettings()
    runner = _Runner(table, plan, model, graph, survey_year, covariates, covariate_names)
    target = _targets(table, plan.scheme, plan.periods).set_index("key")
    if warm_start:
        try:
            full, _ = runner.fit(None, replace(settings, seed=seed))
            diag = full.samples.diagnostics
            settings = replace(settings, optimize=False, init_theta=diag["theta_mode"], init_cov=diag["theta_cov"])
        except (ConvergenceError, ModelInputError) as exc:
            logger.warning("full-data fit failed (%s); folds search their own modes", exc)

    def one(fold):
        s = replace(settings, seed=_fold_seed(seed, fold))
        try:
            _, draws = runner.fit(fold, s)
        except (ConvergenceError, ModelInputError, np.linalg.LinAlgError) as exc:
            logger.warning("fold %d %s failed: %s", fold, plan.folds[fold], exc)
            return fold, None, str(exc)
        return fold, draws, ""

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(len(plan))))
    else:
        results = [one(f) for f in range(len(plan))]

    rows, draws, failures = [], [], []
    for fold, d, err in results:
        key = plan.folds[fold]
        if d is None:
            failures.append((fold, err))
            continue
        if key not in target.index:
            failures.append((fold, "no direct estimate"))
            continue
        t = target.loc[[key]].iloc[0]
        if not (np.isfinite(t["log_point"]) and np.isfinite(t["log_variance"])):
            failures.append((fold, "no usable direct estimate"))
            continue
        rows.append((fold, key[0], key[1], float(np.median(d)), float(t["log_point"]), float(t["log_variance"])))
        draws.append(d)
    keys = pd.DataFrame(rows, columns=["fold", "area_id", "other", "pred", "obs", "variance"])
    rep = score(draws, keys["obs"], keys["variance"], levels, seed) if len(keys) else None
    logger.info("%s/%s: %d folds, %d failed", model, plan.scheme, len(plan), len(failures))
    return CvResult(model, plan.scheme, keys, draws, rep, len(plan), failures)


def write_report(results: list[CvResult], path) -> None:
    pd.concat([r.frame() for r in results], ignore_index=True).to_csv(path, index=False, float_format="%.10g")
