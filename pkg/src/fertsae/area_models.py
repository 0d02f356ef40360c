"""Fay-Herriot models on transformed direct estimates.

Three models share one Gaussian sampling layer: the observed log (or logit)
direct estimate is normal around the latent value with its design variance.

* ASFR: one reference period, log ASFR over areas x age groups with
  intercept, RW1 + IID age effects, BYM2 space and an ICAR x RW1 interaction.
* TFR: log TFR over areas x years with intercept, linear trend, RW2 + IID
  time, BYM2 space, an ICAR x RW2 interaction and the cutoff adjustment
  ``+zeta`` at ``t_s - 6`` and ``-zeta`` at ``t_s - 5``.  Reported values
  leave the adjustment out.
* Covariate: logit proportion per area with intercept and BYM2 space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .direct import PER, TFR_AGE
from .estimates import KEY_COLUMNS, SmoothedEstimates, aggregate_periods
from .gmrf.model import GAUSSIAN, EffectBlock, FixedEffect, LatentModelSpec, Observations
from .gmrf.priors import ZETA_PRIOR, pc_prior_phi
from .gmrf.sampler import PosteriorSamples, SamplerSettings, sample_posterior
from .gmrf.structures import build_interaction, icar, iid, rw1, rw2
from .survey import N_AGE_GROUPS, RegionGraph

logger = logging.getLogger(__name__)

FLAG_NO_DATA_AGE = "age_without_data"
FLAG_NO_DATA_KEY = "predicted"
FLAG_BOUNDARY = "boundary_proportion"


class ModelInputError(ValueError):
    """Inputs cannot support the requested model."""


@dataclass
class AreaModelInput:
    """Transformed direct estimates for one area-level model.

    ``data`` has ``area_id`` (1-based), ``period``, ``age_group``, ``value``
    (log or logit estimate) and ``variance`` (design variance on that scale);
    only usable keys are kept, the rest are in ``excluded``.  ``covariates``
    is ``(n_areas, k)`` in area order.
    """

    data: pd.DataFrame
    n_areas: int
    periods: list[str]
    level: str = "admin1"
    covariates: np.ndarray | None = None
    covariate_names: list[str] = field(default_factory=list)
    survey_year: int | None = None
    excluded: pd.DataFrame | None = None

    def __post_init__(self):
        self.data = self.data.reset_index(drop=True)
        self.data["period"] = self.data["period"].astype(str)
        self.periods = [str(p) for p in self.periods]
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, float).reshape(self.n_areas, -1)
            if not self.covariate_names:
                self.covariate_names = [f"x{k + 1}" for k in range(self.covariates.shape[1])]


def area_input(
    estimates: pd.DataFrame,
    n_areas: int,
    periods=None,
    level: str = "admin1",
    covariates=None,
    covariate_names=None,
    survey_year: int | None = None,
    transform: str = "log",
) -> AreaModelInput:
    """Build model input from direct estimates.

    With ``transform="log"`` the ``log_point``/``log_variance`` columns are
    used; with ``"logit"`` the ``point``/``variance`` columns are treated as
    proportions and transformed by the delta method.  Keys without a
    positive finite variance are excluded and logged.
    """
    df = estimates.copy()
    df["period"] = df["period"].astype(str)
    if transform == "log":
        value = df["log_point"].to_numpy(float)
        var = df["log_variance"].to_numpy(float)
    elif transform == "logit":
        value, var = logit_delta(df["point"].to_numpy(float), df["variance"].to_numpy(float))
    else:
        raise ValueError(f"unknown transform {transform!r}")
    ok = np.isfinite(value) & np.isfinite(var) & (var > 0)
    df["value"] = value
    df["variance"] = var
    bad = ~ok
    if bad.any():
        logger.info("excluding %d keys without a usable estimate or variance", int(bad.sum()))
    if periods is None:
        periods = list(dict.fromkeys(df["period"]))
    keep = df.loc[ok, ["area_id", "period", "age_group", "value", "variance"]]
    unknown = set(keep["period"]) - {str(p) for p in periods}
    if unknown:
        keep = keep[keep["period"].isin([str(p) for p in periods])]
        logger.info("dropping estimates for periods outside the model: %s", sorted(unknown))
    return AreaModelInput(
        keep,
        n_areas,
        list(periods),
        level,
        covariates,
        list(covariate_names or []),
        survey_year,
        df.loc[bad, ["area_id", "period", "age_group"]].reset_index(drop=True),
    )


def logit_delta(p, v):
    """Logit of a proportion and its delta-method variance ``v / (p (1 - p))^2``.

    Proportions at 0 or 1 give NaN.
    """
    p = np.asarray(p, float)
    v = np.asarray(v, float)
    inside = (p > 0) & (p < 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(inside, np.log(p) - np.log1p(-p), np.nan)
        lv = np.where(inside, v / (p * (1 - p)) ** 2, np.nan)
    return lg, lv


def cutoff_indicator(years, survey_year: int) -> np.ndarray:
    """+1 at ``survey_year - 6``, -1 at ``survey_year - 5``, 0 elsewhere."""
    y = np.asarray(years, int)
    return (y == survey_year - 6).astype(float) - (y == survey_year - 5).astype(float)


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


@dataclass
class FitResult:
    """A fitted model: posterior samples and natural-scale estimates."""

    estimates: SmoothedEstimates
    samples: PosteriorSamples
    flags: list[str] = field(default_factory=list)

    def summary(self) -> pd.DataFrame:
        return self.estimates.summary()


def _settings(settings: SamplerSettings | None) -> SamplerSettings:
    return settings or SamplerSettings()


def _space_blocks(graph: RegionGraph, index) -> EffectBlock:
    s = icar(graph)
    return EffectBlock("space", s, index, kind="bym2", phi_prior=pc_prior_phi(s))


def _covariate_effects(inp: AreaModelInput, area_of_row: np.ndarray) -> list[FixedEffect]:
    if inp.covariates is None or inp.covariates.shape[1] == 0:
        raise ModelInputError("use_covariates requested but no covariates supplied")
    x = standardize(inp.covariates)
    return [FixedEffect(f"beta[{name}]", x[area_of_row, k]) for k, name in enumerate(inp.covariate_names)]


def _check_graph(inp: AreaModelInput, graph: RegionGraph):
    if graph.n != inp.n_areas:
        raise ModelInputError(f"graph has {graph.n} regions but the input has {inp.n_areas} areas")
    if len(inp.data) and (inp.data["area_id"].min() < 1 or inp.data["area_id"].max() > inp.n_areas):
        raise ModelInputError("area ids outside 1..n_areas")


def fit_fh_asfr(
    inp: AreaModelInput,
    graph: RegionGraph,
    use_covariates: bool = False,
    settings: SamplerSettings | None = None,
    model_name: str = "fh_asfr",
) -> FitResult:
    """Fay-Herriot log-ASFR model over areas x age groups for one reference period."""
    _check_graph(inp, graph)
    if len(inp.periods) != 1:
        raise ModelInputError("the ASFR model takes exactly one reference period")
    period = inp.periods[0]
    d = inp.data[(inp.data["period"] == period) & (inp.data["age_group"] >= 0)]
    n, A = inp.n_areas, N_AGE_GROUPS
    rows = n * A
    area = np.repeat(np.arange(n), A)
    age = np.tile(np.arange(A), n)
    fixed = [FixedEffect("intercept", np.ones(rows))]
    if use_covariates:
        fixed += _covariate_effects(inp, area)
    r1 = rw1(A)
    blocks = [
        EffectBlock("age", r1, age),
        EffectBlock("age_iid", iid(A), age),
        _space_blocks(graph, area),
        EffectBlock("space_age", build_interaction(icar(graph), r1), area * A + age),
    ]
    spec = LatentModelSpec(rows, fixed, blocks, GAUSSIAN)
    obs_row = (d["area_id"].to_numpy(int) - 1) * A + d["age_group"].to_numpy(int)
    obs = Observations(obs_row, d["value"].to_numpy(float), variance=d["variance"].to_numpy(float))
    if len(obs) == 0:
        raise ModelInputError("no usable direct estimates")
    samples = sample_posterior(spec, obs, _settings(settings))
    flags = []
    seen_age = set(d["age_group"].astype(int))
    key_flags = []
    seen_key = set(obs_row.tolist())
    for r in range(rows):
        f = []
        if age[r] not in seen_age:
            f.append(FLAG_NO_DATA_AGE)
        if r not in seen_key:
            f.append(FLAG_NO_DATA_KEY)
        key_flags.append(";".join(f))
    missing_ages = sorted(set(range(A)) - seen_age)
    if missing_ages:
        flags.append(FLAG_NO_DATA_AGE)
        logger.warning("age groups %s have no direct estimates; predicted from the model", missing_ages)
    eta = samples.predictor()
    keys = pd.DataFrame({"area_id": area + 1, "period": period, "age_group": age, "flags": key_flags})
    est = SmoothedEstimates(model_name, inp.level, keys, np.exp(eta) * PER, "log")
    return FitResult(est, samples, flags)


def fit_fh_tfr(
    inp: AreaModelInput,
    graph: RegionGraph,
    survey_year: int | None = None,
    use_covariates: bool = False,
    settings: SamplerSettings | None = None,
    cutoff_adjustment: bool = True,
    model_name: str = "fh_tfr",
) -> FitResult:
    """Fay-Herriot log-TFR model over areas x calendar years.

    ``inp.periods`` must be consecutive calendar years.  With
    ``cutoff_adjustment=False`` the adjustment is left out (zeta fixed at 0).
    """
    _check_graph(inp, graph)
    survey_year = survey_year if survey_year is not None else inp.survey_year
    try:
        years = np.array([int(p) for p in inp.periods])
    except ValueError as exc:
        raise ModelInputError("the TFR model needs yearly periods") from exc
    if years.size < 3:
        raise ModelInputError("the TFR model needs at least 3 years (RW2)")
    if np.any(np.diff(years) != 1):
        raise ModelInputError("years must be consecutive")
    d = inp.data[inp.data["age_group"] == TFR_AGE]
    d = d[d["period"].isin([str(y) for y in years])]
    n, T = inp.n_areas, years.size
    rows = n * T
    area = np.repeat(np.arange(n), T)
    t_idx = np.tile(np.arange(T), n)
    tt = (np.arange(T) - (T - 1) / 2) / T
    fixed = [FixedEffect("intercept", np.ones(rows)), FixedEffect("slope", tt[t_idx])]
    flags = []
    if cutoff_adjustment:
        if survey_year is None:
            raise ModelInputError("cutoff adjustment needs the survey year")
        ind = cutoff_indicator(years, survey_year)
        if np.any(ind != 0):
            fixed.append(FixedEffect("zeta", ind[t_idx], ZETA_PRIOR, report=False))
        else:
            flags.append("cutoff_years_outside_window")
            logger.warning("cutoff years %d/%d fall outside the modelled years", survey_year - 6, survey_year - 5)
    if use_covariates:
        fixed += _covariate_effects(inp, area)
    r2 = rw2(T)
    blocks = [
        EffectBlock("time", r2, t_idx),
        EffectBlock("time_iid", iid(T), t_idx),
        _space_blocks(graph, area),
        EffectBlock("space_time", build_interaction(icar(graph), r2), area * T + t_idx),
    ]
    spec = LatentModelSpec(rows, fixed, blocks, GAUSSIAN)
    t_of = {str(y): k for k, y in enumerate(years)}
    obs_row = (d["area_id"].to_numpy(int) - 1) * T + d["period"].map(t_of).to_numpy(int)
    obs = Observations(obs_row, d["value"].to_numpy(float), variance=d["variance"].to_numpy(float))
    if len(obs) == 0:
        raise ModelInputError("no usable direct estimates")
    samples = sample_posterior(spec, obs, _settings(settings))
    seen = set(obs_row.tolist())
    keys = pd.DataFrame(
        {
            "area_id": area + 1,
            "period": years[t_idx].astype(str),
            "age_group": TFR_AGE,
            "flags": ["" if r in seen else FLAG_NO_DATA_KEY for r in range(rows)],
        }
    )
    est = SmoothedEstimates(model_name, inp.level, keys, np.exp(samples.predictor()), "log")
    return FitResult(est, samples, flags)


def fit_fh_covariate(
    inp: AreaModelInput,
    graph: RegionGraph,
    settings: SamplerSettings | None = None,
    model_name: str = "fh_covariate",
) -> FitResult:
    """Logit-scale Fay-Herriot model with intercept and BYM2 area effect.

    ``inp`` must be built with ``transform="logit"``; one value per area
    (``age_group`` and ``period`` are carried through unchanged).
    """
    _check_graph(inp, graph)
    d = inp.data
    if d["area_id"].duplicated().any():
        raise ModelInputError("the covariate model takes one estimate per area")
    n = inp.n_areas
    area = np.arange(n)
    spec = LatentModelSpec(n, [FixedEffect("intercept", np.ones(n))], [_space_blocks(graph, area)], GAUSSIAN)
    obs = Observations(d["area_id"].to_numpy(int) - 1, d["value"].to_numpy(float), variance=d["variance"].to_numpy(float))
    if len(obs) == 0:
        raise ModelInputError("no usable direct estimates")
    samples = sample_posterior(spec, obs, _settings(settings))
    seen = set(obs.row.tolist())
    excluded = set() if inp.excluded is None else set(inp.excluded["area_id"].astype(int))
    period = inp.periods[0] if inp.periods else ""
    age = int(d["age_group"].iloc[0]) if len(d) else TFR_AGE
    flags = []
    for i in range(n):
        f = []
        if i + 1 in excluded:
            f.append(FLAG_BOUNDARY)
        if i not in seen:
            f.append(FLAG_NO_DATA_KEY)
        flags.append(";".join(f))
    keys = pd.DataFrame({"area_id": area + 1, "period": period, "age_group": age, "flags": flags})
    est = SmoothedEstimates(model_name, inp.level, keys, expit(samples.predictor()), "logit")
    return FitResult(est, samples, [])


def aggregate_tfr_periods(yearly: SmoothedEstimates | FitResult, periods: dict, weights: dict | None = None) -> SmoothedEstimates:
    """Per-draw weighted average of yearly natural-scale TFR within periods.

    ``periods`` maps year -> label; ``weights`` maps year -> weight summing
    to 1 within each period (equal weights when omitted).
    """
    est = yearly.estimates if isinstance(yearly, FitResult) else yearly
    return aggregate_periods(est, periods, weights)


__all__ = [
    "AreaModelInput",
    "FitResult",
    "KEY_COLUMNS",
    "ModelInputError",
    "aggregate_tfr_periods",
    "area_input",
    "cutoff_indicator",
    "fit_fh_asfr",
    "fit_fh_covariate",
    "fit_fh_tfr",
    "logit_delta",
]
