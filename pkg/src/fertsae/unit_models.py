"""Negative-binomial models on cluster-level cells, urban/rural aggregation.

Births ``Y`` in a (cluster, year, age group) cell are negative binomial with
mean ``n exp(eta)`` for exposure ``n`` in woman-years.  The predictor has an
intercept, linear trend, cutoff adjustment, optional area covariates,
RW2 + IID time, RW1 + IID age, BYM2 space and three Kronecker interactions
(space x age, space x time, age x time).  Urban and rural strata are fitted
separately and combined per draw with urban population fractions.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .area_models import FitResult, ModelInputError, cutoff_indicator, standardize
from .direct import PER
from .estimates import KEY_COLUMNS, SmoothedEstimates, tfr_from_asfr
from .exposure import FertilityTable
from .gmrf.model import NEGATIVE_BINOMIAL, EffectBlock, FixedEffect, LatentModelSpec, Observations
from .gmrf.priors import ZETA_PRIOR, pc_prior_phi
from .gmrf.sampler import PosteriorSamples, SamplerSettings, sample_posterior
from .gmrf.structures import build_interaction, icar, iid, rw1, rw2
from .survey import AGE_LABELS, N_AGE_GROUPS, RegionGraph

logger = logging.getLogger(__name__)

FLAG_LOW_INFORMATION = "low_information"
FLAG_STRATUM_MISSING = "stratum_missing"
FLAG_RESAMPLED = "draws_resampled"
ALL_PERIODS = "*"
COMPONENTS = ("space", "age", "time", "space_time", "space_age", "age_time")


@dataclass
class UnitModelInput:
    """Cells for one urbanicity stratum.

    ``cells`` has ``area_id`` (1-based), ``year``, ``age_group``, ``births``
    and ``exposure`` (woman-years); cells without exposure are dropped.
    """

    cells: pd.DataFrame
    n_areas: int
    years: list[int]
    graph: RegionGraph
    survey_year: int | None = None
    covariates: np.ndarray | None = None
    covariate_names: list[str] = field(default_factory=list)
    level: str = "admin1"
    stratum: str = "both"

    def __post_init__(self):
        c = self.cells
        n0 = len(c)
        self.cells = c[c["exposure"] > 0].reset_index(drop=True)
        if len(self.cells) < n0:
            logger.debug("dropped %d cells without exposure", n0 - len(self.cells))
        self.years = [int(y) for y in self.years]
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, float).reshape(self.n_areas, -1)
            if not self.covariate_names:
                self.covariate_names = [f"x{k + 1}" for k in range(self.covariates.shape[1])]

    @property
    def is_empty(self) -> bool:
        return len(self.cells) == 0


def unit_input(
    table: FertilityTable,
    graph: RegionGraph,
    level: str = "admin1",
    urbanicity: str = "both",
    survey_year: int | None = None,
    covariates=None,
    covariate_names=None,
) -> UnitModelInput:
    """Cluster-level cells of one stratum from a tabulated survey."""
    c = table.cells
    if urbanicity != "both":
        c = c[c["urban"] == (urbanicity == "urban")]
    cells = pd.DataFrame(
        {
            "cluster_id": c["cluster_id"].to_numpy(),
            "area_id": c[f"{level}_id"].to_numpy(int),
            "year": c["year"].to_numpy(int),
            "age_group": c["age_group"].to_numpy(int),
            "births": c["births"].to_numpy(float),
            "exposure": c["exposure"].to_numpy(float),
        }
    )
    years = list(range(table.window[0], table.window[1] + 1))
    return UnitModelInput(
        cells, graph.n, years, graph, survey_year, covariates, list(covariate_names or []), level, urbanicity
    )


def _unit_spec(inp: UnitModelInput, use_covariates: bool, cutoff_adjustment: bool):
    n, T, A = inp.n_areas, len(inp.years), N_AGE_GROUPS
    if T < 3:
        raise ModelInputError("the unit model needs at least 3 years (RW2)")
    rows = n * T * A
    area, t_idx, age = (v.ravel() for v in np.meshgrid(np.arange(n), np.arange(T), np.arange(A), indexing="ij"))
    tt = (np.arange(T) - (T - 1) / 2) / T
    fixed = [FixedEffect("intercept", np.ones(rows)), FixedEffect("slope", tt[t_idx])]
    flags = []
    if cutoff_adjustment:
        if inp.survey_year is None:
            raise ModelInputError("cutoff adjustment needs the survey year")
        ind = cutoff_indicator(inp.years, inp.survey_year)
        if np.any(ind != 0):
            fixed.append(FixedEffect("zeta", ind[t_idx], ZETA_PRIOR, report=False))
        else:
            flags.append("cutoff_years_outside_window")
    if use_covariates:
        if inp.covariates is None or inp.covariates.shape[1] == 0:
            raise ModelInputError("use_covariates requested but no covariates supplied")
        x = standardize(inp.covariates)
        fixed += [FixedEffect(f"beta[{nm}]", x[area, k]) for k, nm in enumerate(inp.covariate_names)]
    g = icar(inp.graph)
    r1, r2 = rw1(A), rw2(T)
    blocks = [
        EffectBlock("time", r2, t_idx),
        EffectBlock("time_iid", iid(T), t_idx),
        EffectBlock("age", r1, age),
        EffectBlock("age_iid", iid(A), age),
        EffectBlock("space", g, area, kind="bym2", phi_prior=pc_prior_phi(g)),
        EffectBlock("space_age", build_interaction(g, r1), area * A + age),
        EffectBlock("space_time", build_interaction(g, r2), area * T + t_idx),
        EffectBlock("age_time", build_interaction(r1, r2), age * T + t_idx),
    ]
    spec = LatentModelSpec(rows, fixed, blocks, NEGATIVE_BINOMIAL)
    return spec, (area, t_idx, age), flags


def _observations(inp: UnitModelInput) -> Observations:
    T, A = len(inp.years), N_AGE_GROUPS
    y0 = inp.years[0]
    c = inp.cells
    t = c["year"].to_numpy(int) - y0
    if np.any((t < 0) | (t >= T)):
        raise ModelInputError("cells outside the modelled years")
    a = c["area_id"].to_numpy(int) - 1
    if np.any((a < 0) | (a >= inp.n_areas)):
        raise ModelInputError("area ids outside 1..n_areas")
    row = (a * T + t) * A + c["age_group"].to_numpy(int)
    return Observations(row, c["births"].to_numpy(float), offset=c["exposure"].to_numpy(float))


def fit_unit_model(
    inp: UnitModelInput,
    use_covariates: bool = False,
    settings: SamplerSettings | None = None,
    cutoff_adjustment: bool = True,
    model_name: str | None = None,
) -> FitResult:
    """Fit the negative-binomial cell model; ASFR per 1,000 for every (area, year, age)."""
    if inp.is_empty:
        raise ModelInputError(f"stratum {inp.stratum!r} has no cells")
    spec, (area, t_idx, age), flags = _unit_spec(inp, use_covariates, cutoff_adjustment)
    obs = _observations(inp)
    samples = sample_posterior(spec, obs, settings or SamplerSettings())
    # areas in graph components without any data get no information from the likelihood
    has_data = np.zeros(inp.n_areas, bool)
    has_data[np.unique(inp.cells["area_id"].to_numpy(int) - 1)] = True
    low = np.zeros(inp.n_areas, bool)
    for comp in inp.graph.components():
        if not has_data[comp].any():
            low[comp] = True
    if low.any():
        flags.append(FLAG_LOW_INFORMATION)
        logger.warning("%d areas sit in graph components without data", int(low.sum()))
    years = np.asarray(inp.years)
    keys = pd.DataFrame(
        {
            "area_id": area + 1,
            "period": years[t_idx].astype(str),
            "age_group": age,
            "flags": np.where(low[area], FLAG_LOW_INFORMATION, ""),
        }
    )
    name = model_name or ("unit" if inp.stratum == "both" else f"unit_{inp.stratum}")
    est = SmoothedEstimates(name, inp.level, keys, np.exp(samples.predictor()) * PER, "log")
    return FitResult(est, samples, flags)


@dataclass
class StratifiedFit:
    urban: FitResult | None
    rural: FitResult | None
    flags: list[str] = field(default_factory=list)


def fit_stratified(
    urban_input: UnitModelInput,
    rural_input: UnitModelInput,
    use_covariates: bool = False,
    settings: SamplerSettings | None = None,
    seeds: tuple[int, int] | None = None,
    threads: int = 2,
    cutoff_adjustment: bool = True,
) -> StratifiedFit:
    """Independent urban and rural fits, run concurrently.

    ``seeds`` defaults to ``(seed, seed + 1)`` from ``settings``.  An empty
    stratum yields ``None`` for that side and a flag.
    """
    settings = settings or SamplerSettings()
    seeds = seeds or (settings.seed, settings.seed + 1)
    jobs = {"urban": (urban_input, seeds[0]), "rural": (rural_input, seeds[1])}
    flags = []
    todo = {}
    for name, (inp, seed) in jobs.items():
        if inp.is_empty:
            flags.append(f"{FLAG_STRATUM_MISSING}:{name}")
            logger.warning("%s stratum has no cells; its estimates are unavailable", name)
        else:
            todo[name] = (inp, replace(settings, seed=seed))
    if not todo:
        raise ModelInputError("both strata are empty")

    def run(name):
        inp, s = todo[name]
        return name, fit_unit_model(inp, use_covariates, s, cutoff_adjustment, f"unit_{name}")

    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=2) as ex:
            out = dict(ex.map(run, list(todo)))
    else:
        out = dict(run(n) for n in todo)
    return StratifiedFit(out.get("urban"), out.get("rural"), flags)


# ----------------------------------------------------------------------
# urban fractions


@dataclass
class GridLayer:
    """Pixels with an urban label and female population per age group."""

    pixel_id: np.ndarray
    area_id: np.ndarray
    urban: np.ndarray
    population: np.ndarray  # (pixels, 7)

    def __post_init__(self):
        self.pixel_id = np.asarray(self.pixel_id)
        self.area_id = np.asarray(self.area_id, int)
        self.urban = np.asarray(self.urban, int)
        self.population = np.asarray(self.population, float).reshape(len(self.pixel_id), N_AGE_GROUPS)
        if np.any(self.population < 0):
            raise ValueError("population counts must be non-negative")
        if not np.all(np.isin(self.urban, (0, 1))):
            raise ValueError("urban labels must be 0 or 1")
        if not (len(self.area_id) == len(self.urban) == len(self.pixel_id)):
            raise ValueError("pixel columns differ in length")

    @classmethod
    def from_csv(cls, path) -> "GridLayer":
        df = pd.read_csv(path)
        pop_cols = [f"pop_{lab.replace('-', '_')}" for lab in AGE_LABELS]
        missing = [c for c in ["pixel_id", "area_id", "urban_label", *pop_cols] if c not in df]
        if missing:
            raise ValueError(f"grid file lacks columns {missing}")
        return cls(df["pixel_id"], df["area_id"], df["urban_label"], df[pop_cols].to_numpy(float))


def urban_fraction(grid: GridLayer, area: int, age_group: int) -> float:
    """Population-weighted urban share ``sum(L H) / sum(H)`` over an area's pixels."""
    sel = grid.area_id == area
    h = grid.population[sel, age_group]
    tot = float(h.sum())
    if not tot > 0:
        raise ValueError(f"area {area} age group {age_group} has zero population")
    return float(grid.urban[sel] @ h) / tot


def urban_fraction_table(grid: GridLayer, period: str = ALL_PERIODS) -> pd.DataFrame:
    """``area_id, period, age_group, r`` for every area and age group in the grid."""
    out = []
    for a in np.unique(grid.area_id):
        for g in range(N_AGE_GROUPS):
            out.append((int(a), period, g, urban_fraction(grid, a, g)))
    return pd.DataFrame(out, columns=["area_id", "period", "age_group", "r"])


def read_urban_fractions(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"period": str})
    if np.any((df["r"] < 0) | (df["r"] > 1)):
        raise ValueError("urban fractions must lie in [0, 1]")
    return df


def _lookup_r(keys: pd.DataFrame, r: pd.DataFrame) -> np.ndarray:
    table = {(int(a), str(p), int(g)): float(v) for a, p, g, v in r[["area_id", "period", "age_group", "r"]].itertuples(index=False)}
    out = np.empty(len(keys))
    for k, (a, p, g) in enumerate(keys[["area_id", "period", "age_group"]].itertuples(index=False)):
        v = table.get((int(a), str(p), int(g)), table.get((int(a), ALL_PERIODS, int(g))))
        if v is None:
            raise KeyError(f"no urban fraction for area {a}, period {p}, age group {g}")
        out[k] = v
    if np.any((out < 0) | (out > 1)):
        raise ValueError("urban fractions must lie in [0, 1]")
    return out


def _match_draws(a: np.ndarray, b: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray, bool]:
    if a.shape[0] == b.shape[0]:
        return a, b, False
    n = max(a.shape[0], b.shape[0])
    if a.shape[0] < n:
        a = a[rng.integers(0, a.shape[0], n)]
    else:
        b = b[rng.integers(0, b.shape[0], n)]
    return a, b, True


def aggregate_ur(
    urban: SmoothedEstimates | FitResult | None,
    rural: SmoothedEstimates | FitResult | None,
    r: pd.DataFrame,
    seed: int = 0,
    model_name: str = "unit_combined",
) -> SmoothedEstimates:
    """Per-draw ``r * urban + (1 - r) * rural`` for every ASFR key.

    Draws are paired by index; unequal draw counts are matched by resampling
    the shorter set (flagged).  With one stratum missing the other is used
    as is (``r`` forced to 0 or 1, flagged).
    """
    u = urban.estimates if isinstance(urban, FitResult) else urban
    ru = rural.estimates if isinstance(rural, FitResult) else rural
    if u is None and ru is None:
        raise ValueError("both strata are missing")
    if u is None or ru is None:
        only = u if u is not None else ru
        which = "urban" if u is None else "rural"
        keys = only.keys.copy()
        keys["flags"] = [";".join(filter(None, [f, f"{FLAG_STRATUM_MISSING}:{which}"])) for f in keys["flags"]]
        return SmoothedEstimates(model_name, only.level, keys, only.draws.copy(), only.transform)
    ku = u.keys[KEY_COLUMNS].reset_index(drop=True)
    kr = ru.keys[KEY_COLUMNS].reset_index(drop=True)
    if not ku.equals(kr):
        # align rural columns to urban key order
        pos = pd.MultiIndex.from_frame(kr).get_indexer(pd.MultiIndex.from_frame(ku))
        if np.any(pos < 0):
            raise ValueError("urban and rural estimates have different keys")
        rd = ru.draws[:, pos]
        rflags = ru.keys["flags"].to_numpy()[pos]
    else:
        rd = ru.draws
        rflags = ru.keys["flags"].to_numpy()
    rv = _lookup_r(ku, r)
    ud, rd, resampled = _match_draws(u.draws, rd, np.random.default_rng(seed))
    draws = rv * ud + (1.0 - rv) * rd
    flags = []
    for fu, fr in zip(u.keys["flags"], rflags):
        f = set(filter(None, str(fu).split(";"))) | set(filter(None, str(fr).split(";")))
        if resampled:
            f.add(FLAG_RESAMPLED)
        flags.append(";".join(sorted(f)))
    keys = ku.assign(flags=flags)
    if resampled:
        logger.warning("urban and rural draw counts differ; resampled to %d", draws.shape[0])
    return SmoothedEstimates(model_name, u.level, keys, draws, "log")


def exceedance_probability(
    urban_tfr: SmoothedEstimates, rural_tfr: SmoothedEstimates, threshold: float = 2.0
) -> pd.DataFrame:
    """Share of draws with ``TFR_rural - TFR_urban > threshold`` per (area, period)."""
    if urban_tfr.n_draws != rural_tfr.n_draws:
        raise ValueError("urban and rural draw counts differ")
    ku = urban_tfr.keys[KEY_COLUMNS]
    pos = pd.MultiIndex.from_frame(rural_tfr.keys[KEY_COLUMNS]).get_indexer(pd.MultiIndex.from_frame(ku))
    if np.any(pos < 0):
        raise ValueError("urban and rural estimates have different keys")
    diff = rural_tfr.draws[:, pos] - urban_tfr.draws
    return pd.DataFrame(
        {
            "area_id": ku["area_id"].to_numpy(),
            "period": ku["period"].to_numpy(),
            "threshold": float(threshold),
            "probability": np.mean(diff > threshold, axis=0),
        }
    )


# ----------------------------------------------------------------------
# variance decomposition


@dataclass
class VarianceDecomposition:
    variances: dict[str, float]
    shares: dict[str, float]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"component": list(self.variances), "variance": list(self.variances.values()), "share": list(self.shares.values())}
        )


def population_variance(values) -> float:
    v = np.asarray(values, float)
    return float(np.mean((v - v.mean()) ** 2)) if v.size else 0.0


def variance_decomposition(
    fit: FitResult | PosteriorSamples,
    exclude_age_groups=(N_AGE_GROUPS - 1,),
    components=COMPONENTS,
) -> VarianceDecomposition:
    """Population variance of posterior-median effects per component.

    Time is the linear trend plus the RW2 and IID time effects, age the RW1
    plus IID age effects, space the BYM2 effect; interactions are taken as
    fitted.  Age groups in ``exclude_age_groups`` are dropped from every
    age-involved component.
    """
    s = fit.samples if isinstance(fit, FitResult) else fit
    med = {name: np.median(s.block(name), axis=0) for name in s.model.slices}
    T = med["time"].size
    A = med["age"].size
    keep_age = np.array([a not in set(exclude_age_groups) for a in range(A)])
    tt = (np.arange(T) - (T - 1) / 2) / T
    effects = {
        "space": med["space"],
        "age": (med["age"] + med["age_iid"])[keep_age],
        "time": med["time"] + med["time_iid"] + med.get("slope", np.zeros(1))[0] * tt,
        "space_time": med["space_time"],
        "space_age": med["space_age"].reshape(-1, A)[:, keep_age],
        "age_time": med["age_time"].reshape(A, T)[keep_age],
    }
    var = {c: population_variance(effects[c]) for c in components}
    total = sum(var.values())
    shares = {c: (v / total if total > 0 else 0.0) for c, v in var.items()}
    return VarianceDecomposition(var, shares)


def tfr_estimates(fit: FitResult | SmoothedEstimates) -> SmoothedEstimates:
    est = fit.estimates if isinstance(fit, FitResult) else fit
    return tfr_from_asfr(est)


__all__ = [
    "GridLayer",
    "StratifiedFit",
    "UnitModelInput",
    "VarianceDecomposition",
    "aggregate_ur",
    "exceedance_probability",
    "fit_stratified",
    "fit_unit_model",
    "tfr_estimates",
    "unit_input",
    "urban_fraction",
    "urban_fraction_table",
    "variance_decomposition",
]
