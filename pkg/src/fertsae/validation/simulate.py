"""Synthetic stratified two-stage cluster surveys with known fertility.

Strata are (area, urbanicity).  Enumeration areas (EAs) are drawn within each
stratum by systematic PPS on household counts, then a fixed number of
households per EA, so household weights are ``M_h / (n_h * households)``.
Women get birth histories from a monthly renewal process: a fertile state
and nine post-birth infertile months.  The per-woman hazard is set by
forward recursion on her state probabilities so that her marginal monthly
birth probability equals the true ASFR / 12 times a cluster multiplier with
mean one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import Delaunay

from ..survey import (
    MAX_RESPONDENT_AGE_MONTHS,
    MAX_AGE_MONTHS,
    MIN_AGE_MONTHS,
    N_AGE_GROUPS,
    RegionGraph,
    SurveyDataset,
    cmc_from_year_month,
    cmc_year,
)

logger = logging.getLogger(__name__)

RURAL_SCHEDULE = np.array([0.14, 0.24, 0.22, 0.17, 0.13, 0.07, 0.03])
URBAN_SCHEDULE = np.array([0.10, 0.22, 0.25, 0.20, 0.14, 0.06, 0.03])
INFERTILE_MONTHS = 9
BURN_IN_MONTHS = 12
TRUTH_COLUMNS = ["area_id", "urban", "year", "age_group", "true_asfr"]


class InfeasibleConfig(ValueError):
    pass


def make_region_graph(n: int, seed: int = 0) -> tuple[RegionGraph, np.ndarray]:
    """Planar neighbourhood graph from the Delaunay triangulation of random points."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n, 2))
    if n < 3:
        return RegionGraph.from_edges(n, [(0, 1)] if n == 2 else []), pts
    tri = Delaunay(pts)
    edges = set()
    for simplex in tri.simplices:
        for i in range(3):
            for j in range(i + 1, 3):
                a, b = sorted((int(simplex[i]), int(simplex[j])))
                edges.add((a, b))
    return RegionGraph.from_edges(n, sorted(edges)), pts


@dataclass
class SimConfig:
    """Simulation settings.  Effects are on the log-ASFR scale."""

    n_areas: int = 23
    admin2_per_area: int = 5
    graph: RegionGraph | None = None
    graph_seed: int = 11
    survey_year: int = 2021
    n_years: int = 9
    n_clusters: int = 647
    min_clusters_per_stratum: int = 1
    urban_oversampling: float = 1.0
    households_per_cluster: int = 32
    women_per_household: float = 0.9
    ea_mean_households: float = 120.0
    area_households: tuple[float, float] = (20_000.0, 120_000.0)
    urban_share: tuple[float, float] = (0.1, 0.4)
    interview_months: tuple[int, int] = (1, 6)
    tfr_start: float = 4.8
    tfr_end: float = 4.2
    urban_gap: float = 1.5
    rural_schedule: np.ndarray = field(default_factory=lambda: RURAL_SCHEDULE.copy())
    urban_schedule: np.ndarray = field(default_factory=lambda: URBAN_SCHEDULE.copy())
    sigma_space: float = 0.15
    sigma_space_age: float = 0.05
    sigma_space_time: float = 0.03
    sigma_age_time: float = 0.03
    covariate_effects: tuple[float, float] = (0.0, 0.0)
    cluster_sd: float = 0.15
    displacement: float = 0.0
    seed: int = 0
    truth_seed: int | None = None

    @property
    def years(self) -> list[int]:
        return list(range(self.survey_year - self.n_years + 1, self.survey_year + 1))

    @property
    def window(self) -> tuple[int, int]:
        return self.years[0], self.years[-1]

    def validate(self):
        if self.n_areas < 2:
            raise InfeasibleConfig("need at least 2 areas")
        if self.n_years < 1:
            raise InfeasibleConfig("need at least one year")
        if self.n_clusters < 1 or self.households_per_cluster < 1:
            raise InfeasibleConfig("cluster and household counts must be positive")
        if not self.women_per_household > 0:
            raise InfeasibleConfig("women per household must be positive")
        if self.tfr_start < 0 or self.tfr_end < 0:
            raise InfeasibleConfig("TFR must be non-negative")
        if not 0 <= self.displacement <= 1:
            raise InfeasibleConfig("displacement must lie in [0, 1]")
        if self.ea_mean_households < self.households_per_cluster:
            raise InfeasibleConfig("EAs must hold at least one cluster's households")


@dataclass
class SimTruth:
    """Known rates of a simulated population.

    ``asfr`` has shape (areas, 2, years, 7) with urbanicity index 0 = rural,
    1 = urban, in births per woman-year.  ``households`` (areas, 2) are the
    stratum sizes used as population weights and ``exposure_profile``
    (years, 7) the expected exposure per woman, identical across strata.
    """

    asfr: np.ndarray
    households: np.ndarray
    years: list[int]
    exposure_profile: np.ndarray
    covariates: pd.DataFrame
    effects: dict

    @property
    def urban_fraction(self) -> np.ndarray:
        return self.households[:, 1] / self.households.sum(axis=1)

    def frame(self) -> pd.DataFrame:
        n, _, t, a = self.asfr.shape
        i, u, y, g = np.meshgrid(np.arange(n), [0, 1], np.arange(t), np.arange(a), indexing="ij")
        return pd.DataFrame(
            {
                "area_id": i.ravel() + 1,
                "urban": u.ravel(),
                "year": np.asarray(self.years)[y.ravel()],
                "age_group": g.ravel(),
                "true_asfr": self.asfr.ravel() * 1000.0,
            }
        )

    def _period_weights(self, periods: dict | None):
        years = np.asarray(self.years)
        labels = [str(y) for y in years] if periods is None else [periods[y] for y in years]
        uniq = list(dict.fromkeys(labels))
        member = np.array([[lab == p for lab in labels] for p in uniq], float)  # (P, T)
        return uniq, member

    def rates(self, level: str = "national", urbanicity: str = "both", periods: dict | None = None) -> pd.DataFrame:
        """Population truth for direct-estimator targets, per 1,000.

        Strata are weighted by household counts and years within a period by
        the expected exposure profile; periods where an age group has no
        expected exposure weight years equally.
        """
        w = self.households.copy()
        if urbanicity == "urban":
            w[:, 0] = 0
        elif urbanicity == "rural":
            w[:, 1] = 0
        uniq, member = self._period_weights(periods)
        e = self.exposure_profile  # (T, A)
        # cells the survey never observes fall back to equal year weights
        e = np.where((member @ e)[np.argmax(member, axis=0)] > 0, e, 1.0)
        # numerator and denominator per (area, period, age)
        num = np.einsum("iu,iuta,ta,pt->ipa", w, self.asfr, e, member)
        den = np.einsum("iu,ta,pt->ipa", w, e, member)
        if level == "national":
            num = num.sum(axis=0, keepdims=True)
            den = den.sum(axis=0, keepdims=True)
            areas = [0]
        else:
            areas = list(range(1, self.asfr.shape[0] + 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            rate = num / den
        i, p, a = np.meshgrid(np.arange(len(areas)), np.arange(len(uniq)), np.arange(N_AGE_GROUPS), indexing="ij")
        out = pd.DataFrame(
            {
                "area_id": np.asarray(areas)[i.ravel()],
                "period": np.asarray(uniq)[p.ravel()],
                "age_group": a.ravel(),
                "true_asfr": rate.ravel() * 1000.0,
            }
        )
        return out

    def tfr(self, level: str = "national", urbanicity: str = "both", periods: dict | None = None) -> pd.DataFrame:
        r = self.rates(level, urbanicity, periods)
        t = r.groupby(["area_id", "period"], sort=False)["true_asfr"].sum() * 5.0 / 1000.0
        return t.rename("true_tfr").reset_index()

    def stratum_tfr(self) -> np.ndarray:
        """TFR per (area, urbanicity, year)."""
        return 5.0 * self.asfr.sum(axis=-1)


def expected_exposure_profile(config: SimConfig) -> np.ndarray:
    """Expected person-years per woman by (year, age group) under the age design."""
    years = config.years
    ws = cmc_from_year_month(years[0], 1).cmc
    we = cmc_from_year_month(years[-1], 12).cmc
    m0, m1 = config.interview_months
    prof = np.zeros((len(years), N_AGE_GROUPS))
    ages = np.arange(MIN_AGE_MONTHS, MAX_RESPONDENT_AGE_MONTHS)
    months = np.arange(ws, we + 1)
    for im in range(m0, m1 + 1):
        itw = cmc_from_year_month(config.survey_year, im).cmc
        mm = months[months < itw]
        for age in ages:
            dob = itw - age
            a = mm - dob
            ok = (a >= MIN_AGE_MONTHS) & (a < MAX_AGE_MONTHS)
            np.add.at(prof, (cmc_year(mm[ok]) - years[0], (a[ok] - MIN_AGE_MONTHS) // 60), 1.0)
    return prof / (12.0 * len(ages) * (m1 - m0 + 1))


def _centered(rng, shape, sd):
    x = rng.normal(0.0, sd, shape) if sd > 0 else np.zeros(shape)
    for ax in range(x.ndim):
        x = x - x.mean(axis=ax, keepdims=True)
    return x


def build_truth(config: SimConfig, graph: RegionGraph) -> SimTruth:
    rng = np.random.default_rng(config.truth_seed if config.truth_seed is not None else config.seed + 7919)
    n, t = config.n_areas, config.n_years
    lo, hi = config.area_households
    m_area = rng.uniform(lo, hi, n)
    ushare = rng.uniform(*config.urban_share, n)
    households = np.column_stack([m_area * (1 - ushare), m_area * ushare])

    # spatially smooth area effect: average of iid noise over the neighbourhood
    z = rng.normal(size=n)
    nb = graph.neighbors
    smooth = np.array([(z[i] + sum(z[j] for j in nb[i])) / (1 + len(nb[i])) for i in range(n)])
    smooth = (smooth - smooth.mean()) / (smooth.std() or 1.0)
    space = config.sigma_space * smooth
    cov_z = rng.normal(size=(n, 2))
    cov_z = (cov_z - cov_z.mean(0)) / cov_z.std(0)
    space = space + cov_z @ np.asarray(config.covariate_effects, float)
    space_age = _centered(rng, (n, N_AGE_GROUPS), config.sigma_space_age)
    space_time = _centered(rng, (n, t), config.sigma_space_time)
    age_time = _centered(rng, (N_AGE_GROUPS, t), config.sigma_age_time)

    trend = np.linspace(config.tfr_start, config.tfr_end, t)
    rural_tfr = trend + config.urban_gap * ushare.mean()
    urban_tfr = rural_tfr - config.urban_gap
    if np.any(urban_tfr < 0):
        raise InfeasibleConfig("urban gap larger than rural TFR")
    sched = np.stack([config.rural_schedule / config.rural_schedule.sum(), config.urban_schedule / config.urban_schedule.sum()])
    base = np.stack([rural_tfr, urban_tfr])[:, :, None] / 5.0 * sched[:, None, :]  # (2, T, A)
    with np.errstate(divide="ignore"):
        log_rate = (
            np.log(base)[None, :, :, :]
            + space[:, None, None, None]
            + space_age[:, None, None, :]
            + space_time[:, None, :, None]
            + age_time.T[None, None, :, :]
        )
    asfr = np.exp(log_rate)

    # rescale each year so the national TFR follows the configured trend
    profile = expected_exposure_profile(config)
    for k in range(t):
        nat = 5.0 * np.einsum("iu,iua->", households, asfr[:, :, k, :]) / households.sum()
        if nat > 0:
            asfr[:, :, k, :] *= trend[k] / nat
    covs = pd.DataFrame(
        {
            "area_id": np.arange(1, n + 1),
            "education": 1.0 / (1.0 + np.exp(-cov_z[:, 0])),
            "contraception": 1.0 / (1.0 + np.exp(-cov_z[:, 1])),
        }
    )
    effects = {
        "space": space,
        "space_age": space_age,
        "space_time": space_time,
        "age_time": age_time,
        "urban_share": ushare,
    }
    return SimTruth(asfr, households, config.years, profile, covs, effects)


def _allocate(config: SimConfig, households: np.ndarray) -> np.ndarray:
    """Clusters per stratum: proportional to size, urban strata up-weighted."""
    w = households.copy()
    w[:, 1] *= config.urban_oversampling
    flat = w.ravel() / w.sum()
    floor = config.min_clusters_per_stratum
    n_strata = flat.size
    if floor * n_strata > config.n_clusters:
        raise InfeasibleConfig(
            f"{config.n_clusters} clusters cannot give {floor} to each of {n_strata} strata"
        )
    remaining = config.n_clusters - floor * n_strata
    raw = flat * remaining
    alloc = np.floor(raw).astype(int)
    short = remaining - alloc.sum()
    order = np.argsort(-(raw - alloc), kind="stable")
    alloc[order[:short]] += 1
    return (alloc + floor).reshape(households.shape)


def _systematic_pps(rng, sizes: np.ndarray, n: int) -> np.ndarray:
    total = sizes.sum()
    step = total / n
    points = rng.uniform(0, step) + step * np.arange(n)
    return np.searchsorted(np.cumsum(sizes), points, side="right")


@dataclass
class SimulatedSurvey:
    dataset: SurveyDataset
    truth: SimTruth
    config: SimConfig
    n_displaced: int = 0

    def truth_frame(self) -> pd.DataFrame:
        return self.truth.frame()


def simulate_survey(config: SimConfig, truth: SimTruth | None = None) -> SimulatedSurvey:
    """Draw one survey; reuse ``truth`` to keep the population fixed across replicates."""
    config.validate()
    graph = config.graph or make_region_graph(config.n_areas, config.graph_seed)[0]
    if graph.n != config.n_areas:
        raise InfeasibleConfig("graph size does not match n_areas")
    if truth is None:
        truth = build_truth(config, graph)
    rng = np.random.default_rng(config.seed)
    alloc = _allocate(config, truth.households)
    hh = config.households_per_cluster

    cl_rows = []
    for i in range(config.n_areas):
        for u in (0, 1):
            n_h = int(alloc[i, u])
            if n_h == 0:
                continue
            m_h = truth.households[i, u]
            n_ea = max(int(round(m_h / config.ea_mean_households)), 1)
            sizes = hh + rng.poisson(config.ea_mean_households - hh, n_ea).astype(float)
            sizes *= m_h / sizes.sum()
            if n_h > n_ea:
                raise InfeasibleConfig(f"stratum ({i + 1}, {u}) needs {n_h} clusters but has {n_ea} EAs")
            ea_district = rng.integers(0, config.admin2_per_area, n_ea)
            picks = _systematic_pps(rng, sizes, n_h)
            for e in picks:
                cl_rows.append((i, u, int(ea_district[e]), m_h / (n_h * hh)))
    n_cl = len(cl_rows)
    cl_area = np.array([r[0] for r in cl_rows])
    cl_urban = np.array([r[1] for r in cl_rows])
    cl_d = np.array([r[2] for r in cl_rows])
    cl_w = np.array([r[3] for r in cl_rows])
    cl_itw = cmc_from_year_month(config.survey_year, 1).cmc - 1 + rng.integers(
        config.interview_months[0], config.interview_months[1] + 1, n_cl
    )
    cl_mult = np.exp(config.cluster_sd * rng.standard_normal(n_cl) - 0.5 * config.cluster_sd**2)
    cl_ids = np.array([f"C{k + 1:04d}" for k in range(n_cl)])
    clusters = pd.DataFrame(
        {
            "cluster_id": cl_ids,
            "admin1_id": cl_area + 1,
            "admin2_id": cl_area * config.admin2_per_area + cl_d + 1,
            "urban": cl_urban.astype(bool),
            "stratum_id": [f"S{a + 1:02d}{'U' if u else 'R'}" for a, u in zip(cl_area, cl_urban)],
        }
    )

    n_women_cl = rng.poisson(config.women_per_household, (n_cl, hh)).sum(axis=1)
    w_cl = np.repeat(np.arange(n_cl), n_women_cl)
    n_w = w_cl.size
    age = rng.integers(MIN_AGE_MONTHS, MAX_RESPONDENT_AGE_MONTHS, n_w)
    itw = cl_itw[w_cl]
    dob = itw - age
    women = pd.DataFrame(
        {
            "woman_id": [f"W{k + 1:06d}" for k in range(n_w)],
            "cluster_id": cl_ids[w_cl],
            "dob_cmc": dob,
            "interview_cmc": itw,
            "weight": cl_w[w_cl],
        }
    )

    b_w, b_m = _simulate_births(rng, config, truth, cl_area[w_cl], cl_urban[w_cl], cl_mult[w_cl], dob, itw)
    n_disp = 0
    if config.displacement > 0 and b_m.size:
        in_year = cmc_year(b_m) == config.survey_year - 5
        move = in_year & (rng.uniform(size=b_m.size) < config.displacement)
        b_m = np.where(move, b_m - 12, b_m)
        n_disp = int(move.sum())
    order = np.lexsort((b_m, b_w))
    births = pd.DataFrame({"woman_id": women["woman_id"].to_numpy()[b_w[order]], "birth_cmc": b_m[order]})

    admin2 = _admin2_graph(graph, config.admin2_per_area, rng)
    ds = SurveyDataset(women, births, clusters, graph, admin2, {"admin1": truth.covariates.copy()})
    logger.info("simulated %s", ds.summary())
    return SimulatedSurvey(ds, truth, config, n_disp)


def _admin2_graph(graph: RegionGraph, k: int, rng) -> RegionGraph:
    """Districts: a path inside each area, linked to the first district of neighbouring areas."""
    edges = []
    for i in range(graph.n):
        for d in range(k - 1):
            edges.append((i * k + d, i * k + d + 1))
        for j in graph.neighbors[i]:
            if j > i:
                edges.append((i * k + int(rng.integers(k)), j * k + int(rng.integers(k))))
    return RegionGraph.from_edges(graph.n * k, edges)


def _simulate_births(rng, config, truth, area, urban, mult, dob, itw):
    years = config.years
    ws = cmc_from_year_month(years[0], 1).cmc
    n = dob.size
    start = np.maximum(dob + MIN_AGE_MONTHS, ws - BURN_IN_MONTHS)
    end = itw - 1
    if n == 0:
        return np.zeros(0, int), np.zeros(0, int)
    m_lo, m_hi = int(start.min()), int(end.max())
    probs = np.zeros((n, INFERTILE_MONTHS + 1))
    probs[:, 0] = 1.0
    state = np.zeros(n, dtype=int)  # 0 fertile, k>0 infertile months remaining
    out_w, out_m = [], []
    for m in range(m_lo, m_hi + 1):
        active = (m >= start) & (m <= end)
        if not active.any():
            continue
        idx = np.flatnonzero(active)
        a = m - dob[idx]
        g = (a - MIN_AGE_MONTHS) // 60
        ok = (g >= 0) & (g < N_AGE_GROUPS)
        yi = np.clip(cmc_year(m) - years[0], 0, len(years) - 1)
        target = np.zeros(idx.size)
        target[ok] = truth.asfr[area[idx[ok]], urban[idx[ok]], yi, g[ok]] / 12.0 * mult[idx[ok]]
        p = probs[idx]
        pf = p[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(pf > 0, np.minimum(target / pf, 1.0), 0.0)
        birth = (state[idx] == 0) & (rng.uniform(size=idx.size) < h)
        # marginal state recursion
        new = np.zeros_like(p)
        new[:, 0] = pf * (1 - h) + p[:, INFERTILE_MONTHS]
        new[:, 1] = pf * h
        new[:, 2:] = p[:, 1:INFERTILE_MONTHS]
        probs[idx] = new
        s_next = np.where(state[idx] == INFERTILE_MONTHS, 0, np.where(state[idx] > 0, state[idx] + 1, 0))
        s_next = np.where(birth, 1, s_next)
        state[idx] = s_next
        if birth.any():
            out_w.append(idx[birth])
            out_m.append(np.full(int(birth.sum()), m))
    if not out_w:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(out_w), np.concatenate(out_m)


def write_truth(truth: SimTruth, path) -> None:
    truth.frame()[TRUTH_COLUMNS].to_csv(path, index=False, float_format="%.10g")
