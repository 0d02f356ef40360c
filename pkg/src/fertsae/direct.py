"""Survey-weighted direct ASFR and TFR with jackknife and log-scale variances.

ASFR is the weighted ratio of births to person-years, per 1,000 women-years.
TFR is five times the sum of the seven ASFRs, per woman.  Variances come from
a delete-one-cluster jackknife over the clusters that contribute to the
estimate; log-scale variances use the delta method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
import pandas as pd

from .exposure import FertilityTable, aggregate_cells
from .survey import N_AGE_GROUPS

logger = logging.getLogger(__name__)

TFR_AGE = -1
PER = 1000.0

FLAG_SPARSE = "sparse"
FLAG_NO_DATA = "no_data"
FLAG_JK_UNAVAILABLE = "jk_unavailable"
FLAG_JK_DROPPED = "jk_dropped"
FLAG_MISSING_AGE = "missing_age"

ESTIMATE_COLUMNS = [
    "level",
    "area_id",
    "period",
    "age_group",
    "point",
    "variance",
    "log_point",
    "log_variance",
    "flags",
]


class NoDataError(ValueError):
    """The estimate has zero weighted exposure."""


@dataclass(frozen=True)
class DirectEstimate:
    """A direct estimate on the natural and log scales.

    ``age_group`` is 0..6 for an ASFR (per 1,000) or -1 for a TFR.
    Log fields are NaN when the point is zero or the variance is missing.
    """

    area_id: int
    period: str
    age_group: int
    point: float
    variance: float = np.nan
    log_point: float = np.nan
    log_variance: float = np.nan
    flags: tuple[str, ...] = ()
    level: str = "national"
    n_clusters: int = 0

    @property
    def is_tfr(self) -> bool:
        return self.age_group == TFR_AGE

    def with_flag(self, flag: str) -> "DirectEstimate":
        return replace(self, flags=tuple(sorted(set(self.flags) | {flag})))


def asfr_point(w_births: float, w_exposure: float) -> float:
    if not w_exposure > 0:
        raise NoDataError("zero weighted exposure")
    return w_births / w_exposure * PER


def direct_asfr(cells: pd.DataFrame, area_id=0, period="", age_group=0, level="national") -> DirectEstimate:
    """Point ASFR for one key from cell-level weighted sums."""
    wb = float(cells["w_births"].sum())
    we = float(cells["w_exposure"].sum())
    point = asfr_point(wb, we)
    flags = (FLAG_SPARSE,) if point == 0 else ()
    return DirectEstimate(int(area_id), str(period), int(age_group), point, flags=flags, level=level)


def direct_tfr(asfrs) -> DirectEstimate:
    """TFR from the age-specific estimates of one (area, period).

    Missing age groups count as zero and set the ``missing_age`` flag.
    """
    asfrs = list(asfrs)
    if not asfrs:
        raise ValueError("no age-specific estimates supplied")
    seen = {e.age_group for e in asfrs}
    pts = [e.point for e in sorted(asfrs, key=lambda e: e.age_group)]
    point = 5.0 * float(np.sum(pts)) / PER
    flags = () if seen == set(range(N_AGE_GROUPS)) else (FLAG_MISSING_AGE,)
    e0 = asfrs[0]
    return DirectEstimate(e0.area_id, e0.period, TFR_AGE, point, flags=flags, level=e0.level)


def jackknife(replicates) -> tuple[float, int]:
    """Delete-one jackknife variance of finite replicate values.

    Non-finite replicates are dropped.  Returns ``(variance, n_used)`` with a
    NaN variance when fewer than two replicates remain.
    """
    r = np.asarray(replicates, float)
    r = r[np.isfinite(r)]
    c = r.size
    if c < 2:
        return np.nan, c
    return (c - 1) / c * float(np.sum((r - r.mean()) ** 2)), c


def log_transform(est: DirectEstimate) -> DirectEstimate:
    """Fill log-scale point and delta-method variance.

    ASFRs are converted to per-woman rates before taking logs.
    """
    if not est.point > 0:
        raise ValueError("log transform needs a positive point estimate")
    scale = 1.0 if est.is_tfr else PER
    return replace(est, log_point=float(np.log(est.point / scale)), log_variance=est.variance / est.point**2)


def _replicate_stats(rep: pd.Series, valid: pd.Series, group: pd.Series) -> pd.DataFrame:
    r = rep.where(valid)
    g = pd.DataFrame({"g": group.to_numpy(), "r": r.to_numpy(), "bad": (~valid).to_numpy()})
    grp = g.groupby("g", sort=False)
    c = grp["r"].count()
    mean = grp["r"].transform("mean")
    ss = ((g["r"] - mean) ** 2).groupby(g["g"], sort=False).sum()
    var = (c - 1) / c * ss
    var[c < 2] = np.nan
    return pd.DataFrame({"variance": var, "n_used": c, "dropped": grp["bad"].any()})


def _asfr_table(df: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    df = df[df["w_exposure"] > 0]
    tot = df.groupby(keys, sort=True)[["w_births", "w_exposure"]].sum()
    gid = df.groupby(keys, sort=True).ngroup()
    tb = df.groupby(keys)["w_births"].transform("sum")
    te = df.groupby(keys)["w_exposure"].transform("sum")
    den = te - df["w_exposure"]
    valid = den > 1e-12 * te
    rep = (tb - df["w_births"]) / den.where(valid, 1.0) * PER
    stats = _replicate_stats(rep, valid, gid).sort_index()
    out = tot.reset_index()
    out["point"] = out["w_births"] / out["w_exposure"] * PER
    out["variance"] = stats["variance"].to_numpy()
    out["n_clusters"] = stats["n_used"].to_numpy()
    out["jk_dropped"] = stats["dropped"].to_numpy()
    return out


def _tfr_table(df: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    df = df[df["w_exposure"] > 0]
    wide = df.pivot_table(
        index=keys + ["cluster_id"],
        columns="age_group",
        values=["w_births", "w_exposure"],
        aggfunc="sum",
        fill_value=0.0,
    )
    wide = wide.reindex(
        columns=pd.MultiIndex.from_product([["w_births", "w_exposure"], range(N_AGE_GROUPS)]), fill_value=0.0
    )
    wb = wide["w_births"].to_numpy()
    we = wide["w_exposure"].to_numpy()
    idx = wide.index.droplevel("cluster_id")
    codes, uniq = pd.factorize(pd.Series(list(idx.to_flat_index())), sort=False)
    n_g = len(uniq)
    tb = np.zeros((n_g, N_AGE_GROUPS))
    te = np.zeros((n_g, N_AGE_GROUPS))
    np.add.at(tb, codes, wb)
    np.add.at(te, codes, we)
    present = te > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        point = 5.0 * np.where(present, tb / np.where(present, te, 1.0), 0.0).sum(axis=1)
        den = te[codes] - we
        ok_age = (den > 1e-12 * te[codes]) | ~present[codes]
        rates = np.where(present[codes] & ok_age, (tb[codes] - wb) / np.where(ok_age, den, 1.0), 0.0)
    valid = ok_age.all(axis=1)
    rep = 5.0 * rates.sum(axis=1)
    stats = _replicate_stats(pd.Series(rep), pd.Series(valid), pd.Series(codes))
    stats = stats.reindex(range(n_g))
    out = pd.DataFrame(list(uniq), columns=keys)
    out["point"] = point
    out["variance"] = stats["variance"].to_numpy()
    out["n_clusters"] = stats["n_used"].to_numpy()
    out["jk_dropped"] = stats["dropped"].to_numpy()
    out["missing_age"] = ~present.all(axis=1)
    out["w_births"] = tb.sum(axis=1)
    out["w_exposure"] = te.sum(axis=1)
    return out.sort_values(keys).reset_index(drop=True)


def direct_estimates(
    table: FertilityTable,
    level: str = "national",
    periods: Mapping[int, str] | None = None,
    urbanicity: str = "both",
    include_tfr: bool = True,
    include_asfr: bool = True,
) -> pd.DataFrame:
    """Direct ASFR (and TFR) estimates with jackknife and log-scale variance.

    Returns a DataFrame with the ``direct_estimates.csv`` columns plus
    ``urban``, ``n_clusters``, ``w_births`` and ``w_exposure``.  ``flags`` is a
    ``;``-separated string.  Keys with no exposure are absent.
    """
    df = aggregate_cells(table, level, urbanicity, periods, keep_clusters=True)
    keys = ["area_id", "period"]
    frames = []
    if include_asfr:
        a = _asfr_table(df, keys + ["age_group"])
        a["missing_age"] = False
        frames.append(a)
    if include_tfr:
        t = _tfr_table(df, keys)
        t["age_group"] = TFR_AGE
        frames.append(t)
    out = pd.concat(frames, ignore_index=True)
    out["level"] = level if urbanicity == "both" else f"{level}/{urbanicity}"
    out["urban"] = urbanicity
    pos = out["point"] > 0
    has_var = out["variance"].notna()
    scale = np.where(out["age_group"] == TFR_AGE, 1.0, PER)
    with np.errstate(divide="ignore", invalid="ignore"):
        out["log_point"] = np.where(pos, np.log(out["point"] / scale), np.nan)
        out["log_variance"] = np.where(pos & has_var, out["variance"] / out["point"] ** 2, np.nan)
    flags = []
    for r in out.itertuples(index=False):
        f = []
        if r.point == 0:
            f.append(FLAG_SPARSE)
        if not np.isfinite(r.variance):
            f.append(FLAG_JK_UNAVAILABLE)
        if r.jk_dropped:
            f.append(FLAG_JK_DROPPED)
        if r.missing_age:
            f.append(FLAG_MISSING_AGE)
        flags.append(";".join(f))
    out["flags"] = flags
    out = out.sort_values(["area_id", "period", "age_group"], kind="mergesort").reset_index(drop=True)
    cols = ESTIMATE_COLUMNS + ["urban", "n_clusters", "w_births", "w_exposure"]
    return out[cols]


def to_estimates(frame: pd.DataFrame) -> list[DirectEstimate]:
    return [
        DirectEstimate(
            int(r.area_id),
            str(r.period),
            int(r.age_group),
            float(r.point),
            float(r.variance),
            float(r.log_point),
            float(r.log_variance),
            tuple(f for f in str(r.flags).split(";") if f and f != "nan"),
            str(r.level),
            int(r.n_clusters),
        )
        for r in frame.itertuples(index=False)
    ]


def jackknife_variance(
    table: FertilityTable,
    key: tuple,
    estimator: str = "asfr",
    level: str = "national",
    periods: Mapping[int, str] | None = None,
    urbanicity: str = "both",
) -> float:
    """Jackknife variance of a single estimate.

    ``key`` is ``(area_id, period, age_group)`` for an ASFR or
    ``(area_id, period)`` for a TFR.
    """
    if estimator not in ("asfr", "tfr"):
        raise ValueError(f"unknown estimator {estimator!r}")
    est = direct_estimates(
        table, level, periods, urbanicity, include_tfr=estimator == "tfr", include_asfr=estimator == "asfr"
    )
    age = key[2] if estimator == "asfr" else TFR_AGE
    row = est[(est["area_id"] == key[0]) & (est["period"] == str(key[1])) & (est["age_group"] == age)]
    if row.empty:
        raise NoDataError(f"no exposure for key {key}")
    return float(row["variance"].iloc[0])


def write_estimates(frames, path) -> None:
    if isinstance(frames, pd.DataFrame):
        frames = [frames]
    out = pd.concat(frames, ignore_index=True)[ESTIMATE_COLUMNS]
    out.to_csv(path, index=False, float_format="%.12g")


def read_estimates(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"period": str, "flags": str}, keep_default_na=True)
    df["flags"] = df["flags"].fillna("")
    return df
