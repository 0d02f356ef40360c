"""Births and person-years of exposure on the Lexis grid.

Each woman contributes one month of exposure to the cell
(cluster, calendar year, age group) for every calendar month she spends
aged 15-49 inside the observation window, censored at the month before
interview.  Counts are kept as integer months internally so totals are exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .survey import (
    MAX_AGE_MONTHS,
    MIN_AGE_MONTHS,
    N_AGE_GROUPS,
    DataError,
    SurveyDataset,
    cmc_from_year_month,
    cmc_year,
)

logger = logging.getLogger(__name__)

LEVELS = ("national", "admin1", "admin2")
URBANICITY = ("both", "urban", "rural")
VALUE_COLUMNS = ["births", "exposure", "w_births", "w_exposure"]
CELL_COLUMNS = ["area_id", "urban", "cluster_id", "year", "age_group", *VALUE_COLUMNS]


@dataclass
class FertilityTable:
    """Cluster-level cells keyed by (cluster, year, age group).

    ``cells`` holds one row per non-empty cell with cluster metadata
    (``admin1_id``, ``admin2_id``, ``urban``, ``stratum_id``) alongside
    ``births``, ``exposure`` (person-years), ``w_births`` and ``w_exposure``.
    """

    cells: pd.DataFrame
    window: tuple[int, int]
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_exposure(self) -> float:
        return float(self.cells["exposure"].sum())

    @property
    def total_births(self) -> int:
        return int(self.cells["births"].sum())

    @property
    def years(self) -> list[int]:
        return list(range(self.window[0], self.window[1] + 1))

    def to_csv(self, path, level: str = "admin1") -> None:
        out = self.cells.copy()
        out["area_id"] = 0 if level == "national" else out[f"{level}_id"]
        out["urban"] = out["urban"].astype(int)
        out[CELL_COLUMNS].to_csv(path, index=False, float_format="%.12g")

    @classmethod
    def from_csv(cls, path, clusters: pd.DataFrame, window=None) -> "FertilityTable":
        """Read ``cells.csv`` and reattach cluster metadata from ``clusters``."""
        df = pd.read_csv(path, dtype={"cluster_id": str})
        if list(df.columns) != CELL_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(CELL_COLUMNS)}")
        meta = clusters.set_index("cluster_id")
        unknown = ~df["cluster_id"].isin(meta.index)
        if unknown.any():
            raise DataError(f"{path}: unknown cluster_id {df.loc[unknown, 'cluster_id'].iloc[0]!r}")
        df = df.drop(columns=["area_id", "urban"])
        for col in ("admin1_id", "admin2_id", "urban", "stratum_id"):
            df[col] = df["cluster_id"].map(meta[col])
        if window is None:
            window = (int(df["year"].min()), int(df["year"].max()))
        return cls(df, tuple(window))


def _window_bounds(window) -> tuple[int, int]:
    first, last = int(window[0]), int(window[1])
    if last < first:
        raise ValueError(f"empty window {window}")
    return cmc_from_year_month(first, 1).cmc, cmc_from_year_month(last, 12).cmc


def tabulate(dataset: SurveyDataset, window: tuple[int, int]) -> FertilityTable:
    """Tabulate births and exposure by cluster, calendar year and age group.

    Parameters
    ----------
    dataset : SurveyDataset
    window : (first_year, last_year), inclusive calendar years.

    Returns
    -------
    FertilityTable
        Only cells with positive exposure or births are stored.
    """
    ws, we = _window_bounds(window)
    first = int(window[0])
    n_years = int(window[1]) - first + 1
    women = dataset.women
    clusters = dataset.clusters.reset_index(drop=True)
    c_index = pd.Index(clusters["cluster_id"])
    n_cl = len(clusters)
    n_cells = n_cl * n_years * N_AGE_GROUPS

    if len(women) and ws > int(women["interview_cmc"].max()) - 1:
        logger.warning("window starts after every interview; exposure will be zero")

    dob = women["dob_cmc"].to_numpy(np.int64)
    itw = women["interview_cmc"].to_numpy(np.int64)
    wt = women["weight"].to_numpy(float)
    cl = c_index.get_indexer(women["cluster_id"])

    lo = np.maximum(dob + MIN_AGE_MONTHS, ws)
    hi = np.minimum(np.minimum(itw - 1, we), dob + MAX_AGE_MONTHS - 1)
    n_months = np.maximum(hi - lo + 1, 0)
    total = int(n_months.sum())
    who = np.repeat(np.arange(len(women)), n_months)
    starts = np.repeat(np.cumsum(n_months) - n_months, n_months)
    month = lo[who] + (np.arange(total) - starts)
    age = (month - dob[who] - MIN_AGE_MONTHS) // 60
    yr = cmc_year(month) - first
    key = (cl[who] * n_years + yr) * N_AGE_GROUPS + age
    months = np.bincount(key, minlength=n_cells)
    w_months = np.bincount(key, weights=wt[who], minlength=n_cells)

    b = dataset.births
    pos = pd.Index(women["woman_id"]).get_indexer(b["woman_id"])
    bc = b["birth_cmc"].to_numpy(np.int64)
    b_age = bc - dob[pos]
    in_window = (bc >= ws) & (bc <= we)
    in_age = (b_age >= MIN_AGE_MONTHS) & (b_age < MAX_AGE_MONTHS)
    in_itw = bc == itw[pos]
    keep = in_window & in_age & ~in_itw
    bkey = (cl[pos[keep]] * n_years + (cmc_year(bc[keep]) - first)) * N_AGE_GROUPS + (
        (b_age[keep] - MIN_AGE_MONTHS) // 60
    )
    births = np.bincount(bkey, minlength=n_cells)
    w_births = np.bincount(bkey, weights=wt[pos[keep]], minlength=n_cells)
    diagnostics = {
        "births_in_window": int(in_window.sum()),
        "births_outside_age_range": int((in_window & ~in_age).sum()),
        "births_in_interview_month": int((in_window & in_age & in_itw).sum()),
        "exposure_months": total,
    }

    nz = np.flatnonzero((months > 0) | (births > 0))
    ci, rem = np.divmod(nz, n_years * N_AGE_GROUPS)
    yi, ai = np.divmod(rem, N_AGE_GROUPS)
    cells = pd.DataFrame(
        {
            "cluster_id": clusters["cluster_id"].to_numpy()[ci],
            "admin1_id": clusters["admin1_id"].to_numpy()[ci],
            "admin2_id": clusters["admin2_id"].to_numpy()[ci],
            "urban": clusters["urban"].to_numpy(bool)[ci],
            "stratum_id": clusters["stratum_id"].to_numpy()[ci],
            "year": first + yi,
            "age_group": ai,
            "births": births[nz].astype(np.int64),
            "exposure": months[nz] / 12.0,
            "w_births": w_births[nz],
            "w_exposure": w_months[nz] / 12.0,
        }
    )
    logger.info(
        "tabulated %d cells: %d births, %.1f person-years", len(cells), int(births.sum()), total / 12.0
    )
    return FertilityTable(cells, (first, int(window[1])), diagnostics)


def period_labels(window: tuple[int, int], length: int) -> dict[int, str]:
    """Map each year to a period label, periods aligned to end at the last year.

    A leading remainder forms a shorter first period.
    """
    first, last = int(window[0]), int(window[1])
    if length < 1:
        raise ValueError("period length must be positive")
    out = {}
    for y in range(first, last + 1):
        k = (last - y) // length
        hi = last - k * length
        lo = max(first, hi - length + 1)
        out[y] = str(lo) if lo == hi else f"{lo}-{hi}"
    return out


def ordered_periods(mapping: Mapping[int, str]) -> list[str]:
    seen = []
    for y in sorted(mapping):
        if mapping[y] not in seen:
            seen.append(mapping[y])
    return seen


def aggregate_cells(
    table: FertilityTable,
    level: str = "national",
    urbanicity: str = "both",
    periods: Mapping[int, str] | None = None,
    keep_clusters: bool = False,
) -> pd.DataFrame:
    """Re-key cluster-level cells to (area, period, age group).

    Parameters
    ----------
    level : {"national", "admin1", "admin2"}
        National cells get ``area_id`` 0.
    urbanicity : {"both", "urban", "rural"}
        Filter on cluster urbanicity before summing.
    periods : mapping year -> label, optional
        Defaults to one period per calendar year labelled by the year.
    keep_clusters : bool
        Keep ``cluster_id`` in the key (needed for replicate variance).

    Returns
    -------
    DataFrame with ``area_id, urban, period, age_group[, cluster_id]`` and the
    summed ``births, exposure, w_births, w_exposure``.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    if urbanicity not in URBANICITY:
        raise ValueError(f"unknown urbanicity {urbanicity!r}")
    df = table.cells
    if urbanicity != "both":
        df = df[df["urban"] == (urbanicity == "urban")]
    if periods is None:
        periods = {y: str(y) for y in table.years}
    missing = set(df["year"].unique()) - set(periods)
    if missing:
        raise ValueError(f"years without a period label: {sorted(missing)}")
    df = df.assign(
        area_id=0 if level == "national" else df[f"{level}_id"],
        urban=urbanicity,
        period=df["year"].map(periods),
    )
    keys = ["area_id", "urban", "period", "age_group"] + (["cluster_id"] if keep_clusters else [])
    out = df.groupby(keys, sort=True, as_index=False)[VALUE_COLUMNS].sum()
    return out


def check_areas(area_ids, n_areas: int) -> None:
    bad = [a for a in np.unique(area_ids) if not 1 <= a <= n_areas]
    if bad:
        raise DataError(f"unknown area ids {bad[:5]}")


def write_cells(table: FertilityTable, path, level: str = "admin1") -> Path:
    path = Path(path)
    table.to_csv(path, level)
    return path
