"""Posterior draws of rates keyed by (area, period, age group) and their summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .direct import PER, TFR_AGE
from .survey import N_AGE_GROUPS

SUMMARY_COLUMNS = [
    "model",
    "level",
    "area_id",
    "period",
    "age_group",
    "median",
    "mean",
    "q025",
    "q05",
    "q95",
    "q975",
]
QUANTILES = (0.025, 0.05, 0.95, 0.975)
KEY_COLUMNS = ["area_id", "period", "age_group"]


@dataclass
class SmoothedEstimates:
    """Natural-scale posterior draws (draws x keys).

    ``transform`` names the modelling scale: ``"log"`` for rates, ``"logit"``
    for proportions.  ASFR keys (``age_group`` 0..6) are per 1,000 women-years;
    TFR keys (``age_group`` -1) are per woman.  ``keys`` may carry a ``flags``
    column.
    """

    model: str
    level: str
    keys: pd.DataFrame
    draws: np.ndarray
    transform: str = "log"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keys = self.keys.reset_index(drop=True)
        self.keys["period"] = self.keys["period"].astype(str)
        if "flags" not in self.keys:
            self.keys["flags"] = ""
        self.draws = np.asarray(self.draws, float)
        if self.draws.ndim != 2 or self.draws.shape[1] != len(self.keys):
            raise ValueError("draws must be (n_draws, n_keys)")
        if self.transform not in ("log", "logit"):
            raise ValueError(f"unknown transform {self.transform!r}")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def _unit(self) -> np.ndarray:
        return np.where(self.keys["age_group"].to_numpy() == TFR_AGE, 1.0, PER)

    def latent_draws(self) -> np.ndarray:
        """Draws on the modelling scale (log rate per woman-year, or logit)."""
        if self.transform == "logit":
            return logit(self.draws)
        return np.log(self.draws / self._unit())

    def column(self, area_id, period, age_group=TFR_AGE) -> np.ndarray:
        k = self.keys
        hit = np.flatnonzero(
            (k["area_id"] == area_id) & (k["period"] == str(period)) & (k["age_group"] == age_group)
        )
        if hit.size != 1:
            raise KeyError((area_id, period, age_group))
        return self.draws[:, hit[0]]

    def summary(self, scales=("natural", "latent")) -> pd.DataFrame:
        """One row per key and scale in the smoothed-estimates schema, plus ``scale`` and ``flags``."""
        parts = []
        for scale in scales:
            d = self.draws if scale == "natural" else self.latent_draws()
            q = np.quantile(d, QUANTILES, axis=0) if self.n_draws else np.full((4, d.shape[1]), np.nan)
            frame = pd.DataFrame(
                {
                    "model": self.model,
                    "level": self.level,
                    "area_id": self.keys["area_id"].to_numpy(),
                    "period": self.keys["period"].to_numpy(),
                    "age_group": self.keys["age_group"].to_numpy(),
                    "median": np.median(d, axis=0),
                    "mean": d.mean(axis=0),
                    "q025": q[0],
                    "q05": q[1],
                    "q95": q[2],
                    "q975": q[3],
                    "scale": scale if scale == "natural" else self.transform,
                    "flags": self.keys["flags"].to_numpy(),
                }
            )
            parts.append(frame)
        return pd.concat(parts, ignore_index=True)

    def subset(self, mask) -> "SmoothedEstimates":
        mask = np.asarray(mask, bool)
        return SmoothedEstimates(self.model, self.level, self.keys[mask], self.draws[:, mask], self.transform, self.info)


def combine(parts: list[SmoothedEstimates], model: str | None = None) -> SmoothedEstimates:
    """Stack keys of estimates that share draw count and transform."""
    if not parts:
        raise ValueError("nothing to combine")
    n = {p.n_draws for p in parts}
    if len(n) != 1:
        raise ValueError("draw counts differ")
    keys = pd.concat([p.keys for p in parts], ignore_index=True)
    return SmoothedEstimates(
        model or parts[0].model, parts[0].level, keys, np.hstack([p.draws for p in parts]), parts[0].transform
    )


def tfr_from_asfr(est: SmoothedEstimates) -> SmoothedEstimates:
    """Per-draw TFR = 5 x sum of the seven ASFRs / 1000 for every (area, period)."""
    k = est.keys
    asfr = k["age_group"] >= 0
    groups = k[asfr].groupby(["area_id", "period"], sort=True)
    keys, cols = [], []
    for (area, period), g in groups:
        if len(g) != N_AGE_GROUPS or set(g["age_group"]) != set(range(N_AGE_GROUPS)):
            raise ValueError(f"area {area} period {period} lacks some age groups")
        keys.append((area, period, TFR_AGE, ";".join(sorted({f for f in g["flags"] if f}))))
        cols.append(g.index.to_numpy())
    draws = np.column_stack([5.0 * est.draws[:, c].sum(axis=1) / PER for c in cols]) if cols else np.zeros((est.n_draws, 0))
    frame = pd.DataFrame(keys, columns=KEY_COLUMNS + ["flags"])
    return SmoothedEstimates(est.model, est.level, frame, draws, "log", est.info)


def aggregate_periods(est: SmoothedEstimates, periods: dict, weights: dict | None = None) -> SmoothedEstimates:
    """Per-draw weighted average over the years in each period.

    ``est`` must be keyed by calendar year (``period`` holds the year).
    ``weights`` maps year -> weight and must sum to 1 within each period;
    equal weights are used when it is omitted.
    """
    k = est.keys
    years = k["period"].astype(int).to_numpy()
    labels = np.array([periods[y] for y in years], dtype=object)
    if weights is None:
        w = np.ones(len(k))
        for lab in set(labels):
            members = {y for y in years[labels == lab]}
            w[labels == lab] = 1.0 / len(members)
    else:
        w = np.array([float(weights[y]) for y in years])
        if np.any(w < 0):
            raise ValueError("period weights must be non-negative")
        for lab in set(labels):
            total = sum(float(weights[y]) for y in {y for y in years[labels == lab]})
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights for period {lab} sum to {total}, not 1")
    frame = k.assign(_label=labels)
    keys, cols = [], []
    for (area, lab, age), g in frame.groupby(["area_id", "_label", "age_group"], sort=True):
        keys.append((area, lab, age, ";".join(sorted({f for f in g["flags"] if f}))))
        idx = g.index.to_numpy()
        cols.append(est.draws[:, idx] @ w[idx])
    draws = np.column_stack(cols) if cols else np.zeros((est.n_draws, 0))
    return SmoothedEstimates(est.model, est.level, pd.DataFrame(keys, columns=KEY_COLUMNS + ["flags"]), draws, est.transform, est.info)


def aggregate_areas(est: SmoothedEstimates, weights: dict, area_id: int = 0, level: str = "national") -> SmoothedEstimates:
    """Per-draw weighted average over areas (e.g. to a national value).

    ``weights`` maps area id -> non-negative weight; weights are normalised.
    """
    k = est.keys
    w = np.array([float(weights.get(a, 0.0)) for a in k["area_id"]])
    if np.any(w < 0):
        raise ValueError("area weights must be non-negative")
    keys, cols = [], []
    for (period, age), g in k.groupby(["period", "age_group"], sort=True):
        idx = g.index.to_numpy()
        tot = w[idx].sum()
        if not tot > 0:
            raise ValueError(f"zero total weight for period {period}, age group {age}")
        keys.append((area_id, period, age, ";".join(sorted({f for f in g["flags"] if f}))))
        cols.append(est.draws[:, idx] @ (w[idx] / tot))
    return SmoothedEstimates(
        est.model, level, pd.DataFrame(keys, columns=KEY_COLUMNS + ["flags"]), np.column_stack(cols), est.transform
    )


def write_summary(parts, path) -> None:
    if isinstance(parts, SmoothedEstimates):
        parts = [parts]
    frames = [p.summary() if isinstance(p, SmoothedEstimates) else p for p in parts]
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.10g")


def read_summary(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"period": str, "flags": str})
    df["flags"] = df["flags"].fillna("")
    return df


def proportion_draws(latent: np.ndarray) -> np.ndarray:
    return expit(latent)
