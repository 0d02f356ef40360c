"""Scores comparing held-out predictions with direct estimates on the log scale.

``pred`` are posterior-median log rates and ``obs`` the log direct estimates.
Bias and absolute bias are scaled by 100, relative biases are percentages,
RMSE is unscaled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

LEVELS = (0.5, 0.8, 0.9, 0.95)


def _pair(pred, obs):
    p = np.asarray(pred, float)
    o = np.asarray(obs, float)
    if p.shape != o.shape:
        raise ValueError("pred and obs differ in shape")
    if p.size == 0:
        raise ValueError("no held-out keys")
    return p, o


def bias(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(100.0 * np.mean(p - o))


def absolute_bias(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(100.0 * np.mean(np.abs(p - o)))


def relative_bias(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(100.0 * np.mean((p - o) / o))


def absolute_relative_bias(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(100.0 * np.mean(np.abs((p - o) / o)))


def rmse(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.sqrt(np.mean((p - o) ** 2)))


def interval_score(l, u, obs, alpha: float, mode: str = "printed") -> float:
    """Mean interval score over keys.

    ``mode="printed"`` uses the penalty coefficient ``alpha / 2``;
    ``mode="literature"`` uses ``2 / alpha``.  Observations exactly on a
    bound carry no penalty.
    """
    l = np.atleast_1d(np.asarray(l, float))
    u = np.atleast_1d(np.asarray(u, float))
    o = np.atleast_1d(np.asarray(obs, float))
    if np.any(l > u):
        raise ValueError("lower bound exceeds upper bound")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if mode == "printed":
        c = alpha / 2.0
    elif mode == "literature":
        c = 2.0 / alpha
    else:
        raise ValueError(f"unknown mode {mode!r}")
    s = (u - l) + c * (l - o) * (l > o) - c * (u - o) * (u < o)
    return float(np.mean(s))


def predictive_interval(draws, variance: float, alpha: float, rng) -> tuple[float, float]:
    """Empirical ``alpha/2`` and ``1 - alpha/2`` quantiles of draws plus N(0, variance) noise.

    One noise value is drawn per posterior draw.
    """
    d = np.asarray(draws, float)
    if not np.isfinite(variance) or variance < 0:
        raise ValueError("missing or negative design variance")
    noisy = d + rng.normal(0.0, np.sqrt(variance), d.shape)
    lo, hi = np.quantile(noisy, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def coverage(draws, obs: float, variance: float, level: float = 0.9, rng=None) -> bool:
    """Whether the direct estimate falls in the noisy predictive interval."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = predictive_interval(draws, variance, 1.0 - level, rng)
    return bool(lo <= obs <= hi)


@dataclass
class ScoreReport:
    """Scores for one model and scheme over all held-out keys."""

    bias: float
    absolute_bias: float
    relative_bias: float
    absolute_relative_bias: float
    rmse: float
    coverage: dict[float, float] = field(default_factory=dict)
    interval_score: dict[float, float] = field(default_factory=dict)
    n_keys: int = 0

    def rows(self) -> list[tuple[str, float, float]]:
        out = [
            ("bias", np.nan, self.bias),
            ("absolute_bias", np.nan, self.absolute_bias),
            ("relative_bias", np.nan, self.relative_bias),
            ("absolute_relative_bias", np.nan, self.absolute_relative_bias),
            ("rmse", np.nan, self.rmse),
        ]
        out += [("coverage", lvl, v) for lvl, v in self.coverage.items()]
        out += [("interval_score", lvl, v) for lvl, v in self.interval_score.items()]
        return out


def score(
    draws: list[np.ndarray],
    obs,
    variance,
    levels=LEVELS,
    seed: int = 0,
    is_mode: str = "printed",
) -> ScoreReport:
    """Score held-out keys given posterior draws of each key's log rate."""
    obs = np.asarray(obs, float)
    variance = np.asarray(variance, float)
    if not (len(draws) == obs.size == variance.size):
        raise ValueError("draws, obs and variance differ in length")
    pred = np.array([np.median(d) for d in draws])
    rng = np.random.default_rng(seed)
    cov, isc = {}, {}
    for lvl in levels:
        a = 1.0 - lvl
        bounds = np.array([predictive_interval(d, v, a, rng) for d, v in zip(draws, variance)])
        cov[lvl] = float(np.mean((bounds[:, 0] <= obs) & (obs <= bounds[:, 1])))
        isc[lvl] = interval_score(bounds[:, 0], bounds[:, 1], obs, a, is_mode)
    return ScoreReport(
        bias(pred, obs),
        absolute_bias(pred, obs),
        relative_bias(pred, obs),
        absolute_relative_bias(pred, obs),
        rmse(pred, obs),
        cov,
        isc,
        int(obs.size),
    )


def report_frame(model: str, scheme: str, rep: ScoreReport, n_folds: int, n_failed: int) -> pd.DataFrame:
    rows = rep.rows()
    return pd.DataFrame(
        {
            "model": model,
            "scheme": scheme,
            "metric": [r[0] for r in rows],
            "level": [r[1] for r in rows],
            "value": [r[2] for r in rows],
            "n_folds": n_folds,
            "n_failed": n_failed,
        }
    )
