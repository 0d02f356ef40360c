"""Command-line pipelines.

Settings come from an INI file (``--config``) with sections ``[data]``,
``[run]``, ``[model]``, ``[sampler]``, ``[simulate]`` and ``[cv]``; command
line flags override it.  Exit codes: 0 success, 2 invalid input, 3 sampler
or convergence failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .area_models import ModelInputError, aggregate_tfr_periods, area_input, fit_fh_asfr, fit_fh_covariate, fit_fh_tfr
from .direct import FLAG_NO_DATA, TFR_AGE, direct_estimates, write_estimates
from .estimates import SmoothedEstimates, aggregate_periods, tfr_from_asfr, write_summary
from .exposure import period_labels, tabulate
from .gmrf.sampler import ConvergenceError, SamplerSettings
from .survey import DataError, GraphError, SchemaError, load_dataset, read_adjacency, write_dataset
from .unit_models import (
    GridLayer,
    aggregate_ur,
    exceedance_probability,
    fit_stratified,
    fit_unit_model,
    read_urban_fractions,
    unit_input,
    urban_fraction_table,
    variance_decomposition,
)
from .validation.cv import MODELS, SCHEMES, plan_from_data, run_cv, write_report
from .validation.simulate import InfeasibleConfig, SimConfig, simulate_survey, write_truth

logger = logging.getLogger("fertsae")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3

INPUT_ERRORS = (
    DataError,
    SchemaError,
    GraphError,
    ModelInputError,
    InfeasibleConfig,
    FileNotFoundError,
    KeyError,
    ValueError,
    configparser.Error,
)


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration


def _parse_window(text: str) -> tuple[int, int]:
    parts = str(text).replace("-", ":").split(":")
    if len(parts) != 2:
        raise ConfigError(f"window must look like 2013:2021, got {text!r}")
    lo, hi = int(parts[0]), int(parts[1])
    if hi < lo:
        raise ConfigError("window end precedes its start")
    return lo, hi


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


class RunConfig:
    """Merged INI settings and command-line overrides."""

    def __init__(self, args: argparse.Namespace):
        self.cp = configparser.ConfigParser()
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise FileNotFoundError(path)
            self.cp.read(path)
        self.args = args
        self.base = Path(args.config).parent if args.config else Path(".")

    def get(self, section: str, key: str, default=None, arg: str | None = None):
        v = getattr(self.args, arg or key, None)
        if v is not None:
            return v
        if self.cp.has_option(section, key):
            return self.cp.get(section, key)
        return default

    def path(self, section: str, key: str, default=None, arg: str | None = None):
        v = self.get(section, key, default, arg)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() or getattr(self.args, arg or key, None) is not None else self.base / p

    @property
    def seed(self) -> int:
        v = self.get("run", "seed")
        if v is None:
            raise ConfigError("a seed is required (--seed or [run] seed)")
        return int(v)

    @property
    def out(self) -> Path:
        out = Path(self.get("run", "out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        return out

    @property
    def level(self) -> str:
        return str(self.get("run", "level", "admin1"))

    @property
    def threads(self) -> int:
        return int(self.get("run", "threads", 1))

    def sampler(self) -> SamplerSettings:
        return SamplerSettings(
            n_draws=int(self.get("sampler", "draws", 1000)),
            burn_in=int(self.get("sampler", "burn_in", 500)),
            thin=int(self.get("sampler", "thin", 1)),
            chains=int(self.get("sampler", "chains", 2)),
            seed=self.seed,
            threads=self.threads,
        )

    def dataset(self):
        d = self.path("data", "dataset", arg="data")
        names = {
            "women": "women.csv",
            "births": "births.csv",
            "clusters": "clusters.csv",
            "admin1_graph": "admin1.adj",
            "admin2_graph": "admin2.adj",
        }
        paths = {}
        for key, fname in names.items():
            p = self.path("data", key)
            if p is None and d is not None:
                p = d / fname
            paths[key] = p
        for key in ("women", "births", "clusters", "admin1_graph"):
            if paths[key] is None:
                raise ConfigError(f"no path for {key} (set --data or [data] {key})")
        graphs = [paths["admin1_graph"]]
        if paths["admin2_graph"] is not None and paths["admin2_graph"].exists():
            graphs.append(paths["admin2_graph"])
        covs = {}
        for level in ("admin1", "admin2"):
            p = self.path("data", f"covariates_{level}")
            if p is None and d is not None and (d / f"covariates_{level}.csv").exists():
                p = d / f"covariates_{level}.csv"
            if p is not None:
                covs[level] = p
        return load_dataset(paths["women"], paths["births"], paths["clusters"], graphs, covs)

    def window(self, ds) -> tuple[int, int]:
        w = self.get("run", "window")
        if w is not None:
            return _parse_window(w)
        last = int(ds.women["interview_cmc"].max() - 1) // 12 + 1900
        return last - 8, last

    def survey_year(self, ds) -> int:
        v = self.get("run", "survey_year")
        if v is not None:
            return int(v)
        return int(np.median((ds.women["interview_cmc"].to_numpy() - 1) // 12 + 1900))

    def period_length(self) -> int:
        return int(self.get("run", "period_length", 1))


# ----------------------------------------------------------------------
# helpers


def _covariates(cfg: RunConfig, ds, level: str):
    if not _flag(cfg.get("model", "use_covariates", False)):
        return False, None, None
    cov = ds.covariates.get(level)
    if cov is None:
        raise ConfigError(f"use_covariates set but no covariates for {level}")
    n = ds.graph(level).n
    cov = cov.set_index("area_id").reindex(range(1, n + 1))
    if cov.isna().any().any():
        raise ConfigError(f"covariates for {level} miss some areas")
    return True, cov.to_numpy(float), list(cov.columns)


def write_draws(est: SmoothedEstimates, path) -> None:
    """Wide draws file: one row per key, one ``draw_k`` column per draw."""
    d = pd.DataFrame(est.draws.T, columns=[f"draw_{k}" for k in range(est.n_draws)])
    out = pd.concat([est.keys[["area_id", "period", "age_group", "flags"]].reset_index(drop=True), d], axis=1)
    out.insert(0, "level", est.level)
    out.insert(0, "model", est.model)
    out.to_csv(path, index=False, float_format="%.10g")


def read_draws(path) -> SmoothedEstimates:
    df = pd.read_csv(path, dtype={"period": str, "flags": str})
    df["flags"] = df["flags"].fillna("")
    cols = [c for c in df.columns if c.startswith("draw_")]
    keys = df[["area_id", "period", "age_group", "flags"]]
    return SmoothedEstimates(str(df["model"].iloc[0]), str(df["level"].iloc[0]), keys, df[cols].to_numpy().T)


def decomposition_table(est: SmoothedEstimates) -> pd.DataFrame:
    """TFR by age group: segment height 5 x ASFR / 1000 from posterior medians."""
    k = est.keys
    asfr = (k["age_group"] >= 0).to_numpy()
    med = np.median(est.draws[:, asfr], axis=0)
    out = k.loc[asfr, ["area_id", "period", "age_group"]].reset_index(drop=True)
    out.insert(0, "model", est.model)
    out["asfr_median"] = med
    out["segment"] = 5.0 * med / 1000.0
    return out


def _write_samples(samples, path) -> None:
    samples.to_long().to_csv(path, index=False, float_format="%.10g")


# ----------------------------------------------------------------------
# subcommands


def _simulated_covariate_direct(sim, seed: int, n_eff: float = 200.0) -> pd.DataFrame:
    """Noisy direct proportions of the true area covariates, binomial-style variances."""
    rng = np.random.default_rng([seed, 1])
    rows = []
    cov = sim.truth.covariates
    for var in [c for c in cov.columns if c != "area_id"]:
        p = cov[var].to_numpy(float)
        phat = np.clip(rng.binomial(int(n_eff), p) / n_eff, 0.0, 1.0)
        for a, ph in zip(cov["area_id"], phat):
            rows.append((int(a), var, ph, max(ph * (1 - ph), 0.25 / n_eff) / n_eff))
    return pd.DataFrame(rows, columns=["area_id", "variable", "p", "variance"])


def cmd_simulate(cfg: RunConfig) -> int:
    fields = {f.name: f for f in dataclasses.fields(SimConfig)}
    kw = {}
    if cfg.cp.has_section("simulate"):
        for key, value in cfg.cp.items("simulate"):
            if key not in fields or key in ("graph", "rural_schedule", "urban_schedule"):
                raise ConfigError(f"unknown simulate setting {key!r}")
            default = fields[key].default
            if isinstance(default, tuple):
                kw[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(default, bool):
                kw[key] = _flag(value)
            elif isinstance(default, int) or default is None:
                kw[key] = int(value)
            else:
                kw[key] = float(value)
    for arg, key in (("areas", "n_areas"), ("clusters", "n_clusters"), ("displacement", "displacement"),
                     ("urban_oversampling", "urban_oversampling"), ("survey_year", "survey_year")):
        v = getattr(cfg.args, arg, None)
        if v is not None:
            kw[key] = type(fields[key].default)(v)
    kw["seed"] = cfg.seed
    sim = simulate_survey(SimConfig(**kw))
    out = cfg.out
    write_dataset(sim.dataset, out)
    write_truth(sim.truth, out / "sim_truth.csv")
    r = pd.DataFrame(
        {
            "area_id": np.repeat(np.arange(1, sim.config.n_areas + 1), 7),
            "period": "*",
            "age_group": np.tile(np.arange(7), sim.config.n_areas),
            "r": np.repeat(sim.truth.urban_fraction, 7),
        }
    )
    r.to_csv(out / "urban_fractions.csv", index=False, float_format="%.10g")
    _simulated_covariate_direct(sim, cfg.seed).to_csv(out / "covariate_direct.csv", index=False, float_format="%.10g")
    logger.info("wrote %s to %s", sim.dataset.summary(), out)
    print(f"simulated {sim.dataset.summary()} -> {out}")
    return EXIT_OK


def cmd_direct(cfg: RunConfig) -> int:
    ds = cfg.dataset()
    window = cfg.window(ds)
    table = tabulate(ds, window)
    periods = period_labels(window, cfg.period_length())
    level = cfg.level
    est = direct_estimates(table, level, periods)
    out = cfg.out
    write_estimates(est, out / "direct_estimates.csv")
    long = [direct_estimates(table, level, periods, u, include_tfr=False) for u in ("urban", "rural")]
    long = pd.concat(long, ignore_index=True)
    # complete grid: cells nobody was exposed in appear as no-data rows
    areas = sorted(long["area_id"].unique())
    grid = pd.MultiIndex.from_product(
        [areas, list(dict.fromkeys(periods[y] for y in sorted(periods))), range(7), ["urban", "rural"]],
        names=["area_id", "period", "age_group", "urban"],
    )
    long = long.set_index(["area_id", "period", "age_group", "urban"]).reindex(grid).reset_index()
    empty = long["point"].isna()
    long.loc[empty, "flags"] = FLAG_NO_DATA
    long["level"] = [f"{level}/{u}" for u in long["urban"]]
    long = long[["level", "area_id", "period", "age_group", "urban", "point", "log_point", "variance", "log_variance", "flags"]]
    long.to_csv(out / "direct_long.csv", index=False, float_format="%.12g")
    print(f"direct estimates: {len(est)} keys -> {out / 'direct_estimates.csv'}")
    return EXIT_OK


def _reference_period(cfg: RunConfig, window) -> tuple[dict[int, str], str]:
    ref = cfg.get("model", "reference", arg="reference")
    lo, hi = _parse_window(ref) if ref else window
    label = f"{lo}-{hi}" if lo != hi else str(lo)
    return {y: (label if lo <= y <= hi else f"other:{y}") for y in range(window[0], window[1] + 1)}, label


def cmd_fit_area_asfr(cfg: RunConfig) -> int:
    ds = cfg.dataset()
    level = cfg.level
    window = cfg.window(ds)
    table = tabulate(ds, window)
    periods, label = _reference_period(cfg, window)
    direct = direct_estimates(table, level, periods, include_tfr=False)
    use_cov, x, names = _covariates(cfg, ds, level)
    g = ds.graph(level)
    inp = area_input(direct, g.n, [label], level, x, names)
    fit = fit_fh_asfr(inp, g, use_cov, cfg.sampler())
    tfr = tfr_from_asfr(fit.estimates)
    out = cfg.out
    write_summary([fit.estimates, tfr], out / "smoothed_estimates.csv")
    _write_samples(fit.samples, out / "samples.csv")
    decomposition_table(fit.estimates).to_csv(out / "decomposition.csv", index=False, float_format="%.10g")
    print(f"area-level ASFR model: {len(fit.estimates.keys)} keys -> {out}")
    return EXIT_OK


def cmd_fit_area_tfr(cfg: RunConfig) -> int:
    ds = cfg.dataset()
    level = cfg.level
    window = cfg.window(ds)
    table = tabulate(ds, window)
    direct = direct_estimates(table, level, None, include_asfr=False)
    use_cov, x, names = _covariates(cfg, ds, level)
    g = ds.graph(level)
    years = [str(y) for y in range(window[0], window[1] + 1)]
    sy = cfg.survey_year(ds)
    inp = area_input(direct, g.n, years, level, x, names, sy)
    cutoff = _flag(cfg.get("model", "cutoff_adjustment", True))
    fit = fit_fh_tfr(inp, g, sy, use_cov, cfg.sampler(), cutoff)
    parts = [fit.estimates]
    length = cfg.period_length()
    if length > 1:
        parts.append(aggregate_tfr_periods(fit, period_labels(window, length)))
    out = cfg.out
    write_summary(parts, out / "smoothed_estimates.csv")
    _write_samples(fit.samples, out / "samples.csv")
    print(f"area-level TFR model: {len(fit.estimates.keys)} yearly keys -> {out}")
    return EXIT_OK


def _fractions(cfg: RunConfig):
    grid = cfg.path("data", "grid", arg="grid")
    if grid is not None:
        return urban_fraction_table(GridLayer.from_csv(grid))
    p = cfg.path("data", "urban_fractions", arg="fractions")
    if p is None:
        d = cfg.path("data", "dataset", arg="data")
        if d is not None and (d / "urban_fractions.csv").exists():
            p = d / "urban_fractions.csv"
    if p is None:
        raise ConfigError("stratified fits need urban fractions (--fractions or --grid)")
    return read_urban_fractions(p)


def _with_periods(est: SmoothedEstimates, window, length) -> list[SmoothedEstimates]:
    tfr = tfr_from_asfr(est)
    parts = [est, tfr]
    if length > 1:
        per = period_labels(window, length)
        parts += [aggregate_periods(est, per), aggregate_periods(tfr, per)]
    return parts


def cmd_fit_unit(cfg: RunConfig) -> int:
    ds = cfg.dataset()
    level = cfg.level
    window = cfg.window(ds)
    table = tabulate(ds, window)
    g = ds.graph(level)
    sy = cfg.survey_year(ds)
    use_cov, x, names = _covariates(cfg, ds, level)
    cutoff = _flag(cfg.get("model", "cutoff_adjustment", True))
    settings = cfg.sampler()
    length = cfg.period_length()
    out = cfg.out
    threshold = float(cfg.get("model", "threshold", 2.0))
    if _flag(cfg.get("model", "stratified", False)):
        r = _fractions(cfg)
        ui = unit_input(table, g, level, "urban", sy, x, names)
        ri = unit_input(table, g, level, "rural", sy, x, names)
        fit = fit_stratified(ui, ri, use_cov, settings, threads=cfg.threads, cutoff_adjustment=cutoff)
        combined = aggregate_ur(fit.urban, fit.rural, r, seed=cfg.seed)
        write_summary(_with_periods(combined, window, length), out / "smoothed_estimates.csv")
        write_draws(combined, out / "draws_combined.csv")
        decomposition_table(combined).to_csv(out / "decomposition.csv", index=False, float_format="%.10g")
        for name, f in (("urban", fit.urban), ("rural", fit.rural)):
            if f is None:
                continue
            write_summary(_with_periods(f.estimates, window, length), out / f"smoothed_estimates_{name}.csv")
            write_draws(f.estimates, out / f"draws_{name}.csv")
            _write_samples(f.samples, out / f"samples_{name}.csv")
            variance_decomposition(f).frame().to_csv(out / f"variance_decomposition_{name}.csv", index=False)
        if fit.urban is not None and fit.rural is not None:
            ut, rt = tfr_from_asfr(fit.urban.estimates), tfr_from_asfr(fit.rural.estimates)
            if ut.n_draws == rt.n_draws:
                exceedance_probability(ut, rt, threshold).to_csv(out / "exceedance.csv", index=False)
        print(f"stratified unit-level model -> {out}")
        return EXIT_OK
    inp = unit_input(table, g, level, "both", sy, x, names)
    fit = fit_unit_model(inp, use_cov, settings, cutoff)
    write_summary(_with_periods(fit.estimates, window, length), out / "smoothed_estimates.csv")
    write_draws(fit.estimates, out / "draws.csv")
    _write_samples(fit.samples, out / "samples.csv")
    decomposition_table(fit.estimates).to_csv(out / "decomposition.csv", index=False, float_format="%.10g")
    variance_decomposition(fit).frame().to_csv(out / "variance_decomposition.csv", index=False)
    print(f"unit-level model: {len(fit.estimates.keys)} keys -> {out}")
    return EXIT_OK


def cmd_fit_covariates(cfg: RunConfig) -> int:
    """Smooth direct covariate proportions given as ``area_id,variable,p,variance``."""
    path = cfg.path("data", "covariate_direct", arg="input")
    if path is None:
        raise ConfigError("fit-covariates needs --input (area_id,variable,p,variance)")
    df = pd.read_csv(path)
    need = {"area_id", "variable", "p", "variance"}
    if not need <= set(df.columns):
        raise ConfigError(f"{path}: expected columns {sorted(need)}")
    gpath = cfg.path("data", "admin1_graph" if cfg.level == "admin1" else "admin2_graph", arg="graph")
    if gpath is None:
        d = cfg.path("data", "dataset", arg="data")
        if d is None:
            raise ConfigError("fit-covariates needs a graph (--graph or --data)")
        gpath = d / f"{cfg.level}.adj"
    g = read_adjacency(gpath)
    parts, smoothed = [], {"area_id": np.arange(1, g.n + 1)}
    for k, (var, sub) in enumerate(df.groupby("variable", sort=True)):
        frame = pd.DataFrame(
            {"area_id": sub["area_id"], "period": "", "age_group": TFR_AGE, "point": sub["p"], "variance": sub["variance"]}
        )
        inp = area_input(frame, g.n, [""], cfg.level, transform="logit")
        fit = fit_fh_covariate(inp, g, dataclasses.replace(cfg.sampler(), seed=cfg.seed + k), model_name=f"fh_covariate[{var}]")
        parts.append(fit.estimates)
        smoothed[var] = np.median(fit.estimates.draws, axis=0)
    out = cfg.out
    write_summary(parts, out / "smoothed_estimates.csv")
    pd.DataFrame(smoothed).to_csv(out / f"covariates_{cfg.level}.csv", index=False, float_format="%.10g")
    print(f"smoothed {len(parts)} covariates -> {out}")
    return EXIT_OK


def cmd_aggregate_ur(cfg: RunConfig) -> int:
    up = cfg.path("aggregate", "urban", arg="urban")
    rp = cfg.path("aggregate", "rural", arg="rural")
    if up is None or rp is None:
        raise ConfigError("aggregate-ur needs --urban and --rural draw files")
    u, r = read_draws(up), read_draws(rp)
    fr = _fractions(cfg)
    combined = aggregate_ur(u, r, fr, seed=cfg.seed)
    out = cfg.out
    write_summary([combined, tfr_from_asfr(combined)], out / "smoothed_estimates.csv")
    write_draws(combined, out / "draws_combined.csv")
    threshold = float(cfg.get("model", "threshold", 2.0))
    ut, rt = tfr_from_asfr(u), tfr_from_asfr(r)
    if ut.n_draws == rt.n_draws:
        exceedance_probability(ut, rt, threshold).to_csv(out / "exceedance.csv", index=False)
    print(f"combined {len(combined.keys)} keys -> {out}")
    return EXIT_OK


def cmd_cv(cfg: RunConfig) -> int:
    ds = cfg.dataset()
    window = cfg.window(ds)
    table = tabulate(ds, window)
    g = ds.graph("admin1")
    sy = cfg.survey_year(ds)
    schemes = str(cfg.get("cv", "schemes", ",".join(SCHEMES))).split(",")
    models = str(cfg.get("cv", "models", ",".join(MODELS))).split(",")
    length = int(cfg.get("cv", "period_length", 3))
    results = []
    for scheme in schemes:
        scheme = scheme.strip()
        plan = plan_from_data(scheme, table, g.n, length)
        for model in models:
            model = model.strip()
            x = names = None
            if model.endswith("_cov"):
                cov = ds.covariates.get("admin1")
                if cov is None:
                    raise ConfigError("covariate models need admin1 covariates")
                cov = cov.set_index("area_id").reindex(range(1, g.n + 1))
                x, names = cov.to_numpy(float), list(cov.columns)
            results.append(run_cv(table, plan, model, g, sy, cfg.sampler(), x, names, seed=cfg.seed))
    out = cfg.out
    write_report(results, out / "cv_report.csv")
    keys = [r.keys.assign(model=r.model, scheme=r.scheme) for r in results]
    pd.concat(keys, ignore_index=True).to_csv(out / "cv_keys.csv", index=False, float_format="%.10g")
    for r in results:
        if r.report is not None:
            print(f"{r.model:>9s} {r.scheme:>4s}: {r.n_folds} folds, {r.n_failed} failed, "
                  f"rmse {r.report.rmse:.3f}, 90% coverage {r.report.coverage.get(0.9, np.nan):.3f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "direct": cmd_direct,
    "fit-area-asfr": cmd_fit_area_asfr,
    "fit-area-tfr": cmd_fit_area_tfr,
    "fit-unit": cmd_fit_unit,
    "fit-covariates": cmd_fit_covariates,
    "aggregate-ur": cmd_aggregate_ur,
    "cv": cmd_cv,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="random seed (required here or in [run])")
    common.add_argument("--level", choices=["national", "admin1", "admin2"])
    common.add_argument("--window", help="first:last calendar year")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker cap")
    common.add_argument("--data", help="dataset directory with women.csv, births.csv, clusters.csv, admin1.adj")
    common.add_argument("--period-length", dest="period_length", type=int, help="years per reporting period")
    common.add_argument("--survey-year", dest="survey_year", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--use-covariates", dest="use_covariates", action="store_const", const=True)
    model.add_argument("--no-cutoff", dest="cutoff_adjustment", action="store_const", const=False)
    model.add_argument("--chains", type=int)
    model.add_argument("--draws", type=int)
    model.add_argument("--burn-in", dest="burn_in", type=int)

    p = argparse.ArgumentParser(prog="fertsae", description="Subnational fertility estimation from birth histories")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a survey with known rates")
    s.add_argument("--areas", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--displacement", type=float)
    s.add_argument("--urban-oversampling", dest="urban_oversampling", type=float)
    sub.add_parser("direct", parents=[common], help="direct ASFR/TFR with jackknife variances")
    a = sub.add_parser("fit-area-asfr", parents=[common, model], help="area-level ASFR model")
    a.add_argument("--reference", help="reference years first:last (default: whole window)")
    sub.add_parser("fit-area-tfr", parents=[common, model], help="area-level TFR model")
    u = sub.add_parser("fit-unit", parents=[common, model], help="unit-level negative-binomial model")
    u.add_argument("--stratified", action="store_const", const=True)
    u.add_argument("--fractions", help="urban_fractions.csv")
    u.add_argument("--grid", help="grid.csv for urban fractions")
    u.add_argument("--threshold", type=float, help="urban/rural TFR gap for exceedance")
    c = sub.add_parser("fit-covariates", parents=[common, model], help="smooth covariate proportions")
    c.add_argument("--input", help="area_id,variable,p,variance")
    c.add_argument("--graph", help="adjacency file")
    g = sub.add_parser("aggregate-ur", parents=[common], help="combine urban and rural draws")
    g.add_argument("--urban", required=False)
    g.add_argument("--rural", required=False)
    g.add_argument("--fractions")
    g.add_argument("--grid")
    g.add_argument("--threshold", type=float)
    v = sub.add_parser("cv", parents=[common, model], help="leave-one-combination-out cross-validation")
    v.add_argument("--schemes", help="comma list of tfr,asfr")
    v.add_argument("--models", help="comma list of unit,unit_cov,area,area_cov")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig(args)
        # every run must be reproducible, so the seed is checked up front
        logger.info("seed %d", cfg.seed)
        return COMMANDS[args.command](cfg)
    except ConvergenceError as exc:
        print(f"fertsae: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except INPUT_ERRORS as exc:
        print(f"fertsae: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
