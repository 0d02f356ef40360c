"""Survey microdata: date codes, record types, region graphs and loading.

Dates are century-month codes (CMC), ``(year - 1900) * 12 + month``.  The
loader reads three CSV tables (women, births, clusters) plus one adjacency
file per administrative level and cross-references them.  Rows that break a
record invariant are dropped and reported; references to identifiers that
never existed are hard errors.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

logger = logging.getLogger(__name__)

N_AGE_GROUPS = 7
AGE_LABELS = ("15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49")
MIN_AGE_MONTHS = 180
MAX_AGE_MONTHS = 600  # exclusive upper bound of the 15-49 range (age 50)
MAX_RESPONDENT_AGE_MONTHS = 600
MIN_BIRTH_AGE_MONTHS = 120

WOMEN_COLUMNS = ("woman_id", "cluster_id", "dob_cmc", "interview_cmc", "weight")
BIRTHS_COLUMNS = ("woman_id", "birth_cmc")
CLUSTERS_COLUMNS = ("cluster_id", "admin1_id", "admin2_id", "urban", "stratum_id")


class DataError(ValueError):
    """Input data violate a schema or cross-reference rule."""


class SchemaError(DataError):
    pass


class DanglingKeyError(DataError):
    pass


class GraphError(DataError):
    pass


# --------------------------------------------------------------------------
# dates and age groups


@dataclass(frozen=True, order=True)
class CmcDate:
    cmc: int

    def __post_init__(self):
        if int(self.cmc) != self.cmc or self.cmc < 1:
            raise ValueError(f"CMC must be a positive integer, got {self.cmc!r}")

    @property
    def year(self) -> int:
        return 1900 + (self.cmc - 1) // 12

    @property
    def month(self) -> int:
        return (self.cmc - 1) % 12 + 1

    def to_year_month(self) -> tuple[int, int]:
        return self.year, self.month


def cmc_from_year_month(year: int, month: int) -> CmcDate:
    if not 1 <= month <= 12:
        raise ValueError(f"month must be in 1..12, got {month}")
    if year < 1900:
        raise ValueError(f"year must be >= 1900, got {year}")
    return CmcDate((year - 1900) * 12 + month)


def year_month_from_cmc(cmc: int | CmcDate) -> tuple[int, int]:
    if isinstance(cmc, CmcDate):
        return cmc.to_year_month()
    return CmcDate(int(cmc)).to_year_month()


def cmc_year(cmc):
    """Calendar year of CMC values (vectorised)."""
    return 1900 + (np.asarray(cmc) - 1) // 12


def age_group_index(age_months):
    """Five-year age group index for ages in completed months.

    Returns -1 where the age falls outside [180, 600).
    """
    m = np.asarray(age_months)
    idx = (m - MIN_AGE_MONTHS) // 60
    return np.where((m >= MIN_AGE_MONTHS) & (m < MAX_AGE_MONTHS), idx, -1)


@dataclass(frozen=True)
class AgeGroup:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < N_AGE_GROUPS:
            raise ValueError(f"age group index must be in 0..6, got {self.index}")

    @property
    def label(self) -> str:
        return AGE_LABELS[self.index]

    @classmethod
    def from_age_months(cls, months: int) -> "AgeGroup":
        idx = int(age_group_index(months))
        if idx < 0:
            raise ValueError(f"age {months} months is outside 15-49")
        return cls(idx)


# --------------------------------------------------------------------------
# single-record types (used for validation of individual rows and in tests)


@dataclass(frozen=True)
class WomanRecord:
    woman_id: str
    cluster_id: str
    dob: CmcDate
    interview: CmcDate
    weight: float

    def __post_init__(self):
        age = self.interview.cmc - self.dob.cmc
        if not MIN_AGE_MONTHS <= age < MAX_RESPONDENT_AGE_MONTHS:
            raise ValueError(f"respondent age {age} months outside [180, 600)")
        if not self.weight > 0:
            raise ValueError("weight must be positive")


@dataclass(frozen=True)
class BirthRecord:
    woman_id: str
    birth: CmcDate


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    admin1_id: int
    admin2_id: int
    urban: bool
    stratum_id: str


# --------------------------------------------------------------------------
# region graphs


@dataclass
class RegionGraph:
    """Undirected neighbourhood structure over ``n`` regions (0-based)."""

    n: int
    neighbors: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.neighbors = tuple(tuple(int(j) for j in nb) for nb in self.neighbors)
        if len(self.neighbors) != self.n:
            raise GraphError(f"expected {self.n} neighbour lists, got {len(self.neighbors)}")
        for i, nb in enumerate(self.neighbors):
            for j in nb:
                if not 0 <= j < self.n:
                    raise GraphError(f"region {i + 1} lists out-of-range neighbour {j + 1}")
        if not self.labels:
            self.labels = tuple(str(i + 1) for i in range(self.n))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], labels=()) -> "RegionGraph":
        """Symmetric graph from 0-based undirected edges."""
        nb = [set() for _ in range(n)]
        for i, j in edges:
            nb[i].add(j)
            nb[j].add(i)
        return cls(n, tuple(tuple(sorted(s)) for s in nb), tuple(labels))

    def adjacency(self) -> sp.csr_matrix:
        rows = [i for i, nb in enumerate(self.neighbors) for _ in nb]
        cols = [j for nb in self.neighbors for j in nb]
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    def components(self) -> list[np.ndarray]:
        """Connected components (edges treated as undirected), sorted."""
        und = [set(nb) for nb in self.neighbors]
        for i, nb in enumerate(self.neighbors):
            for j in nb:
                und[j].add(i)
        seen = np.zeros(self.n, dtype=bool)
        comps = []
        for s in range(self.n):
            if seen[s]:
                continue
            queue = deque([s])
            seen[s] = True
            comp = []
            while queue:
                v = queue.popleft()
                comp.append(v)
                for w in und[v]:
                    if not seen[w]:
                        seen[w] = True
                        queue.append(w)
            comps.append(np.array(sorted(comp)))
        return comps

    def subgraph(self, keep: Sequence[int]) -> "RegionGraph":
        keep = list(keep)
        pos = {v: k for k, v in enumerate(keep)}
        nb = [tuple(pos[j] for j in self.neighbors[v] if j in pos) for v in keep]
        return RegionGraph(len(keep), tuple(nb), tuple(self.labels[v] for v in keep))

    def permute(self, perm: Sequence[int]) -> "RegionGraph":
        """Relabel so that new region ``k`` is old region ``perm[k]``."""
        inv = np.empty(self.n, dtype=int)
        inv[np.asarray(perm)] = np.arange(self.n)
        nb = [tuple(sorted(int(inv[j]) for j in self.neighbors[old])) for old in perm]
        return RegionGraph(self.n, tuple(nb), tuple(self.labels[old] for old in perm))


@dataclass
class GraphReport:
    symmetric: bool
    asymmetric_pairs: list[tuple[int, int]]
    self_loops: list[int]
    isolated: list[int]
    components: list[list[int]]

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def ok(self) -> bool:
        return self.symmetric and not self.self_loops


def validate_graph(graph: RegionGraph) -> GraphReport:
    """Report asymmetric pairs, self-loops, isolated nodes and components.

    Region indices in the report are 1-based, as in the adjacency file.
    """
    nbsets = [set(nb) for nb in graph.neighbors]
    asym = sorted(
        (i + 1, j + 1) for i, nb in enumerate(nbsets) for j in nb if i != j and i not in nbsets[j]
    )
    loops = sorted(i + 1 for i, nb in enumerate(nbsets) if i in nb)
    isolated = []
    for i, nb in enumerate(nbsets):
        others = nb - {i}
        incoming = any(i in nbsets[j] for j in range(graph.n) if j != i)
        if not others and not incoming:
            isolated.append(i + 1)
    comps = [[int(v) + 1 for v in c] for c in graph.components()]
    return GraphReport(not asym, asym, loops, isolated, comps)


def read_adjacency(path, labels=()) -> RegionGraph:
    """Parse an adjacency file: ``n`` then one ``i k j1 .. jk`` line per region."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty adjacency file")
    try:
        n = int(lines[0][0])
    except ValueError as exc:
        raise SchemaError(f"{path}:1: region count is not an integer") from exc
    nb: list[tuple[int, ...] | None] = [None] * n
    for lineno, tok in enumerate(lines[1:], start=2):
        try:
            vals = [int(t) for t in tok]
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: non-integer token") from exc
        if len(vals) < 2 or len(vals) != vals[1] + 2:
            raise SchemaError(f"{path}:{lineno}: neighbour count does not match entries")
        i = vals[0]
        if not 1 <= i <= n:
            raise SchemaError(f"{path}:{lineno}: region index {i} out of range 1..{n}")
        if nb[i - 1] is not None:
            raise SchemaError(f"{path}:{lineno}: region {i} listed twice")
        for j in vals[2:]:
            if not 1 <= j <= n:
                raise SchemaError(f"{path}:{lineno}: neighbour {j} out of range 1..{n}")
        nb[i - 1] = tuple(j - 1 for j in vals[2:])
    missing = [i + 1 for i, v in enumerate(nb) if v is None]
    if missing:
        raise SchemaError(f"{path}: regions without a line: {missing[:10]}")
    return RegionGraph(n, tuple(nb), tuple(labels))


def write_adjacency(graph: RegionGraph, path) -> None:
    out = [str(graph.n)]
    for i, nb in enumerate(graph.neighbors):
        out.append(" ".join(str(v) for v in [i + 1, len(nb), *[j + 1 for j in nb]]))
    Path(path).write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# dataset


@dataclass
class Diagnostic:
    source: str
    line: int
    message: str

    def __str__(self):
        return f"{self.source}:{self.line}: {self.message}"


@dataclass
class SurveyDataset:
    """Validated, cross-referenced survey microdata.

    ``women``, ``births`` and ``clusters`` are DataFrames with the columns of
    the corresponding CSV schemas (identifiers as strings, region ids as
    1-based integers, ``urban`` as bool), sorted by identifier.
    """

    women: pd.DataFrame
    births: pd.DataFrame
    clusters: pd.DataFrame
    admin1_graph: RegionGraph
    admin2_graph: RegionGraph | None = None
    covariates: dict[str, pd.DataFrame] = field(default_factory=dict)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "women": len(self.women),
            "births": len(self.births),
            "clusters": len(self.clusters),
        }

    def graph(self, level: str) -> RegionGraph:
        if level == "admin1":
            return self.admin1_graph
        if level == "admin2":
            if self.admin2_graph is None:
                raise DataError("dataset has no admin2 graph")
            return self.admin2_graph
        raise ValueError(f"no graph for level {level!r}")

    def admin2_to_admin1(self) -> dict[int, int]:
        c = self.clusters.drop_duplicates("admin2_id")
        return dict(zip(c["admin2_id"].astype(int), c["admin1_id"].astype(int)))

    def woman_records(self) -> list[WomanRecord]:
        return [
            WomanRecord(r.woman_id, r.cluster_id, CmcDate(r.dob_cmc), CmcDate(r.interview_cmc), r.weight)
            for r in self.women.itertuples(index=False)
        ]

    def summary(self) -> str:
        c = self.counts
        return f"{c['women']} women, {c['births']} births, {c['clusters']} clusters"


def _read_csv(path, columns, dtypes, name) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: missing header") from exc
    if tuple(df.columns) != tuple(columns):
        raise SchemaError(f"{name}: expected columns {','.join(columns)}, got {','.join(df.columns)}")
    df["_line"] = np.arange(len(df)) + 2
    for col, kind in dtypes.items():
        conv = pd.to_numeric(df[col], errors="coerce")
        bad = conv.isna() | (df[col].str.strip() == "")
        if kind == "int":
            bad |= conv.notna() & (conv != np.floor(conv))
        if bad.any():
            ln = int(df.loc[bad, "_line"].iloc[0])
            raise SchemaError(f"{name}:{ln}: column {col} is not a valid {kind}")
        df[col] = conv.astype(np.int64 if kind == "int" else float)
    for col in columns:
        if col not in dtypes:
            df[col] = df[col].astype(str).str.strip()
    return df


def _reject(df, mask, name, message, diags, strict):
    if not mask.any():
        return df
    for ln in df.loc[mask, "_line"]:
        d = Diagnostic(name, int(ln), message)
        if strict:
            raise DataError(str(d))
        diags.append(d)
    return df.loc[~mask]


def _check_unique(df, col, name):
    dup = df[col].duplicated(keep=False)
    if dup.any():
        ln = int(df.loc[dup, "_line"].iloc[0])
        raise DataError(f"{name}:{ln}: duplicate {col} {df.loc[dup, col].iloc[0]!r}")


def _majority_map(keys: pd.Series, values: pd.Series) -> dict:
    """Order-insensitive majority mapping; ties resolve to the smallest value."""
    counts: dict = {}
    for k, v in zip(keys, values):
        counts.setdefault(k, Counter())[v] += 1
    return {k: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for k, c in counts.items()}


def load_dataset(
    women_path,
    births_path,
    clusters_path,
    graph_paths,
    covariate_paths: dict | None = None,
    strict: bool = False,
) -> SurveyDataset:
    """Load and cross-reference survey CSVs and adjacency files.

    ``graph_paths`` is ``(admin1_path,)`` or ``(admin1_path, admin2_path)``.
    Invariant-violating rows are dropped with diagnostics unless ``strict``,
    in which case the first violation raises :class:`DataError`.
    """
    if isinstance(graph_paths, (str, Path)):
        graph_paths = (graph_paths,)
    graph_paths = tuple(graph_paths)
    graphs = []
    for gp in graph_paths:
        g = read_adjacency(gp)
        rep = validate_graph(g)
        if not rep.symmetric:
            i, j = rep.asymmetric_pairs[0]
            raise GraphError(f"{gp}: adjacency not symmetric ({i} lists {j} but not vice versa)")
        if rep.self_loops:
            raise GraphError(f"{gp}: self-loop at region {rep.self_loops[0]}")
        graphs.append(g)
    admin1_graph = graphs[0]
    admin2_graph = graphs[1] if len(graphs) > 1 else None

    diags: list[Diagnostic] = []
    clusters = _read_csv(
        clusters_path, CLUSTERS_COLUMNS, {"admin1_id": "int", "admin2_id": "int", "urban": "int"}, "clusters.csv"
    )
    women = _read_csv(
        women_path, WOMEN_COLUMNS, {"dob_cmc": "int", "interview_cmc": "int", "weight": "float"}, "women.csv"
    )
    births = _read_csv(births_path, BIRTHS_COLUMNS, {"birth_cmc": "int"}, "births.csv")
    _check_unique(clusters, "cluster_id", "clusters.csv")
    _check_unique(women, "woman_id", "women.csv")

    # clusters
    c_all = set(clusters["cluster_id"])
    clusters = _reject(clusters, ~clusters["urban"].isin([0, 1]), "clusters.csv", "urban must be 0 or 1", diags, strict)
    n1 = admin1_graph.n
    clusters = _reject(
        clusters, ~clusters["admin1_id"].between(1, n1), "clusters.csv", f"admin1_id outside 1..{n1}", diags, strict
    )
    if admin2_graph is not None:
        n2 = admin2_graph.n
        clusters = _reject(
            clusters, ~clusters["admin2_id"].between(1, n2), "clusters.csv", f"admin2_id outside 1..{n2}", diags, strict
        )
    nest = _majority_map(clusters["admin2_id"], clusters["admin1_id"])
    clusters = _reject(
        clusters,
        clusters["admin1_id"] != clusters["admin2_id"].map(nest),
        "clusters.csv",
        "admin2 region nested in conflicting admin1 regions",
        diags,
        strict,
    )
    strat = _majority_map(clusters["stratum_id"], list(zip(clusters["admin1_id"], clusters["urban"])))
    clusters = _reject(
        clusters,
        pd.Series(list(zip(clusters["admin1_id"], clusters["urban"])), index=clusters.index)
        != clusters["stratum_id"].map(strat),
        "clusters.csv",
        "stratum does not correspond to a single (admin1, urbanicity) pair",
        diags,
        strict,
    )
    clusters["urban"] = clusters["urban"].astype(bool)

    # women
    dangling = ~women["cluster_id"].isin(c_all)
    if dangling.any():
        ln = int(women.loc[dangling, "_line"].iloc[0])
        raise DanglingKeyError(f"women.csv:{ln}: unknown cluster_id {women.loc[dangling, 'cluster_id'].iloc[0]!r}")
    w_all = set(women["woman_id"])
    women = _reject(
        women,
        ~women["cluster_id"].isin(set(clusters["cluster_id"])),
        "women.csv",
        "cluster was rejected",
        diags,
        strict,
    )
    women = _reject(women, ~(women["weight"] > 0), "women.csv", "weight must be positive", diags, strict)
    women = _reject(women, women["dob_cmc"] < 1, "women.csv", "dob_cmc must be >= 1", diags, strict)
    age = women["interview_cmc"] - women["dob_cmc"]
    women = _reject(
        women,
        (age < MIN_AGE_MONTHS) | (age >= MAX_RESPONDENT_AGE_MONTHS),
        "women.csv",
        "respondent age at interview outside [180, 600) months",
        diags,
        strict,
    )

    # births
    dangling = ~births["woman_id"].isin(w_all)
    if dangling.any():
        ln = int(births.loc[dangling, "_line"].iloc[0])
        raise DanglingKeyError(f"births.csv:{ln}: unknown woman_id {births.loc[dangling, 'woman_id'].iloc[0]!r}")
    births = _reject(
        births, ~births["woman_id"].isin(set(women["woman_id"])), "births.csv", "mother was rejected", diags, strict
    )
    mom = women.set_index("woman_id")
    dob = births["woman_id"].map(mom["dob_cmc"])
    itw = births["woman_id"].map(mom["interview_cmc"])
    births = _reject(
        births,
        births["birth_cmc"] < dob + MIN_BIRTH_AGE_MONTHS,
        "births.csv",
        "birth before mother's age of 120 months",
        diags,
        strict,
    )
    itw = births["woman_id"].map(mom["interview_cmc"])
    births = _reject(births, births["birth_cmc"] > itw, "births.csv", "birth after interview", diags, strict)

    for d in diags:
        logger.warning("rejected row %s", d)

    clusters = clusters.drop(columns="_line").sort_values("cluster_id", kind="mergesort").reset_index(drop=True)
    women = women.drop(columns="_line").sort_values("woman_id", kind="mergesort").reset_index(drop=True)
    births = (
        births.drop(columns="_line").sort_values(["woman_id", "birth_cmc"], kind="mergesort").reset_index(drop=True)
    )
    covariates = {}
    for level, path in (covariate_paths or {}).items():
        covariates[level] = read_covariates(path)
    ds = SurveyDataset(women, births, clusters, admin1_graph, admin2_graph, covariates, diags)
    logger.info("loaded %s", ds.summary())
    return ds


def read_covariates(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    if df.columns[0] != "area_id":
        raise SchemaError(f"{path}: first column must be area_id")
    return df.sort_values("area_id").reset_index(drop=True)


def write_dataset(ds: SurveyDataset, out_dir) -> dict[str, Path]:
    """Write the dataset in the loader's schemas; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "women": out / "women.csv",
        "births": out / "births.csv",
        "clusters": out / "clusters.csv",
        "admin1_graph": out / "admin1.adj",
    }
    ds.women.loc[:, list(WOMEN_COLUMNS)].to_csv(paths["women"], index=False, float_format="%.10g")
    ds.births.loc[:, list(BIRTHS_COLUMNS)].to_csv(paths["births"], index=False)
    cl = ds.clusters.loc[:, list(CLUSTERS_COLUMNS)].copy()
    cl["urban"] = cl["urban"].astype(int)
    cl.to_csv(paths["clusters"], index=False)
    write_adjacency(ds.admin1_graph, paths["admin1_graph"])
    if ds.admin2_graph is not None:
        paths["admin2_graph"] = out / "admin2.adj"
        write_adjacency(ds.admin2_graph, paths["admin2_graph"])
    for level, cov in ds.covariates.items():
        paths[f"covariates_{level}"] = out / f"covariates_{level}.csv"
        cov.to_csv(paths[f"covariates_{level}"], index=False, float_format="%.10g")
    return paths


def load_written(paths: dict, strict: bool = False) -> SurveyDataset:
    """Reload a dataset from the path dictionary returned by :func:`write_dataset`."""
    graphs = [paths["admin1_graph"]] + ([paths["admin2_graph"]] if "admin2_graph" in paths else [])
    covs = {k.split("_", 1)[1]: v for k, v in paths.items() if k.startswith("covariates_")}
    return load_dataset(paths["women"], paths["births"], paths["clusters"], graphs, covs, strict=strict)
