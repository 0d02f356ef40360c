import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fertsae.survey import RegionGraph, load_dataset, read_adjacency

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(Path(__file__).parent))


def write_tables(tmp_path, women, births, clusters, adjacency="3\n1 1 2\n2 2 1 3\n3 1 2\n"):
    """Write survey CSVs and an adjacency file; return the path tuple for ``load_dataset``."""
    tmp_path = Path(tmp_path)
    tmp_path.mkdir(parents=True, exist_ok=True)
    paths = {
        "women": tmp_path / "women.csv",
        "births": tmp_path / "births.csv",
        "clusters": tmp_path / "clusters.csv",
        "graph": tmp_path / "admin1.adj",
    }
    pd.DataFrame(women, columns=["woman_id", "cluster_id", "dob_cmc", "interview_cmc", "weight"]).to_csv(
        paths["women"], index=False
    )
    pd.DataFrame(births, columns=["woman_id", "birth_cmc"]).to_csv(paths["births"], index=False)
    pd.DataFrame(clusters, columns=["cluster_id", "admin1_id", "admin2_id", "urban", "stratum_id"]).to_csv(
        paths["clusters"], index=False
    )
    paths["graph"].write_text(adjacency)
    return paths


def load_tables(tmp_path, women, births, clusters, **kw):
    p = write_tables(tmp_path, women, births, clusters, **kw)
    return load_dataset(p["women"], p["births"], p["clusters"], [p["graph"]])


def random_tables(rng, n_women, n_clusters=5, window=(2010, 2014)):
    """Random microdata for oracle comparisons (arbitrary but valid records)."""
    clusters = [(f"c{k}", 1 + k % 3, 1 + k % 3, k % 2, f"s{1 + k % 3}_{k % 2}") for k in range(n_clusters)]
    women, births = [], []
    ws = (window[0] - 1900) * 12 + 1
    we = (window[1] - 1900) * 12 + 12
    for j in range(n_women):
        itw = int(rng.integers(ws, we + 18))
        dob = int(itw - rng.integers(180, 600))
        w = float(rng.uniform(0.2, 3.0))
        women.append((f"w{j}", f"c{rng.integers(n_clusters)}", dob, itw, w))
        for _ in range(int(rng.poisson(1.5))):
            births.append((f"w{j}", int(rng.integers(dob + 120, itw + 1))))
    return women, births, clusters


@pytest.fixture
def path3():
    return RegionGraph.from_edges(3, [(0, 1), (1, 2)])


@pytest.fixture
def graph23():
    return read_adjacency(DATA / "admin1_23.adj")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def dataset_from_rows(women, births, clusters, graph=None):
    """In-memory dataset from valid rows, bypassing CSV parsing."""
    from fertsae.survey import SurveyDataset

    w = pd.DataFrame(women, columns=["woman_id", "cluster_id", "dob_cmc", "interview_cmc", "weight"])
    b = pd.DataFrame(births, columns=["woman_id", "birth_cmc"])
    c = pd.DataFrame(clusters, columns=["cluster_id", "admin1_id", "admin2_id", "urban", "stratum_id"])
    c["urban"] = c["urban"].astype(bool)
    b["birth_cmc"] = b["birth_cmc"].astype(np.int64)
    graph = graph or RegionGraph.from_edges(3, [(0, 1), (1, 2)])
    return SurveyDataset(w, b, c, graph)


def cells_as_dicts(table):
    """Cell table as oracle-shaped dictionaries keyed by (cluster, year, age)."""
    c = table.cells
    key = list(zip(c["cluster_id"], c["year"], c["age_group"]))
    return (
        dict(zip(key, np.rint(c["exposure"] * 12).astype(int))),
        dict(zip(key, c["w_exposure"] * 12)),
        dict(zip(key, c["births"])),
        dict(zip(key, c["w_births"])),
    )


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 14):
        if n in ACCEPTANCE_RESULTS:
            ok, detail = ACCEPTANCE_RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
