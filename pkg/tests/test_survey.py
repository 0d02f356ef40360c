from collections import deque

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import load_tables, write_tables
from fertsae.survey import (
    AgeGroup,
    CmcDate,
    DanglingKeyError,
    DataError,
    GraphError,
    RegionGraph,
    SchemaError,
    WomanRecord,
    age_group_index,
    cmc_from_year_month,
    load_dataset,
    load_written,
    read_adjacency,
    validate_graph,
    write_adjacency,
    write_dataset,
    year_month_from_cmc,
)

CLUSTERS = [("c1", 1, 1, 1, "s1u"), ("c2", 2, 2, 0, "s2r")]


@pytest.mark.parametrize("ym, cmc", [((1990, 1), 1081), ((2021, 12), 1464), ((1900, 1), 1)])
def test_cmc_examples(ym, cmc):
    assert cmc_from_year_month(*ym).cmc == cmc
    assert year_month_from_cmc(cmc) == ym


@pytest.mark.parametrize("month", [0, 13])
def test_cmc_rejects_bad_month(month):
    with pytest.raises(ValueError):
        cmc_from_year_month(2000, month)


def test_cmc_rejects_early_year():
    with pytest.raises(ValueError):
        cmc_from_year_month(1899, 5)


@given(st.integers(1900, 2100), st.integers(1, 12))
def test_cmc_roundtrip(year, month):
    c = cmc_from_year_month(year, month)
    assert year_month_from_cmc(c) == (year, month)
    assert CmcDate(c.cmc).year == year


def test_age_groups():
    np.testing.assert_array_equal(age_group_index([179, 180, 239, 240, 599, 600]), [-1, 0, 0, 1, 6, -1])
    assert AgeGroup.from_age_months(300).label == "25-29"
    with pytest.raises(ValueError):
        AgeGroup.from_age_months(600)


def test_woman_record_invariants():
    WomanRecord("w", "c", CmcDate(1000), CmcDate(1180), 1.0)
    with pytest.raises(ValueError):
        WomanRecord("w", "c", CmcDate(1000), CmcDate(1179), 1.0)
    with pytest.raises(ValueError):
        WomanRecord("w", "c", CmcDate(1000), CmcDate(1600), 1.0)
    with pytest.raises(ValueError):
        WomanRecord("w", "c", CmcDate(1000), CmcDate(1300), 0.0)


def test_single_woman_without_births(tmp_path):
    ds = load_tables(tmp_path, [("w1", "c1", 1081, 1464, 1.0)], [], CLUSTERS)
    assert ds.counts == {"women": 1, "births": 0, "clusters": 2}


def test_dangling_birth_names_row(tmp_path):
    women = [("w1", "c1", 1081, 1464, 1.0)]
    births = [("w1", 1400), ("w9", 1400)]
    with pytest.raises(DanglingKeyError, match="births.csv:3"):
        load_tables(tmp_path, women, births, CLUSTERS)


def test_dangling_cluster(tmp_path):
    with pytest.raises(DanglingKeyError, match="women.csv:2"):
        load_tables(tmp_path, [("w1", "cX", 1081, 1464, 1.0)], [], CLUSTERS)


def test_invalid_rows_dropped_with_diagnostics(tmp_path):
    women = [
        ("w1", "c1", 1081, 1464, 1.0),
        ("w2", "c1", 1081, 1464, -1.0),  # bad weight
        ("w3", "c2", 1400, 1464, 1.0),  # aged 64 months
    ]
    births = [("w1", 1100), ("w1", 1400), ("w1", 1470), ("w2", 1400)]
    ds = load_tables(tmp_path, women, births, CLUSTERS)
    assert list(ds.women["woman_id"]) == ["w1"]
    assert list(ds.births["birth_cmc"]) == [1400]
    messages = " ".join(str(d) for d in ds.diagnostics)
    assert "weight" in messages and "120 months" in messages and "after interview" in messages


def test_strict_mode_raises(tmp_path):
    p = write_tables(tmp_path, [("w1", "c1", 1081, 1464, 0.0)], [], CLUSTERS)
    with pytest.raises(DataError, match="women.csv:2"):
        load_dataset(p["women"], p["births"], p["clusters"], [p["graph"]], strict=True)


def test_schema_error_on_header(tmp_path):
    p = write_tables(tmp_path, [("w1", "c1", 1081, 1464, 1.0)], [], CLUSTERS)
    p["births"].write_text("woman,birth\n")
    with pytest.raises(SchemaError):
        load_dataset(p["women"], p["births"], p["clusters"], [p["graph"]])


def test_schema_error_on_non_integer(tmp_path):
    p = write_tables(tmp_path, [("w1", "c1", 1081.5, 1464, 1.0)], [], CLUSTERS)
    with pytest.raises(SchemaError, match="women.csv:2"):
        load_dataset(p["women"], p["births"], p["clusters"], [p["graph"]])


def test_conflicting_nesting_rejected(tmp_path):
    clusters = [("c1", 1, 1, 1, "a"), ("c2", 1, 1, 1, "a"), ("c3", 2, 1, 1, "b")]
    ds = load_tables(tmp_path, [("w1", "c1", 1081, 1464, 1.0)], [], clusters)
    assert list(ds.clusters["cluster_id"]) == ["c1", "c2"]
    assert ds.admin2_to_admin1() == {1: 1}


def test_load_order_insensitive(tmp_path, rng):
    from conftest import random_tables

    women, births, clusters = random_tables(rng, 40)
    a = load_tables(tmp_path / "a", women, births, clusters)
    perm = rng.permutation(len(women))
    bperm = rng.permutation(len(births))
    b = load_tables(
        tmp_path / "b", [women[i] for i in perm], [births[i] for i in bperm], clusters[::-1]
    )
    pd.testing.assert_frame_equal(a.women, b.women)
    pd.testing.assert_frame_equal(a.births, b.births)
    pd.testing.assert_frame_equal(a.clusters, b.clusters)


def test_dataset_roundtrip(tmp_path, rng):
    from conftest import random_tables

    women, births, clusters = random_tables(rng, 30)
    a = load_tables(tmp_path / "a", women, births, clusters)
    b = load_written(write_dataset(a, tmp_path / "b"))
    pd.testing.assert_frame_equal(a.women, b.women)
    pd.testing.assert_frame_equal(a.births, b.births)


def test_validate_path_graph(path3):
    rep = validate_graph(path3)
    assert rep.symmetric and rep.n_components == 1 and rep.isolated == []


def test_validate_asymmetric():
    g = RegionGraph(3, ((1,), (), (1,)))
    rep = validate_graph(g)
    assert not rep.symmetric
    assert (1, 2) in rep.asymmetric_pairs


def test_validate_isolated_and_components():
    g = RegionGraph.from_edges(4, [(0, 1)])
    rep = validate_graph(g)
    assert rep.isolated == [3, 4]
    assert rep.n_components == 3


def _bfs_components(n, nb):
    seen = [False] * n
    out = 0
    for s in range(n):
        if seen[s]:
            continue
        out += 1
        q = deque([s])
        seen[s] = True
        while q:
            v = q.popleft()
            for w in nb[v]:
                if not seen[w]:
                    seen[w] = True
                    q.append(w)
    return out


def test_graph23_connected_by_bfs(graph23):
    assert graph23.n == 23
    assert _bfs_components(graph23.n, graph23.neighbors) == 1
    assert validate_graph(graph23).n_components == 1


def test_adjacency_roundtrip(tmp_path, graph23):
    write_adjacency(graph23, tmp_path / "g.adj")
    assert read_adjacency(tmp_path / "g.adj") == graph23


@pytest.mark.parametrize(
    "text, msg",
    [
        ("2\n1 1 2\n", "without a line"),
        ("2\n1 2 2\n2 1 1\n", "count"),
        ("2\n1 1 3\n2 1 1\n", "out of range"),
        ("x\n", "not an integer"),
    ],
)
def test_adjacency_parse_errors(tmp_path, text, msg):
    p = tmp_path / "g.adj"
    p.write_text(text)
    with pytest.raises(SchemaError, match=msg):
        read_adjacency(p)


def test_asymmetric_adjacency_is_load_error(tmp_path):
    p = write_tables(tmp_path, [("w1", "c1", 1081, 1464, 1.0)], [], CLUSTERS, adjacency="2\n1 1 2\n2 0\n")
    with pytest.raises(GraphError, match="not symmetric"):
        load_dataset(p["women"], p["births"], p["clusters"], [p["graph"]])
