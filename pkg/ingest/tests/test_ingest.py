import json
import os
import tarfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graph_ingest import (DATASETS, IngestError, IngestManifest, ingest,
                          make_synthetic)
from graph_ingest.ingest import (_CitationSource, _NpzSource,
                                 _undirected_edges, content_checksum,
                                 parse_citation_tables, parse_sparse_npz,
                                 row_normalize)
from linkleak.graphs import load_canonical, pair_distribution


# ---------------------------------------------------------------------------
# fabricated native sources

def write_citation_tables(dirpath: Path, name: str = "cora") -> None:
    """Five papers, two of them linked twice in opposite directions, one
    self-citation, one reference to an id with no content row."""
    content = "\n".join([
        "p10 1 0 1 0 beta",
        "p2 0 1 0 0 alpha",
        "p3 0 0 0 0 alpha",
        "p4 1 1 1 1 beta",
        "p5 0 0 1 0 gamma",
    ]) + "\n"
    cites = "\n".join([
        "p10 p2",
        "p2 p10",
        "p3 p3",
        "p4 p5",
        "p4 p5",
        "p9 p2",
        "p5 p4",
    ]) + "\n"
    (dirpath / f"{name}.content").write_text(content)
    (dirpath / f"{name}.cites").write_text(cites)


def write_citation_archive(archive: Path, srcdir: Path,
                           name: str = "cora") -> None:
    with tarfile.open(archive, "w:gz") as tf:
        tf.add(srcdir / f"{name}.content", arcname=f"{name}/{name}.content")
        tf.add(srcdir / f"{name}.cites", arcname=f"{name}/{name}.cites")


def write_npz_bundle(path: Path) -> None:
    """Four nodes; links 0-1 and 2-3 stored in both directions plus a
    1-1 self-loop; one node has no attributes at all."""
    feats_indptr = np.array([0, 2, 2, 4, 7])
    feats_indices = np.array([0, 2, 0, 1, 0, 1, 2])
    feats_data = np.array([2.5, 1.0, 1.0, 4.0, 0.5, 0.5, 3.0])
    np.savez(path,
             adj_data=np.ones(5),
             adj_indices=np.array([1, 0, 1, 3, 2]),
             adj_indptr=np.array([0, 1, 3, 4, 5]),
             adj_shape=np.array([4, 4]),
             attr_data=feats_data,
             attr_indices=feats_indices,
             attr_indptr=feats_indptr,
             attr_shape=np.array([4, 3]),
             labels=np.array([0, 1, 0, 1]))


# ---------------------------------------------------------------------------
# edge folding

@settings(max_examples=100, deadline=None)
@given(st.data())
def test_undirected_edges_fold_and_dedup(data):
    n = data.draw(st.integers(min_value=1, max_value=30))
    pairs = data.draw(st.lists(
        st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
        max_size=80))
    edges, directed = _undirected_edges(pairs, n)
    assert directed == len(pairs)
    expected = sorted({(min(u, v), max(u, v)) for u, v in pairs if u != v})
    assert [tuple(e) for e in edges.tolist()] == expected
    assert all(u < v for u, v in edges.tolist())


def test_undirected_edges_reject_out_of_range():
    with pytest.raises(IngestError, match="outside the table"):
        _undirected_edges([(0, 5)], 3)


# ---------------------------------------------------------------------------
# synthetic generator

def test_synthetic_disjoint_classes_give_pure_intra_edges(tmp_path):
    out = tmp_path / "sbm"
    manifest = make_synthetic(n=90, classes=3, p_intra=0.2, p_inter=0.0,
                              d=6, seed=7, out_dir=out)
    g = load_canonical(out)
    assert g.num_nodes == manifest.num_nodes == 90
    assert g.num_edges == manifest.num_edges > 0
    assert np.all(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]])
    stats = pair_distribution(g, seed=0)
    assert stats.r_linked_intra == 1.0
    assert stats.r_linked_inter == 0.0


def test_synthetic_is_deterministic_per_seed(tmp_path):
    a = make_synthetic(120, 3, 0.1, 0.02, 8, 5, tmp_path / "a")
    b = make_synthetic(120, 3, 0.1, 0.02, 8, 5, tmp_path / "b")
    c = make_synthetic(120, 3, 0.1, 0.02, 8, 6, tmp_path / "c")
    assert a.checksum == b.checksum
    assert a == IngestManifest(**{**a.__dict__})
    assert c.checksum != a.checksum
    for fname in ("meta.json", "features.csv", "labels.csv", "edges.csv"):
        assert (tmp_path / "a" / fname).read_bytes() == \
            (tmp_path / "b" / fname).read_bytes()


def test_synthetic_edge_counts_match_block_probabilities(tmp_path):
    n, c, p_intra, p_inter = 300, 3, 0.08, 0.01
    make_synthetic(n, c, p_intra, p_inter, d=8, seed=11,
                   out_dir=tmp_path / "sbm")
    g = load_canonical(tmp_path / "sbm")
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    per_class = n // c
    intra_pairs = c * per_class * (per_class - 1) // 2
    inter_pairs = n * (n - 1) // 2 - intra_pairs
    for count, n_pairs, p in ((int(same.sum()), intra_pairs, p_intra),
                              (int((~same).sum()), inter_pairs, p_inter)):
        sigma = np.sqrt(n_pairs * p * (1 - p))
        assert abs(count - n_pairs * p) <= 3 * sigma


@pytest.mark.parametrize("p_intra,p_inter", [
    (0.1, 0.1), (0.1, 0.2), (0.0, 0.0), (1.2, 0.1), (0.5, -0.01),
])
def test_synthetic_rejects_bad_probabilities(tmp_path, p_intra, p_inter):
    with pytest.raises(ValueError):
        make_synthetic(30, 3, p_intra, p_inter, 4, 0, tmp_path / "x")


@pytest.mark.parametrize("n,classes,d", [(5, 1, 4), (2, 3, 4), (30, 3, 0)])
def test_synthetic_rejects_bad_shape(tmp_path, n, classes, d):
    with pytest.raises(ValueError):
        make_synthetic(n, classes, 0.2, 0.0, d, 0, tmp_path / "x")


def test_manifest_checksum_covers_canonical_files(tmp_path):
    out = tmp_path / "sbm"
    manifest = make_synthetic(40, 2, 0.3, 0.0, 4, 1, out_dir=out)
    assert manifest.checksum == content_checksum(out)
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == {
        "dataset": "synthetic", "source": manifest.source,
        "num_nodes": 40, "num_features": 4, "num_classes": 2,
        "num_edges": manifest.num_edges,
        "num_directed_edges": manifest.num_directed_edges,
        "checksum": manifest.checksum,
    }
    # undirected sampling emits each pair once, so the counts coincide
    assert manifest.num_directed_edges == manifest.num_edges


# ---------------------------------------------------------------------------
# citation tables

def test_citation_tables_parse_and_fold(tmp_path):
    write_citation_tables(tmp_path)
    out = tmp_path / "out"
    manifest = ingest("cora", out, source=tmp_path)
    assert manifest.num_nodes == 5
    assert manifest.num_features == 4
    assert manifest.num_classes == 3
    # p10-p2 twice, p3 self-loop, p4-p5 three times; dangling line dropped
    assert manifest.num_directed_edges == 6
    assert manifest.num_edges == 2

    g = load_canonical(out)
    assert g.edges.tolist() == [[0, 1], [3, 4]]
    # class names map to indices in sorted order: alpha, beta, gamma
    assert g.labels.tolist() == [1, 0, 0, 1, 2]
    sums = g.features.sum(axis=1)
    assert sums[2] == 0.0
    np.testing.assert_allclose(np.delete(sums, 2), 1.0)
    np.testing.assert_allclose(g.features[0], [0.5, 0.0, 0.5, 0.0])


def test_citation_archive_source_matches_directory_source(tmp_path):
    write_citation_tables(tmp_path)
    archive = tmp_path / "cora.tgz"
    write_citation_archive(archive, tmp_path)
    from_dir = ingest("cora", tmp_path / "out_dir", source=tmp_path)
    from_tgz = ingest("cora", tmp_path / "out_tgz", source=archive)
    assert from_tgz.checksum == from_dir.checksum
    assert from_tgz.source == str(archive)


def test_citation_parser_rejects_malformed_tables(tmp_path):
    cases = {
        "short_row": ("a 1 label\nb 0\n", "a b\n", "id, features, label"),
        "mixed_width": ("a 1 0 x\nb 1 y\n", "a b\n", "mixed feature"),
        "bad_number": ("a 1 q x\nb 1 0 y\n", "a b\n", "non-numeric"),
        "dup_id": ("a 1 0 x\na 1 1 y\n", "a a\n", "repeats"),
        "empty": ("", "a b\n", "no rows"),
        "bad_cite": ("a 1 0 x\nb 0 1 y\n", "a b c\n", "malformed"),
    }
    for tag, (content, cites, match) in cases.items():
        d = tmp_path / tag
        d.mkdir()
        (d / "c.content").write_text(content)
        (d / "c.cites").write_text(cites)
        with pytest.raises(IngestError, match=match):
            parse_citation_tables(d / "c.content", d / "c.cites")


def test_citation_source_errors(tmp_path):
    with pytest.raises(IngestError, match="does not exist"):
        ingest("cora", tmp_path / "out", source=tmp_path / "nope")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(IngestError, match="does not hold"):
        ingest("cora", tmp_path / "out", source=empty)
    write_citation_tables(tmp_path, name="citeseer")
    archive = tmp_path / "citeseer.tgz"
    write_citation_archive(archive, tmp_path, name="citeseer")
    with pytest.raises(IngestError, match="missing"):
        ingest("cora", tmp_path / "out", source=archive)
    junk = tmp_path / "junk.tgz"
    junk.write_bytes(b"not a tar archive")
    with pytest.raises(IngestError, match="cannot read archive"):
        ingest("cora", tmp_path / "out", source=junk)


def test_row_normalize_leaves_zero_rows_alone():
    feats = np.array([[2.0, 2.0], [0.0, 0.0], [3.0, 1.0]])
    out = row_normalize(feats)
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.0, 0.0], [0.75, 0.25]])
    # input is untouched
    assert feats[0, 0] == 2.0


# ---------------------------------------------------------------------------
# sparse npz bundles

def test_npz_bundle_parses_without_normalization(tmp_path):
    bundle = tmp_path / "amazon_photo.npz"
    write_npz_bundle(bundle)
    out = tmp_path / "out"
    manifest = ingest("amazon_photo", out, source=bundle)
    assert manifest.num_nodes == 4
    assert manifest.num_classes == 2
    assert manifest.num_directed_edges == 5
    assert manifest.num_edges == 2

    g = load_canonical(out)
    assert g.edges.tolist() == [[0, 1], [2, 3]]
    # attribute values survive verbatim; no row scaling for these graphs
    np.testing.assert_array_equal(g.features, [[2.5, 0.0, 1.0],
                                               [0.0, 0.0, 0.0],
                                               [1.0, 4.0, 0.0],
                                               [0.5, 0.5, 3.0]])
    assert g.labels.tolist() == [0, 1, 0, 1]


def test_npz_bundle_rejects_missing_arrays(tmp_path):
    bundle = tmp_path / "broken.npz"
    np.savez(bundle, adj_data=np.ones(1))
    with pytest.raises(IngestError, match="missing arrays"):
        parse_sparse_npz(bundle)


def test_npz_bundle_rejects_shape_mismatch(tmp_path):
    bundle = tmp_path / "short.npz"
    write_npz_bundle(bundle)
    with np.load(bundle) as z:
        arrays = dict(z)
    arrays["adj_indptr"] = arrays["adj_indptr"][:-1]
    np.savez(bundle, **arrays)
    with pytest.raises(IngestError, match="indptr length"):
        parse_sparse_npz(bundle)


def test_npz_bundle_rejects_garbage_file(tmp_path):
    bundle = tmp_path / "junk.npz"
    bundle.write_bytes(b"\x00\x01 not a zip")
    with pytest.raises(IngestError, match="cannot read npz"):
        parse_sparse_npz(bundle)


# ---------------------------------------------------------------------------
# registry and downloads

def test_unknown_dataset_name_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown dataset"):
        ingest("no_such_graph", tmp_path / "out")


def test_download_failure_raises_ingest_error(tmp_path, monkeypatch):
    monkeypatch.setitem(DATASETS, "cora",
                        _CitationSource("http://127.0.0.1:1/cora.tgz"))
    with pytest.raises(IngestError, match="download failed"):
        ingest("cora", tmp_path / "out")
    monkeypatch.setitem(DATASETS, "amazon_photo",
                        _NpzSource("http://127.0.0.1:1/photo.npz"))
    with pytest.raises(IngestError, match="download failed"):
        ingest("amazon_photo", tmp_path / "out")


# ---------------------------------------------------------------------------
# public benchmark distributions (skipped when unreachable)

def _ingest_or_skip(name: str, out: Path) -> IngestManifest:
    source = os.environ.get(f"INGEST_{name.upper()}_SOURCE")
    try:
        return ingest(name, out, source=source)
    except IngestError as err:
        pytest.skip(
            f"the {name} distribution is unreachable from this environment "
            f"({err}); set INGEST_{name.upper()}_SOURCE to a local copy of "
            f"the native files to run this test")


def test_cora_ingestion_counts(tmp_path):
    manifest = _ingest_or_skip("cora", tmp_path / "cora")
    assert manifest.num_nodes == 2708
    assert manifest.num_classes == 7
    assert 5000 < manifest.num_edges < 5500
    g = load_canonical(tmp_path / "cora")
    assert g.num_nodes == 2708
    rerun = _ingest_or_skip("cora", tmp_path / "cora_again")
    assert rerun.checksum == manifest.checksum


def test_citeseer_ingestion_counts(tmp_path):
    manifest = _ingest_or_skip("citeseer", tmp_path / "citeseer")
    assert manifest.num_classes == 6
    assert manifest.num_nodes > 3000
    g = load_canonical(tmp_path / "citeseer")
    assert g.num_classes == 6
