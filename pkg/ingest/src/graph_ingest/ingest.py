"""Converters from native benchmark distributions to the canonical
dataset directory format.

Two native layouts are supported: whitespace-separated citation tables
(a .content file with node id, 0/1 word counts, and a class name per
line, plus a .cites file with one reference per line) and sparse-matrix
.npz bundles (CSR adjacency, CSR attributes, and a label vector). A
stochastic-block-model generator covers tests and demos without any
downloads.

The canonical directory holds meta.json, features.csv (sparse
node/feat/val triplets), labels.csv, and edges.csv with deduplicated
undirected u < v edges and no self-loops. manifest.json records the
counts plus a checksum over the four canonical files, so a rerun that
produces identical data produces an identical checksum. Source edge
lines usually list both directions of a link; manifests carry the raw
line count next to the undirected count to keep the two bookkeepings
apart.
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import tarfile
import tempfile
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class IngestError(RuntimeError):
    """Download or parse failure for a dataset source."""


@dataclass(frozen=True)
class IngestManifest:
    dataset: str
    source: str
    num_nodes: int
    num_features: int
    num_classes: int
    num_edges: int
    num_directed_edges: int
    checksum: str


@dataclass(frozen=True)
class _CitationSource:
    url: str


@dataclass(frozen=True)
class _NpzSource:
    url: str


DATASETS = {
    "cora": _CitationSource(
        "https://linqs-data.soe.ucsc.edu/public/lbc/cora.tgz"),
    "citeseer": _CitationSource(
        "https://linqs-data.soe.ucsc.edu/public/lbc/citeseer.tgz"),
    "amazon_photo": _NpzSource(
        "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/"
        "amazon_electronics_photo.npz"),
    "amazon_computers": _NpzSource(
        "https://github.com/shchur/gnn-benchmark/raw/master/data/npz/"
        "amazon_electronics_computers.npz"),
}

_CANONICAL_FILES = ("meta.json", "features.csv", "labels.csv", "edges.csv")


# ---------------------------------------------------------------------------
# Canonical output

def _undirected_edges(pairs, n: int):
    """Drop self-loops, fold to u < v, deduplicate, sort. Returns the
    edge array plus the raw source line count."""
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    directed = len(arr)
    if directed and (arr.min() < 0 or arr.max() >= n):
        raise IngestError("edge references a node id outside the table")
    arr = arr[arr[:, 0] != arr[:, 1]]
    if len(arr) == 0:
        return np.zeros((0, 2), dtype=np.int64), directed
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    keys = np.unique(lo * np.int64(n) + hi)
    return np.stack([keys // n, keys % n], axis=1), directed


def write_canonical(out_dir, name: str, features, labels, edges,
                    num_classes: int) -> None:
    """Write the four canonical files; layout mirrors what the attack
    package's loader reads back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    meta = {"name": name, "num_nodes": int(len(labels)),
            "num_features": int(features.shape[1]),
            "num_classes": int(num_classes), "num_edges": int(len(edges))}
    (out / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "feat", "val"])
        rows, cols = np.nonzero(features)
        for i, j in zip(rows.tolist(), cols.tolist()):
            w.writerow([i, j, repr(float(features[i, j]))])
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "label"])
        for i, y in enumerate(labels.tolist()):
            w.writerow([i, y])
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v"])
        for u, v in np.asarray(edges, dtype=np.int64).tolist():
            w.writerow([u, v])


def content_checksum(out_dir) -> str:
    h = hashlib.sha256()
    for fname in _CANONICAL_FILES:
        h.update(fname.encode())
        h.update((Path(out_dir) / fname).read_bytes())
    return h.hexdigest()


def _emit(out_dir, name: str, features, labels, edges, num_classes: int,
          source: str, directed: int) -> IngestManifest:
    write_canonical(out_dir, name, features, labels, edges, num_classes)
    manifest = IngestManifest(
        dataset=name, source=str(source), num_nodes=int(len(labels)),
        num_features=int(np.asarray(features).shape[1]),
        num_classes=int(num_classes), num_edges=int(len(edges)),
        num_directed_edges=int(directed),
        checksum=content_checksum(out_dir))
    (Path(out_dir) / "manifest.json").write_text(
        json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Citation tables

def row_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each row to unit sum; all-zero rows stay zero."""
    features = np.asarray(features, dtype=np.float64)
    sums = features.sum(axis=1, keepdims=True)
    return np.divide(features, sums, out=np.zeros_like(features),
                     where=sums > 0)


def parse_citation_tables(content_path, cites_path):
    """Read a .content/.cites table pair.

    Returns (features, labels, pairs, num_classes). Node ids are strings
    enumerated in file order; class names map to indices in sorted order;
    reference lines naming an id that has no content row are skipped, as
    the public citeseer table contains such dangling references.
    """
    ids, rows, names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise IngestError(
                    f"{content_path}: content row needs id, features, label")
            ids.append(parts[0])
            rows.append(parts[1:-1])
            names.append(parts[-1])
    if not ids:
        raise IngestError(f"{content_path} has no rows")
    index = {node: i for i, node in enumerate(ids)}
    if len(index) != len(ids):
        raise IngestError(f"{content_path} repeats a node id")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise IngestError(f"{content_path} rows have mixed feature counts")
    try:
        features = np.array(rows, dtype=np.float64)
    except ValueError as err:
        raise IngestError(f"{content_path}: non-numeric feature: {err}") from err

    classes = sorted(set(names))
    class_index = {name: k for k, name in enumerate(classes)}
    labels = np.array([class_index[name] for name in names], dtype=np.int64)

    pairs = []
    with open(cites_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise IngestError(f"{cites_path}: malformed line {line!r}")
            a, b = parts
            if a in index and b in index:
                pairs.append((index[a], index[b]))
    return features, labels, pairs, len(classes)


def _download(url: str, dest: Path) -> None:
    try:
        with urllib.request.urlopen(url, timeout=60) as resp, \
                open(dest, "wb") as out:
            shutil.copyfileobj(resp, out)
    except OSError as err:
        raise IngestError(f"download failed for {url}: {err}") from err


def _extract_citation_tables(archive: Path, name: str, into: Path):
    """Pull <name>.content and <name>.cites out of a source archive."""
    want = {f"{name}.content": None, f"{name}.cites": None}
    try:
        with tarfile.open(archive) as tf:
            for member in tf.getmembers():
                base = Path(member.name).name
                if base in want and member.isfile():
                    fh = tf.extractfile(member)
                    target = into / base
                    target.write_bytes(fh.read())
                    want[base] = target
    except tarfile.TarError as err:
        raise IngestError(f"cannot read archive {archive}: {err}") from err
    missing = [k for k, v in want.items() if v is None]
    if missing:
        raise IngestError(f"archive {archive} is missing {missing}")
    return want[f"{name}.content"], want[f"{name}.cites"]


def _load_citation(name: str, spec: _CitationSource, source):
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        if source is None:
            archive = tmp / f"{name}.tgz"
            _download(spec.url, archive)
            content, cites = _extract_citation_tables(archive, name, tmp)
            src = spec.url
        else:
            src_path = Path(source)
            src = str(src_path)
            if src_path.is_dir():
                content = src_path / f"{name}.content"
                cites = src_path / f"{name}.cites"
                if not content.is_file() or not cites.is_file():
                    raise IngestError(
                        f"{src_path} does not hold {name}.content and "
                        f"{name}.cites")
            elif src_path.is_file():
                content, cites = _extract_citation_tables(src_path, name, tmp)
            else:
                raise IngestError(f"source {src_path} does not exist")
        features, labels, pairs, n_classes = parse_citation_tables(content,
                                                                   cites)
    return features, labels, pairs, n_classes, src


# ---------------------------------------------------------------------------
# Sparse .npz bundles

_NPZ_KEYS = ("adj_data", "adj_indices", "adj_indptr", "adj_shape",
             "attr_data", "attr_indices", "attr_indptr", "attr_shape",
             "labels")


def parse_sparse_npz(path):
    """Read a CSR adjacency + CSR attributes + labels bundle.

    Returns (features, labels, pairs, num_classes); pairs list every
    stored adjacency entry, typically both directions of each link.
    """
    try:
        bundle = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as err:
        raise IngestError(f"cannot read npz bundle {path}: {err}") from err
    with bundle:
        missing = [k for k in _NPZ_KEYS if k not in bundle]
        if missing:
            raise IngestError(f"{path} is missing arrays {missing}")
        n = int(bundle["adj_shape"][0])
        indptr = bundle["adj_indptr"].astype(np.int64)
        indices = bundle["adj_indices"].astype(np.int64)
        if indptr.shape != (n + 1,):
            raise IngestError(f"{path}: adjacency indptr length mismatch")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
        pairs = np.stack([rows, indices], axis=1)

        a_shape = tuple(int(x) for x in bundle["attr_shape"])
        if a_shape[0] != n:
            raise IngestError(f"{path}: attribute rows do not match nodes")
        features = np.zeros(a_shape)
        a_indptr = bundle["attr_indptr"].astype(np.int64)
        a_indices = bundle["attr_indices"].astype(np.int64)
        a_rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(a_indptr))
        features[a_rows, a_indices] = bundle["attr_data"]

        labels = bundle["labels"].astype(np.int64)
        if labels.shape != (n,):
            raise IngestError(f"{path}: label vector does not match nodes")
    return features, labels, pairs, int(labels.max()) + 1


def _load_npz(name: str, spec: _NpzSource, source):
    if source is None:
        with tempfile.TemporaryDirectory() as tmp:
            bundle = Path(tmp) / f"{name}.npz"
            _download(spec.url, bundle)
            out = parse_sparse_npz(bundle)
        return (*out, spec.url)
    src_path = Path(source)
    if not src_path.is_file():
        raise IngestError(f"source {src_path} does not exist")
    return (*parse_sparse_npz(src_path), str(src_path))


# ---------------------------------------------------------------------------
# Entry points

def ingest(dataset_name: str, out_dir, source=None) -> IngestManifest:
    """Convert one benchmark into canonical form under out_dir.

    `source` points at a local copy of the native distribution (a
    directory with the citation tables, the source archive, or the .npz
    bundle); without it the public distribution is downloaded.
    """
    name = str(dataset_name).lower()
    if name not in DATASETS:
        raise ValueError(
            f"unknown dataset {dataset_name!r}; known: {sorted(DATASETS)}")
    spec = DATASETS[name]
    if isinstance(spec, _CitationSource):
        features, labels, pairs, n_classes, src = _load_citation(name, spec,
                                                                 source)
        features = row_normalize(features)
    else:
        features, labels, pairs, n_classes, src = _load_npz(name, spec,
                                                            source)
    edges, directed = _undirected_edges(pairs, len(labels))
    return _emit(out_dir, name, features, labels, edges, n_classes, src,
                 directed)


def make_synthetic(n: int, classes: int, p_intra: float, p_inter: float,
                   d: int, seed: int, out_dir) -> IngestManifest:
    """Stochastic-block-model graph with class-correlated Gaussian
    features, written in canonical form. Deterministic per seed."""
    if not 0.0 <= p_inter < p_intra <= 1.0:
        raise ValueError("need 0 <= p_inter < p_intra <= 1")
    if classes < 2 or n < classes or d < 1:
        raise ValueError("need n >= classes >= 2 and d >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    protos = rng.normal(size=(classes, d))
    protos = 1.5 * protos / np.linalg.norm(protos, axis=1, keepdims=True)
    features = protos[labels] + rng.normal(0.0, 0.5, size=(n, d))
    pairs = []
    for i in range(n - 1):
        js = np.arange(i + 1, n)
        prob = np.where(labels[js] == labels[i], p_intra, p_inter)
        hits = js[rng.uniform(size=len(js)) < prob]
        pairs.extend((i, int(j)) for j in hits)
    edges, directed = _undirected_edges(pairs, n)
    source = (f"synthetic(n={n}, classes={classes}, p_intra={p_intra}, "
              f"p_inter={p_inter}, d={d}, seed={seed})")
    return _emit(out_dir, "synthetic", features, labels, edges, classes,
                 source, directed)
