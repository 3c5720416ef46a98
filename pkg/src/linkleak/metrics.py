"""Evaluation metrics: rank-based AUC, class-scoped link-inference AUC,
node-centric homophily and its distributional shift, 2-D PCA, and the
stealthiness report.

Detectors are consumed through duck typing: anything with a
score_posterior_pairs(p_u, p_v) method, or a callable
(pairs, p_u, p_v) -> scores, works.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gnn
from .graphs import Graph, pairs_to_arrays, sample_pairs


@dataclass(frozen=True)
class RocResult:
    auc: float
    n_pos: int
    n_neg: int

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> RocResult:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 1/2 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = _midranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return RocResult(auc=float(u / (n_pos * n_neg)), n_pos=n_pos, n_neg=n_neg)


# ---------------------------------------------------------------------------
# Link-inference AUC against a live vendor model

def _score_pairs(det, pairs, p_u: np.ndarray, p_v: np.ndarray) -> np.ndarray:
    if callable(det) and not hasattr(det, "score_posterior_pairs"):
        return np.asarray(det(pairs, p_u, p_v), dtype=np.float64)
    return np.asarray(det.score_posterior_pairs(p_u, p_v), dtype=np.float64)


def link_auc(det, g: Graph, vendor: gnn.GnnModel, class_filter,
             n_pairs: int = 2000, seed: int = 0) -> RocResult:
    """AUC of a detector on freshly sampled balanced pairs from g.

    Pairs are linked/unlinked in equal number (up to availability) within
    the class scope; the vendor model is queried for posteriors on the
    full graph and the detector scores each posterior pair.
    """
    if class_filter == "all":
        n_linked = g.num_edges
    else:
        k = int(class_filter)
        mask = (g.labels[g.edges[:, 0]] == k) & (g.labels[g.edges[:, 1]] == k)
        n_linked = int(mask.sum())
    if n_linked == 0:
        raise ValueError("no linked pairs in scope")
    n_linked = min(n_linked, n_pairs // 2)
    pairs = sample_pairs(g, class_filter, n_linked, n_linked, seed)
    cols = pairs_to_arrays(pairs)
    probs = gnn.predict_posteriors(vendor, g).probs
    scores = _score_pairs(det, pairs, probs[cols["u"]], probs[cols["v"]])
    return auc(scores, cols["linked"])


def intra_class_auc(det, g: Graph, vendor: gnn.GnnModel, k: int,
                    n_pairs: int = 2000, seed: int = 0) -> RocResult:
    """Link-inference AUC restricted to pairs whose endpoints both belong
    to class k."""
    return link_auc(det, g, vendor, int(k), n_pairs=n_pairs, seed=seed)


# ---------------------------------------------------------------------------
# Homophily

def node_homophily(g: Graph, v: int) -> float:
    """Cosine similarity between a node's features and its neighbors'
    mean features. Zero-norm vectors give similarity 0."""
    nb = g.neighbor_lists()[v]
    if len(nb) == 0:
        raise ValueError(f"node {v} has no neighbors")
    x = g.features[v]
    m = g.features[nb].mean(axis=0)
    nx, nm = np.linalg.norm(x), np.linalg.norm(m)
    if nx == 0.0 or nm == 0.0:
        return 0.0
    return float(np.dot(x, m) / (nx * nm))


@dataclass(frozen=True)
class HomophilyDist:
    """Per-node homophily of every non-isolated node plus a fixed-bin
    histogram over [-1, 1]."""

    node_ids: np.ndarray
    values: np.ndarray
    bin_counts: np.ndarray = field(default=None)
    bin_edges: np.ndarray = field(default=None)

    N_BINS = 50

    def __post_init__(self):
        ids = np.asarray(self.node_ids, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if ids.shape != vals.shape:
            raise ValueError("node_ids and values must align")
        counts, edges = np.histogram(vals, bins=self.N_BINS, range=(-1.0, 1.0))
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "bin_counts", counts)
        object.__setattr__(self, "bin_edges", edges)


def homophily_distribution(g: Graph) -> HomophilyDist:
    ids = np.array([v for v in range(g.num_nodes)
                    if len(g.neighbor_lists()[v]) > 0], dtype=np.int64)
    vals = np.array([node_homophily(g, int(v)) for v in ids])
    return HomophilyDist(node_ids=ids, values=vals)


def homophily_shift(before: HomophilyDist, after: HomophilyDist) -> float:
    """1-D Wasserstein distance between the two empirical distributions:
    mean absolute difference of sorted values."""
    if not np.array_equal(before.node_ids, after.node_ids):
        raise ValueError("distributions cover different node populations")
    if len(before.values) == 0:
        return 0.0
    return float(np.mean(np.abs(np.sort(before.values) -
                                np.sort(after.values))))


# ---------------------------------------------------------------------------
# PCA

def pca2d(rows, tol: float = 1e-10, max_iters: int = 1000) -> np.ndarray:
    """Project rows onto their top-2 principal axes.

    Power iteration with deflation on the column-centered covariance;
    each component's sign is fixed so its first nonzero loading is
    positive. Raises RuntimeError if an iteration fails to converge.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a matrix with at least 2 rows")
    m, d = x.shape
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (m - 1)

    comps = []
    work = cov.copy()

    def orthogonalized(vec):
        for c in comps:
            vec = vec - (vec @ c) * c
        return vec

    # fixed, dense, deterministic starts; identity columns as fallback
    starts = [np.cos(np.arange(1, d + 1)), np.sin(np.arange(1, d + 1))]
    starts += [np.eye(d)[j] for j in range(d)]
    for _ in range(min(2, d)):
        for cand in starts:
            v = orthogonalized(cand.copy())
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                v /= norm
                break
        else:
            raise RuntimeError("no usable start vector for power iteration")
        for _ in range(max_iters):
            w = orthogonalized(work @ v)
            norm = np.linalg.norm(w)
            if norm < tol:
                break  # no variance left in this subspace: keep v as is
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v = w
                break
            v = w
        else:
            raise RuntimeError("power iteration failed to converge")
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if len(nz) and v[nz[0]] < 0:
            v = -v
        comps.append(v)
        lam = float(v @ work @ v)
        work = work - lam * np.outer(v, v)
    while len(comps) < 2:  # single-column input: pad a zero component
        comps.append(np.zeros(d))
    basis = np.stack(comps, axis=1)
    return centered @ basis


# ---------------------------------------------------------------------------
# Reports

@dataclass(frozen=True)
class StealthReport:
    acc_clean: float
    acc_poisoned: float
    delta_acc: float
    homophily_shift: float
    acc_threshold: float
    shift_threshold: float
    flagged: bool


def stealthiness_report(clean_model_acc: float, poisoned_model_acc: float,
                        shift: float, acc_threshold: float = 0.03,
                        shift_threshold: float = 0.05) -> StealthReport:
    """Flags a poisoning run whose damage would be noticeable: accuracy
    moved more than acc_threshold or homophily shifted more than
    shift_threshold."""
    for a in (clean_model_acc, poisoned_model_acc):
        if not 0.0 <= a <= 1.0:
            raise ValueError("accuracies must lie in [0, 1]")
    delta = poisoned_model_acc - clean_model_acc
    flagged = abs(delta) > acc_threshold or shift > shift_threshold
    return StealthReport(acc_clean=clean_model_acc,
                         acc_poisoned=poisoned_model_acc,
                         delta_acc=delta, homophily_shift=shift,
                         acc_threshold=acc_threshold,
                         shift_threshold=shift_threshold, flagged=flagged)


@dataclass(frozen=True)
class ExperimentReport:
    """One attack cell's metrics, JSON-serializable."""

    overall_auc: float
    intra_class_auc: float
    target_class: int
    model_acc_clean: float
    model_acc_poisoned: float
    homophily_shift: float
    config: dict
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# CSV emitters for external plotting

def write_histogram_csv(dist: HomophilyDist, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(dist.bin_edges[:-1], dist.bin_edges[1:],
                             dist.bin_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def write_projection_csv(proj: np.ndarray, labels, path) -> None:
    proj = np.asarray(proj)
    labels = np.asarray(labels)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(proj, labels):
            w.writerow([repr(float(a)), repr(float(b)), lab])
