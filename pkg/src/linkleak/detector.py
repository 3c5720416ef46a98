"""Posterior-pair similarity features and the two link detectors.

A pair of posterior rows is folded into a 12-dim feature vector: eight
pairwise distances followed by four entropy summaries, all symmetric in
the pair. The baseline detector is a small dense network over these
features; the stronger one re-reads the 12 features as tokens through
multi-head self-attention and is warm-started so that at initialization
its pooled representation reproduces the dense network's first layer.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .graphs import PartialGraph, sample_unlinked_pairs
from .rng import SeededRng

N_FEATURES = 12
MODEL_DIM = 64
N_HEADS = 16
HEAD_DIM = MODEL_DIM // N_HEADS

FEATURE_NAMES = (
    "cosine", "euclidean", "sqeuclidean", "manhattan", "chebyshev",
    "correlation", "braycurtis", "canberra",
    "entropy_min", "entropy_max", "entropy_absdiff", "entropy_mean",
)


# ---------------------------------------------------------------------------
# Similarity features

def _entropy_rows(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0.0, p, 1.0)
    return -np.sum(np.where(p > 0.0, p * np.log(safe), 0.0), axis=1)


def pair_feature_matrix(p_u, p_v) -> np.ndarray:
    """Row-wise 12-dim similarity features for aligned posterior matrices.

    Order: cosine, euclidean, squared euclidean, manhattan, chebyshev,
    correlation, bray-curtis, canberra distances, then min / max /
    absolute difference / mean of the two Shannon entropies (natural
    log). Exactly symmetric under swapping the operands.
    """
    p = np.asarray(p_u, dtype=np.float64)
    q = np.asarray(p_v, dtype=np.float64)
    if p.ndim != 2 or p.shape != q.shape:
        raise ValueError("need two aligned 2-d posterior matrices")

    diff = p - q
    absdiff = np.abs(diff)

    dot = np.sum(p * q, axis=1)
    norms = np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1)
    cosine = np.where(norms > 0.0, 1.0 - dot / np.where(norms > 0.0, norms, 1.0), 1.0)
    cosine = np.maximum(cosine, 0.0)  # parallel vectors can round past 1

    sqeuclid = np.sum(diff * diff, axis=1)
    euclid = np.sqrt(sqeuclid)
    manhattan = np.sum(absdiff, axis=1)
    chebyshev = np.max(absdiff, axis=1)

    cp = p - p.mean(axis=1, keepdims=True)
    cq = q - q.mean(axis=1, keepdims=True)
    cnorms = np.linalg.norm(cp, axis=1) * np.linalg.norm(cq, axis=1)
    # a constant vector has no direction after centering: distance 1
    constant = (np.linalg.norm(cp, axis=1) <= 1e-12) | \
               (np.linalg.norm(cq, axis=1) <= 1e-12)
    corr = np.where(constant, 1.0,
                    1.0 - np.sum(cp * cq, axis=1) / np.where(constant, 1.0, cnorms))
    corr = np.maximum(corr, 0.0)

    bc_den = np.sum(np.abs(p + q), axis=1)
    braycurtis = np.divide(manhattan, bc_den,
                           out=np.zeros_like(manhattan), where=bc_den > 0.0)

    cb_den = np.abs(p) + np.abs(q)
    canberra = np.divide(absdiff, cb_den,
                         out=np.zeros_like(absdiff), where=cb_den > 0.0).sum(axis=1)

    h_u = _entropy_rows(p)
    h_v = _entropy_rows(q)

    return np.column_stack([
        cosine, euclid, sqeuclid, manhattan, chebyshev, corr, braycurtis,
        canberra,
        np.minimum(h_u, h_v), np.maximum(h_u, h_v), np.abs(h_u - h_v),
        (h_u + h_v) / 2.0,
    ])


def similarity_features(p_u, p_v) -> np.ndarray:
    """12-dim feature vector for a single posterior pair."""
    p = np.asarray(p_u, dtype=np.float64)
    q = np.asarray(p_v, dtype=np.float64)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError("need two probability vectors of equal length")
    return pair_feature_matrix(p[None, :], q[None, :])[0]


# ---------------------------------------------------------------------------
# Pair dataset

@dataclass(frozen=True)
class PairDataset:
    """Feature rows for node pairs with link labels and a train/val tag."""

    pairs: np.ndarray      # (m, 2) node ids local to the source graph
    features: np.ndarray   # (m, 12)
    linked: np.ndarray     # (m,) bool
    is_train: np.ndarray   # (m,) bool

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        linked = np.asarray(self.linked, dtype=bool)
        train = np.asarray(self.is_train, dtype=bool)
        m = len(pairs)
        if pairs.shape != (m, 2) or feats.shape != (m, N_FEATURES) or \
                linked.shape != (m,) or train.shape != (m,):
            raise ValueError("dataset columns are misaligned")
        for arr, name in ((pairs, "pairs"), (feats, "features"),
                          (linked, "linked"), (train, "is_train")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.linked)

    @property
    def train_x(self) -> np.ndarray:
        return self.features[self.is_train]

    @property
    def train_y(self) -> np.ndarray:
        return self.linked[self.is_train]

    @property
    def val_x(self) -> np.ndarray:
        return self.features[~self.is_train]

    @property
    def val_y(self) -> np.ndarray:
        return self.linked[~self.is_train]


def build_pair_dataset(partial: PartialGraph, posteriors, class_filter,
                       seed: int = 0) -> PairDataset:
    """Balanced link/no-link dataset over a partial graph's node pairs.

    Takes every linked pair in scope plus an equal number of uniform
    unlinked pairs (capped with a warning if the scope runs out), scores
    each pair's posterior rows into features, shuffles, and splits 80/20
    per label so both splits keep the class balance. `posteriors` rows
    must align with the partial graph's local node ids.
    """
    g = partial.graph
    probs = np.asarray(getattr(posteriors, "probs", posteriors),
                       dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != g.num_nodes:
        raise ValueError("posteriors must cover every partial-graph node")

    if class_filter == "all":
        scope = np.arange(g.num_nodes)
        edge_mask = np.ones(g.num_edges, dtype=bool)
    else:
        k = int(class_filter)
        scope = np.flatnonzero(g.labels == k)
        edge_mask = (g.labels[g.edges[:, 0]] == k) & \
                    (g.labels[g.edges[:, 1]] == k)
    linked_pairs = g.edges[edge_mask]
    n_linked = len(linked_pairs)
    if n_linked == 0:
        raise ValueError("no linked pairs in scope")

    rng = SeededRng(seed)
    unlinked_pairs = sample_unlinked_pairs(g, n_linked, rng.spawn("unlinked"),
                                           nodes=scope)
    if len(unlinked_pairs) == 0:
        raise ValueError("scope has no unlinked pairs; graph section is complete")
    if len(unlinked_pairs) < n_linked:
        warnings.warn(f"only {len(unlinked_pairs)} unlinked pairs available "
                      f"for {n_linked} linked; dataset is unbalanced")

    pairs = np.vstack([linked_pairs, unlinked_pairs])
    flags = np.zeros(len(pairs), dtype=bool)
    flags[:n_linked] = True
    feats = pair_feature_matrix(probs[pairs[:, 0]], probs[pairs[:, 1]])

    order = rng.spawn("shuffle").permutation(len(pairs))
    pairs, flags, feats = pairs[order], flags[order], feats[order]

    is_train = np.zeros(len(pairs), dtype=bool)
    for cls in (True, False):
        idx = np.flatnonzero(flags == cls)
        is_train[idx[:int(round(0.8 * len(idx)))]] = True
    return PairDataset(pairs=pairs, features=feats, linked=flags,
                       is_train=is_train)


def write_pair_csv(ds: PairDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", *[f"f{i}" for i in range(N_FEATURES)],
                    "linked", "is_train"])
        for k in range(len(ds)):
            w.writerow([int(ds.pairs[k, 0]), int(ds.pairs[k, 1]),
                        *[repr(float(x)) for x in ds.features[k]],
                        int(ds.linked[k]), int(ds.is_train[k])])


def read_pair_csv(path) -> PairDataset:
    pairs, feats, linked, train = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != N_FEATURES + 4:
            raise ValueError("unexpected column count")
        for row in reader:
            pairs.append((int(row[0]), int(row[1])))
            feats.append([float(x) for x in row[2:2 + N_FEATURES]])
            linked.append(bool(int(row[-2])))
            train.append(bool(int(row[-1])))
    return PairDataset(pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
                       features=np.array(feats, dtype=np.float64).reshape(
                           -1, N_FEATURES),
                       linked=np.array(linked, dtype=bool),
                       is_train=np.array(train, dtype=bool))


# ---------------------------------------------------------------------------
# Detectors

class _Detector:
    """Shared storage and scoring for the two detector families."""

    kind = ""
    param_names: tuple = ()
    param_shapes: tuple = ()

    def __init__(self, params):
        if len(params) != len(self.param_shapes):
            raise ValueError(f"{self.kind} detector expects "
                             f"{len(self.param_shapes)} parameter arrays")
        self.params = []
        for p, shape in zip(params, self.param_shapes):
            arr = np.asarray(p.data if isinstance(p, T.Tensor) else p,
                             dtype=np.float64).copy()
            if arr.shape != shape:
                raise ValueError(f"parameter shape {arr.shape} != {shape}")
            arr.setflags(write=False)
            self.params.append(T.Tensor(arr, _check=False))
        self.loss_history: list = []
        self.val_auc_history: list = []

    def _logits(self, x: T.Tensor) -> T.Tensor:
        raise NotImplementedError

    def predict_scores(self, features) -> np.ndarray:
        """Probability of the linked class for each feature row."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 1:
            f = f[None, :]
        if f.ndim != 2 or f.shape[1] != N_FEATURES:
            raise ValueError(f"features must have {N_FEATURES} columns")
        probs = T.softmax_rows(self._logits(T.Tensor(f))).data
        return probs[:, 1]

    def score_posterior_pairs(self, p_u, p_v) -> np.ndarray:
        return self.predict_scores(pair_feature_matrix(p_u, p_v))


class MlpDetector(_Detector):
    """Dense 12-64-32-2 classifier over pair features."""

    kind = "mlp"
    param_names = ("layer0.w", "layer0.b", "layer1.w", "layer1.b",
                   "layer2.w", "layer2.b")
    param_shapes = ((N_FEATURES, 64), (64,), (64, 32), (32,), (32, 2), (2,))

    def _logits(self, x: T.Tensor) -> T.Tensor:
        return _mlp_logits(self.params, x)


class AttnDetector(_Detector):
    """Feature-token self-attention classifier.

    Each of the 12 features becomes a 64-dim token (feature value times
    its embedding row, plus 1/12 of the shared bias); one 16-head
    self-attention block with a residual connection mixes the tokens,
    which are then mean-pooled and classified. With the attention output
    projection at zero, pooling times 12 reproduces the dense detector's
    first-layer pre-activation exactly.
    """

    kind = "attn"
    param_names = ("embed.w", "embed.b", "attn.wq", "attn.wk", "attn.wv",
                   "attn.wo", "attn.bo", "head.w", "head.b")
    param_shapes = ((N_FEATURES, MODEL_DIM), (MODEL_DIM,),
                    (MODEL_DIM, MODEL_DIM), (MODEL_DIM, MODEL_DIM),
                    (MODEL_DIM, MODEL_DIM), (MODEL_DIM, MODEL_DIM),
                    (MODEL_DIM,), (MODEL_DIM, 2), (2,))

    def _logits(self, x: T.Tensor) -> T.Tensor:
        return _attn_logits(self.params, x)

    def pooled(self, features) -> np.ndarray:
        """Mean-pooled token representation before the classifier head."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 1:
            f = f[None, :]
        return _attn_pooled(self.params, T.Tensor(f)).data


def _glorot(rng: SeededRng, fan_in: int, fan_out: int) -> T.Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                    requires_grad=True)


def _zeros(*shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _mlp_logits(params: list, x) -> T.Tensor:
    w0, b0, w1, b1, w2, b2 = params
    h = T.relu(T.add(T.matmul(x, w0), b0))
    h = T.relu(T.add(T.matmul(h, w1), b1))
    return T.add(T.matmul(h, w2), b2)


def _split_heads(t: T.Tensor, m: int) -> T.Tensor:
    # (m, 12, 64) -> (m, heads, 12, head_dim)
    return T.permute(T.reshape(t, (m, N_FEATURES, N_HEADS, HEAD_DIM)),
                     (0, 2, 1, 3))


def _attn_pooled(params: list, x) -> T.Tensor:
    w1, b1, wq, wk, wv, wo, bo, _, _ = params
    m = x.shape[0]
    tokens = T.add(T.mul(T.reshape(x, (m, N_FEATURES, 1)), w1),
                   T.mul(b1, T.as_tensor(1.0 / N_FEATURES)))
    q = _split_heads(T.matmul(tokens, wq), m)
    k = _split_heads(T.matmul(tokens, wk), m)
    v = _split_heads(T.matmul(tokens, wv), m)
    scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))),
                   T.as_tensor(1.0 / np.sqrt(HEAD_DIM)))
    alpha = T.softmax_rows(scores)
    ctx = T.matmul(alpha, v)  # (m, heads, 12, head_dim)
    merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (m, N_FEATURES, MODEL_DIM))
    h = T.add(T.add(T.matmul(merged, wo), bo), tokens)
    return T.mul(T.sum_axis(h, 1), T.as_tensor(1.0 / N_FEATURES))


def _attn_logits(params: list, x) -> T.Tensor:
    wh, bh = params[-2], params[-1]
    return T.add(T.matmul(T.relu(_attn_pooled(params, x)), wh), bh)


def new_mlp(seed: int = 0) -> MlpDetector:
    rng = SeededRng(seed)
    return MlpDetector([_glorot(rng, N_FEATURES, 64), _zeros(64),
                        _glorot(rng, 64, 32), _zeros(32),
                        _glorot(rng, 32, 2), _zeros(2)])


def init_attn_from_mlp(mlp: MlpDetector, seed: int = 0) -> AttnDetector:
    """Warm-start: embedding copies the dense first layer, the attention
    output projection starts at zero so the block is initially silent,
    and the remaining weights are seeded fresh."""
    rng = SeededRng(seed)
    return AttnDetector([
        mlp.params[0], mlp.params[1],
        _glorot(rng, MODEL_DIM, MODEL_DIM),
        _glorot(rng, MODEL_DIM, MODEL_DIM),
        _glorot(rng, MODEL_DIM, MODEL_DIM),
        _zeros(MODEL_DIM, MODEL_DIM), _zeros(MODEL_DIM),
        _glorot(rng, MODEL_DIM, 2), _zeros(2),
    ])


# ---------------------------------------------------------------------------
# Training

def _grad_params(det: _Detector) -> list:
    return [T.Tensor(p.data, requires_grad=True) for p in det.params]


def _train_arrays(ds: PairDataset):
    if not ds.is_train.any():
        raise ValueError("train split is empty")
    return ds.train_x, ds.train_y.astype(np.int64)


def train_mlp(ds: PairDataset, seed: int = 0, epochs: int = 50,
              lr: float = 0.001) -> MlpDetector:
    """Full-batch Adam on cross-entropy; deterministic per seed."""
    x_np, y = _train_arrays(ds)
    det = new_mlp(seed)
    params = _grad_params(det)
    opt = T.AdamState.for_params(params, lr=lr)
    x = T.Tensor(x_np)
    losses = []
    for epoch in range(epochs):
        try:
            with T.tape() as tp:
                post = T.softmax_rows(_mlp_logits(params, x))
                loss = T.cross_entropy(post, y)
            grads = tp.backward(loss)
        except T.NonFiniteError as err:
            raise RuntimeError(f"training diverged at epoch {epoch}: {err}") from err
        params = T.adam_step(params, [grads.of(p) for p in params], opt)
        losses.append(loss.item())
    out = MlpDetector(params)
    out.loss_history = losses
    return out


def train_attn(det: AttnDetector, ds: PairDataset, seed: int = 0,
               max_epochs: int = 200, lr: float = 1e-4,
               patience: int = 20) -> AttnDetector:
    """Fine-tune a warm-started attention detector.

    Full-batch Adam on cross-entropy with early stopping on validation
    AUC (the untrained detector counts as the first checkpoint), so the
    returned model is never worse on validation than where it started.
    The loop itself is deterministic; `seed` is folded into nothing but
    kept so the two trainers share a calling convention.
    """
    x_np, y = _train_arrays(ds)
    if not (~ds.is_train).any():
        raise ValueError("validation split is empty")
    val_x, val_y = ds.val_x, ds.val_y

    def val_auc(param_list) -> float:
        frozen = [T.Tensor(p.data, _check=False) for p in param_list]
        probs = T.softmax_rows(_attn_logits(frozen, T.Tensor(val_x))).data
        return metrics.auc(probs[:, 1], val_y).auc

    params = _grad_params(det)
    opt = T.AdamState.for_params(params, lr=lr)
    x = T.Tensor(x_np)
    best = val_auc(params)
    best_params = [p.data.copy() for p in params]
    auc_history = [best]
    losses = []
    stale = 0
    for epoch in range(max_epochs):
        try:
            with T.tape() as tp:
                post = T.softmax_rows(_attn_logits(params, x))
                loss = T.cross_entropy(post, y)
            grads = tp.backward(loss)
        except T.NonFiniteError as err:
            raise RuntimeError(f"training diverged at epoch {epoch}: {err}") from err
        params = T.adam_step(params, [grads.of(p) for p in params], opt)
        losses.append(loss.item())
        score = val_auc(params)
        auc_history.append(score)
        if score > best:
            best = score
            best_params = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    out = AttnDetector(best_params)
    out.loss_history = losses
    out.val_auc_history = auc_history
    return out


def predict_link(det: _Detector, feature_vector) -> float:
    """Linked-class probability for one feature vector; the decision
    convention is linked iff the score reaches 0.5."""
    return float(det.predict_scores(feature_vector)[0])


def classify_link(det: _Detector, feature_vector) -> bool:
    return predict_link(det, feature_vector) >= 0.5


# ---------------------------------------------------------------------------
# Serialization

def save_detector(det: _Detector, path) -> None:
    doc = {
        "kind": det.kind,
        "params": [
            {"name": name, "shape": list(p.shape),
             "values": p.data.reshape(-1).tolist()}
            for name, p in zip(det.param_names, det.params)
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_detector(path) -> _Detector:
    doc = json.loads(Path(path).read_text())
    cls = {"mlp": MlpDetector, "attn": AttnDetector}.get(doc["kind"])
    if cls is None:
        raise ValueError(f"unknown detector kind {doc['kind']!r}")
    params = [np.array(p["values"], dtype=np.float64).reshape(p["shape"])
              for p in doc["params"]]
    return cls(params)
