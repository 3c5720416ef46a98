"""GCN, GraphSAGE, and GAT node classifiers with one shared training loop.

Serves both roles in the threat model: the vendor's deployed model and
the adversary's shadow model trained on a partial graph. Forward passes
are differentiable w.r.t. input features, which is what the feature
poisoner exploits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .graphs import Graph
from .rng import SeededRng

_ARCHS = ("gcn", "sage", "gat")


@dataclass(frozen=True)
class GnnConfig:
    arch: str = "sage"
    depth: int = 2
    hidden_dim: int = 64
    num_heads: int = 8
    dropout_p: float = 0.5
    lr: float = 0.01
    epochs: int = 200
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.arch not in _ARCHS:
            raise ValueError(f"arch must be one of {_ARCHS}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.arch == "gat":
            if self.num_heads < 1:
                raise ValueError("num_heads must be >= 1")
            if self.hidden_dim % self.num_heads:
                raise ValueError("hidden_dim must be divisible by num_heads")


@dataclass(frozen=True)
class Posteriors:
    """Class-probability matrix aligned to graph node ids."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("posteriors must be a 2-D matrix")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("posterior entries must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("posterior rows must sum to 1")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


# ---------------------------------------------------------------------------
# Graph-derived propagation structures

def gcn_propagation(g: Graph) -> T.SparseMatrix:
    """Symmetric-normalized propagation with self-loops:
    P = D^{-1/2} (A + I) D^{-1/2} with D the self-loop-augmented degrees."""
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    loop = np.arange(n, dtype=np.int64)
    src = np.concatenate([u, v, loop])
    dst = np.concatenate([v, u, loop])
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[src] * deg[dst])
    return T.SparseMatrix.from_coo(dst, src, vals, (n, n))


def mean_aggregation(g: Graph) -> T.SparseMatrix:
    """Row-normalized adjacency without self-loops: neighbor mean per node.
    Nodes without neighbors get an all-zero row (zero aggregate)."""
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    vals = 1.0 / deg[dst]
    return T.SparseMatrix.from_coo(dst, src, vals, (n, n))


def attention_edges(g: Graph) -> tuple:
    """Directed message list for attention: both edge directions plus a
    self-loop per node, sorted by (destination, source)."""
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    loop = np.arange(n, dtype=np.int64)
    src = np.concatenate([u, v, loop])
    dst = np.concatenate([v, u, loop])
    order = np.lexsort((src, dst))
    return src[order], dst[order]


# ---------------------------------------------------------------------------
# Layers (pure functions over tensors; activation left to the network)

def _gcn_apply(p_mat: T.SparseMatrix, h, w, activation: bool) -> T.Tensor:
    out = T.matmul(T.spmm(p_mat, h), w)
    return T.relu(out) if activation else out


def gcn_layer(h, g: Graph, w, activation: bool = True) -> T.Tensor:
    """relu(P h W); pass activation=False on the final layer."""
    return _gcn_apply(gcn_propagation(g), h, w, activation)


def _sage_apply(m_mat: T.SparseMatrix, h, w_self, w_neigh,
                activation: bool) -> T.Tensor:
    out = T.add(T.matmul(h, w_self), T.matmul(T.spmm(m_mat, h), w_neigh))
    return T.relu(out) if activation else out


def sage_layer(h, g: Graph, w_self, w_neigh, activation: bool = True) -> T.Tensor:
    """relu(h W_self + mean_{u in N(v)} h_u W_neigh), zero mean when isolated."""
    return _sage_apply(mean_aggregation(g), h, w_self, w_neigh, activation)


def _gat_apply(src, dst, n: int, h, w, a_src, a_dst, num_heads: int,
               average_heads: bool, return_attention: bool = False):
    """Multi-head attention aggregation over N(v) plus self.

    Scores e = leaky_relu(a_src . Wh_src + a_dst . Wh_dst, slope 0.2) are
    softmax-normalized per destination (max-shifted with the shift treated
    as a constant). Heads concatenate on hidden layers, average on the last.
    """
    head_dim = w.data.shape[1] // num_heads
    wh = T.reshape(T.matmul(h, w), (h.data.shape[0], num_heads, head_dim))
    # per-node score halves: sum_d Wh[:, k, d] * a[k, d] -> (n, heads)
    s_src = T.sum_axis(T.mul(wh, a_src), 2)
    s_dst = T.sum_axis(T.mul(wh, a_dst), 2)
    e = T.leaky_relu(T.add(T.gather_rows(s_src, src), T.gather_rows(s_dst, dst)),
                     slope=0.2)
    shift = np.full((n, num_heads), -np.inf)
    np.maximum.at(shift, dst, e.data)
    ex = T.apply_activation(T.sub(e, T.Tensor(shift[dst])), "exp")
    denom = T.gather_rows(T.segment_sum(ex, dst, n), dst)
    alpha = T.div(ex, denom)
    msgs = T.mul(T.reshape(alpha, (len(src), num_heads, 1)),
                 T.gather_rows(wh, src))
    pooled = T.segment_sum(msgs, dst, n)
    if average_heads:
        out = T.div(T.sum_axis(pooled, 1), float(num_heads))
    else:
        out = T.reshape(pooled, (n, num_heads * head_dim))
    if return_attention:
        return out, alpha, (src, dst)
    return out


def gat_layer(h, g: Graph, w, a_src, a_dst, num_heads: int,
              average_heads: bool = False, return_attention: bool = False):
    """Attention aggregation; no activation here (the network applies elu
    between layers)."""
    src, dst = attention_edges(g)
    return _gat_apply(src, dst, g.num_nodes, h, w, a_src, a_dst,
                      num_heads, average_heads, return_attention)


# ---------------------------------------------------------------------------
# Model

class GnnModel:
    """Frozen parameters plus the config that shaped them. Propagation
    structures are derived from whatever graph a forward pass receives."""

    def __init__(self, config: GnnConfig, num_features: int, num_classes: int,
                 params: list, param_names: list):
        self.config = config
        self.num_features = int(num_features)
        self.num_classes = int(num_classes)
        self.params = []
        for p in params:
            arr = np.asarray(p.data if isinstance(p, T.Tensor) else p,
                             dtype=np.float64).copy()
            arr.setflags(write=False)
            self.params.append(T.Tensor(arr, _check=False))
        self.param_names = list(param_names)
        self.loss_history: list = []  # per-epoch training loss, not serialized


def _layer_dims(cfg: GnnConfig, num_features: int, num_classes: int) -> list:
    dims = [num_features] + [cfg.hidden_dim] * (cfg.depth - 1) + [num_classes]
    return list(zip(dims[:-1], dims[1:]))


def _init_params(cfg: GnnConfig, num_features: int, num_classes: int,
                 rng: SeededRng) -> tuple:
    """Glorot-uniform tensors in a fixed order; names mirror the layout."""

    def glorot(fan_in, fan_out, *shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return T.Tensor(rng.uniform(-limit, limit, size=shape),
                        requires_grad=True)

    params, names = [], []
    for layer, (d_in, d_out) in enumerate(_layer_dims(cfg, num_features,
                                                      num_classes)):
        if cfg.arch == "gcn":
            params.append(glorot(d_in, d_out, d_in, d_out))
            names.append(f"layer{layer}.w")
        elif cfg.arch == "sage":
            params.append(glorot(d_in, d_out, d_in, d_out))
            names.append(f"layer{layer}.w_self")
            params.append(glorot(d_in, d_out, d_in, d_out))
            names.append(f"layer{layer}.w_neigh")
        else:
            heads = cfg.num_heads
            head_dim = d_out if layer == cfg.depth - 1 else d_out // heads
            params.append(glorot(d_in, heads * head_dim, d_in, heads * head_dim))
            names.append(f"layer{layer}.w")
            for side in ("a_src", "a_dst"):
                params.append(glorot(2 * head_dim, 1, heads, head_dim))
                names.append(f"layer{layer}.{side}")
    return params, names


def _forward_logits(cfg: GnnConfig, params: list, g: Graph, features,
                    structures, dropout_rng: SeededRng | None) -> T.Tensor:
    """Shared forward pass; dropout applied between layers only when a
    dropout stream is supplied (training)."""
    h = T.as_tensor(features)
    if h.data.shape[1] != g.num_features:
        raise ValueError("feature width does not match graph")
    i = 0
    for layer in range(cfg.depth):
        final = layer == cfg.depth - 1
        if cfg.arch == "gcn":
            h = _gcn_apply(structures, h, params[i], activation=not final)
            i += 1
        elif cfg.arch == "sage":
            h = _sage_apply(structures, h, params[i], params[i + 1],
                            activation=not final)
            i += 2
        else:
            src, dst = structures
            h = _gat_apply(src, dst, g.num_nodes, h, params[i],
                           params[i + 1], params[i + 2], cfg.num_heads,
                           average_heads=final)
            i += 3
            if not final:
                h = T.apply_activation(h, "elu")
        if not final and dropout_rng is not None and cfg.dropout_p > 0:
            h = T.dropout(h, cfg.dropout_p, dropout_rng)
    return h


def _build_structures(cfg: GnnConfig, g: Graph):
    if cfg.arch == "gcn":
        return gcn_propagation(g)
    if cfg.arch == "sage":
        return mean_aggregation(g)
    return attention_edges(g)


def train(g: Graph, cfg: GnnConfig) -> GnnModel:
    """Full-batch Adam on masked cross-entropy, deterministic per seed."""
    if not g.train_mask.any():
        raise ValueError("train mask is empty")
    if g.num_classes < 2:
        raise ValueError("need at least two classes to classify")
    rng = SeededRng(cfg.seed)
    params, names = _init_params(cfg, g.num_features, g.num_classes,
                                 rng.spawn("init"))
    dropout_rng = rng.spawn("dropout")
    structures = _build_structures(cfg, g)
    opt = T.AdamState.for_params(params, lr=cfg.lr)
    features = T.Tensor(g.features)
    losses = []
    for epoch in range(cfg.epochs):
        try:
            with T.tape() as tp:
                logits = _forward_logits(cfg, params, g, features,
                                         structures, dropout_rng)
                post = T.softmax_rows(logits)
                loss = T.cross_entropy(post, g.labels, g.train_mask)
            grads_obj = tp.backward(loss)
        except T.NonFiniteError as err:
            raise RuntimeError(
                f"training diverged at epoch {epoch}: {err}") from err
        grads = [grads_obj.of(p) + cfg.weight_decay * p.data for p in params]
        params = T.adam_step(params, grads, opt)
        losses.append(loss.item())
    model = GnnModel(cfg, g.num_features, g.num_classes, params, names)
    model.loss_history = losses
    return model


def forward_posteriors(m: GnnModel, g: Graph, features=None) -> T.Tensor:
    """Differentiable posterior matrix (dropout off). `features` overrides
    the graph's feature matrix, e.g. with a grad-tracked tensor."""
    if g.num_features != m.num_features:
        raise ValueError(
            f"graph has {g.num_features} features, model expects {m.num_features}")
    feats = T.as_tensor(g.features) if features is None else T.as_tensor(features)
    structures = _build_structures(m.config, g)
    logits = _forward_logits(m.config, m.params, g, feats, structures, None)
    return T.softmax_rows(logits)


def predict_posteriors(m: GnnModel, g: Graph, node_ids=None) -> Posteriors:
    """Query API: posterior rows for the requested nodes (all by default)."""
    probs = forward_posteriors(m, g).data
    if node_ids is not None:
        probs = probs[np.asarray(node_ids, dtype=np.int64)]
    return Posteriors(probs=probs)


def accuracy_from_posteriors(probs: np.ndarray, labels, mask) -> float:
    """Argmax-match rate over masked nodes; ties go to the lowest class."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no nodes")
    pred = np.asarray(probs).argmax(axis=1)
    return float((pred[mask] == np.asarray(labels)[mask]).mean())


def accuracy(m: GnnModel, g: Graph, mask) -> float:
    return accuracy_from_posteriors(predict_posteriors(m, g).probs,
                                    g.labels, mask)


# ---------------------------------------------------------------------------
# Serialization

def save_model(m: GnnModel, path) -> None:
    doc = {
        "config": asdict(m.config),
        "num_features": m.num_features,
        "num_classes": m.num_classes,
        "params": [
            {"name": name, "shape": list(p.shape),
             "values": p.data.reshape(-1).tolist()}
            for name, p in zip(m.param_names, m.params)
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path) -> GnnModel:
    doc = json.loads(Path(path).read_text())
    cfg = GnnConfig(**doc["config"])
    params = [np.array(p["values"], dtype=np.float64).reshape(p["shape"])
              for p in doc["params"]]
    names = [p["name"] for p in doc["params"]]
    return GnnModel(cfg, doc["num_features"], doc["num_classes"], params, names)
