"""Feature poisoning of a partial graph by projected gradient ascent.

The adversary trains a shadow model on their partial graph, then walks
the features of one target class up the gradient of a combined loss:
an attraction term pulling linked posteriors together, a repulsion term
pushing sampled unlinked posteriors apart, and a cross-entropy term
keeping the features useful for the victim's task. Labels and topology
are never touched.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gnn
from . import tensor as T
from .graphs import PartialGraph, sample_unlinked_pairs
from .rng import SeededRng

_GRADIENT_MODES = ("raw", "sign")


@dataclass(frozen=True)
class PoisonConfig:
    target_class: int
    step_size: float = 0.01
    iterations: int = 100
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 1.0
    unlinked_sample_cap: int | None = None
    gradient_mode: str = "sign"
    # "auto" -> step_size * iterations; None -> unconstrained
    linf_radius: float | str | None = "auto"
    allow_negative_ce: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.lam < 0 and not self.allow_negative_ce:
            raise ValueError(
                "lam < 0 requires allow_negative_ce (sensitivity studies)")
        if self.gradient_mode not in _GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {_GRADIENT_MODES}")
        if isinstance(self.linf_radius, str) and self.linf_radius != "auto":
            raise ValueError("linf_radius must be a float, None, or 'auto'")
        if isinstance(self.linf_radius, (int, float)) and self.linf_radius <= 0:
            raise ValueError("linf_radius must be > 0 when set")
        if self.unlinked_sample_cap is not None and self.unlinked_sample_cap < 0:
            raise ValueError("unlinked_sample_cap must be >= 0")

    @property
    def resolved_radius(self) -> float | None:
        if self.linf_radius == "auto":
            r = self.step_size * self.iterations
            return r if r > 0 else None
        return self.linf_radius


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted components of one loss evaluation."""

    attraction: float
    repulsion: float
    ce: float
    total: float

    def __post_init__(self):
        if self.attraction > 1e-12:
            raise ValueError("attraction term must be <= 0")
        if self.repulsion < 0 or self.ce < 0:
            raise ValueError("repulsion and ce terms must be >= 0")


def combine_losses(cfg: PoisonConfig, attraction: float, repulsion: float,
                   ce: float) -> LossBreakdown:
    total = cfg.alpha * attraction + cfg.beta * repulsion + cfg.lam * ce
    return LossBreakdown(attraction=attraction, repulsion=repulsion,
                         ce=ce, total=total)


@dataclass(frozen=True)
class TraceRow:
    """One trace line: loss breakdown plus distortion at evaluation time."""

    iteration: int
    attraction: float
    repulsion: float
    ce: float
    total: float
    distortion: float


# ---------------------------------------------------------------------------
# Loss terms (differentiable through the posterior tensor)

def _post_tensor(posteriors) -> T.Tensor:
    if isinstance(posteriors, gnn.Posteriors):
        return T.Tensor(posteriors.probs)
    return T.as_tensor(posteriors)


def attraction_loss(posteriors, linked_pairs) -> T.Tensor:
    """Negated sum of squared posterior distances over linked pairs:
    ascending this loss pulls linked posteriors together."""
    p = _post_tensor(posteriors)
    pairs = np.asarray(linked_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        warnings.warn("no linked pairs; attraction term is 0", stacklevel=2)
        return T.Tensor(0.0)
    diff = T.sub(T.gather_rows(p, pairs[:, 0]), T.gather_rows(p, pairs[:, 1]))
    return T.mul(T.sum_all(T.mul(diff, diff)), -1.0)


def repulsion_loss(posteriors, unlinked_pairs) -> T.Tensor:
    """Sum of (1 - cos(p_u, p_v))^2 over unlinked pairs: ascending this
    loss pushes unlinked posteriors apart."""
    p = _post_tensor(posteriors)
    pairs = np.asarray(unlinked_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return T.Tensor(0.0)
    pu = T.gather_rows(p, pairs[:, 0])
    pv = T.gather_rows(p, pairs[:, 1])
    dot = T.sum_axis(T.mul(pu, pv), 1)
    nu = T.sqrt(T.sum_axis(T.mul(pu, pu), 1))
    nv = T.sqrt(T.sum_axis(T.mul(pv, pv), 1))
    gap = T.sub(1.0, T.div(dot, T.mul(nu, nv)))
    return T.sum_all(T.mul(gap, gap))


def total_loss(posteriors, partial: PartialGraph, cfg: PoisonConfig,
               rng: SeededRng | None = None,
               unlinked_pairs=None) -> tuple:
    """Combined objective over the partial graph.

    Unlinked pairs are freshly sampled from the supplied rng (capped at
    the linked-pair count by default) unless given explicitly. Returns
    (scalar tensor, LossBreakdown).
    """
    g = partial.graph
    linked = g.edges
    if unlinked_pairs is None:
        cap = len(linked) if cfg.unlinked_sample_cap is None \
            else cfg.unlinked_sample_cap
        if rng is None:
            rng = SeededRng(cfg.seed).spawn("unlinked")
        unlinked_pairs = sample_unlinked_pairs(g, cap, rng)
    pt = _post_tensor(posteriors)
    a = attraction_loss(pt, linked) if len(linked) else T.Tensor(0.0)
    r = repulsion_loss(pt, unlinked_pairs)
    c = T.cross_entropy(pt, g.labels)
    scaled = T.add(T.add(T.mul(a, cfg.alpha), T.mul(r, cfg.beta)),
                   T.mul(c, cfg.lam))
    return scaled, combine_losses(cfg, a.item(), r.item(), c.item())


# ---------------------------------------------------------------------------
# PGD driver

def distortion(clean: PartialGraph, poisoned: PartialGraph) -> float:
    """Largest absolute per-entry feature change between the two graphs."""
    if not np.array_equal(clean.parent_ids, poisoned.parent_ids):
        raise ValueError("partial graphs cover different nodes")
    a, b = clean.graph.features, poisoned.graph.features
    if a.shape != b.shape:
        raise ValueError("feature shapes differ")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


@dataclass(frozen=True)
class PoisonResult:
    poisoned: PartialGraph
    trace: list
    shadow: gnn.GnnModel


def pgd_poison(partial: PartialGraph, shadow_cfg: gnn.GnnConfig,
               cfg: PoisonConfig) -> PoisonResult:
    """Gradient-ascent feature poisoning of the target class.

    Trains a shadow model on the clean partial graph, then for each
    iteration backpropagates the combined loss to the input features and
    steps only the rows labeled with the target class, optionally
    projecting onto an L-inf ball around the original features. The trace
    holds one row per evaluation (iterations 0..N; row N is the final
    state). The input graph is never modified.
    """
    g = partial.graph
    target = g.labels == cfg.target_class
    if not target.any():
        raise ValueError(
            f"partial graph has no nodes of class {cfg.target_class}")
    shadow = gnn.train(g, shadow_cfg)

    orig = g.features
    x = orig.copy()
    rng = SeededRng(cfg.seed).spawn("unlinked")
    radius = cfg.resolved_radius
    trace = []
    for it in range(cfg.iterations):
        xt = T.Tensor(x, requires_grad=True)
        with T.tape() as tp:
            post = gnn.forward_posteriors(shadow, g, features=xt)
            loss, br = total_loss(post, partial, cfg, rng=rng)
        grad = tp.backward(loss).of(xt)
        trace.append(TraceRow(iteration=it, attraction=br.attraction,
                              repulsion=br.repulsion, ce=br.ce,
                              total=br.total,
                              distortion=float(np.max(np.abs(x - orig)))))
        if cfg.step_size != 0.0:
            step = np.sign(grad) if cfg.gradient_mode == "sign" else grad
            x[target] += cfg.step_size * step[target]
            if radius is not None:
                x[target] = np.clip(x[target], orig[target] - radius,
                                    orig[target] + radius)

    # final evaluation at the arrived-at features
    post = gnn.forward_posteriors(shadow, g, features=T.Tensor(x))
    _, br = total_loss(post, partial, cfg, rng=rng)
    trace.append(TraceRow(iteration=cfg.iterations, attraction=br.attraction,
                          repulsion=br.repulsion, ce=br.ce, total=br.total,
                          distortion=float(np.max(np.abs(x - orig)))))

    poisoned = PartialGraph(parent_ids=partial.parent_ids,
                            graph=g.with_features(x))
    return PoisonResult(poisoned=poisoned, trace=trace, shadow=shadow)


def write_trace_csv(trace, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "attraction", "repulsion", "ce", "total",
                    "distortion"])
        for row in trace:
            w.writerow([row.iteration, repr(row.attraction),
                        repr(row.repulsion), repr(row.ce), repr(row.total),
                        repr(row.distortion)])
