"""End-to-end attack orchestration.

One run: split the graph, hand the attacker a partial subgraph, poison
its target-class features against a shadow model, let the vendor train
on the full graph with the poisoned contribution merged in, then train
link detectors on the attacker's pairs and measure how much linkage the
vendor's posteriors leak. Sweeps cover online (batched) vendor training,
shadow/vendor architecture transfer, and loss-weight / depth /
distortion-budget ablations. Every stage draws from its own derived seed
stream so toggling one stage never perturbs another.
"""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import gnn, metrics, poison
from . import tensor as T
from .detector import build_pair_dataset, init_attn_from_mlp, train_attn, train_mlp
from .graphs import Graph, PartialGraph, load_canonical, sample_partial, split_train_test
from .metrics import ExperimentReport
from .poison import PoisonConfig
from .rng import SeededRng, derive_seed

_DETECTORS = ("mlp", "attn")
_MODES = ("offline", "online", "blackbox")
ARCH_GRID = ("gcn", "sage", "gat")

REG_WEIGHT_GRID = tuple((a, b, l)
                        for a in (0.1, 1.0, 10.0)
                        for b in (0.01, 0.1, 1.0)
                        for l in (0.1, 1.0))
DEPTH_GRID = (1, 2, 3, 4, 5)
DISTORTION_GRID = (0.0, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class AttackRunConfig:
    """Everything one experiment needs; JSON-mirrorable field names."""

    dataset: str | None = None
    vendor: gnn.GnnConfig = gnn.GnnConfig()
    shadow: gnn.GnnConfig = gnn.GnnConfig()
    poison: PoisonConfig = PoisonConfig(target_class=1)
    detector: str = "attn"
    poisoning: bool = True
    target_classes: tuple = (1,)
    seeds: tuple = tuple(range(10))
    mode: str = "offline"
    batches: int = 8
    poison_position: int = 1
    train_fraction: float = 0.8
    partial_fraction: float = 0.1
    n_eval_pairs: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "target_classes",
                           tuple(int(k) for k in self.target_classes))
        object.__setattr__(self, "seeds",
                           tuple(int(s) for s in self.seeds))
        if self.detector not in _DETECTORS:
            raise ValueError(f"detector must be one of {_DETECTORS}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.target_classes:
            raise ValueError("need at least one target class")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 < self.partial_fraction <= 1.0:
            raise ValueError("partial_fraction must be in (0, 1]")
        if self.n_eval_pairs < 2:
            raise ValueError("n_eval_pairs must be at least 2")
        if self.mode == "online":
            if self.batches < 1:
                raise ValueError("online mode needs batches >= 1")
            if not 1 <= self.poison_position <= self.batches:
                raise ValueError("poison_position must lie in 1..batches")
        if self.mode == "blackbox" and self.shadow.arch == self.vendor.arch:
            raise ValueError("blackbox mode needs distinct shadow and "
                             "vendor architectures")


def config_to_dict(cfg: AttackRunConfig) -> dict:
    doc = asdict(cfg)
    doc["target_classes"] = list(cfg.target_classes)
    doc["seeds"] = list(cfg.seeds)
    return doc


def config_from_dict(doc: dict) -> AttackRunConfig:
    doc = dict(doc)
    for key, cls in (("vendor", gnn.GnnConfig), ("shadow", gnn.GnnConfig),
                     ("poison", PoisonConfig)):
        if key in doc and isinstance(doc[key], dict):
            doc[key] = cls(**doc[key])
    return AttackRunConfig(**doc)


# ---------------------------------------------------------------------------
# Run ledger

_AGG_METRICS = ("overall_auc", "intra_class_auc", "model_acc_clean",
                "model_acc_poisoned", "homophily_shift")


@dataclass
class RunLedger:
    """Per-cell reports plus per-seed failure diagnostics. Traces and
    projections are bulky side artifacts: written by emit_reports, not
    serialized into ledger.json."""

    cells: dict = field(default_factory=dict)   # key -> [ExperimentReport]
    errors: dict = field(default_factory=dict)  # key -> {seed: message}
    traces: dict = field(default_factory=dict, compare=False, repr=False)
    projections: dict = field(default_factory=dict, compare=False, repr=False)

    def add(self, cell: str, report: ExperimentReport) -> None:
        self.cells.setdefault(cell, []).append(report)

    def fail(self, cell: str, seed: int, message: str) -> None:
        self.errors.setdefault(cell, {})[int(seed)] = message
        self.cells.setdefault(cell, [])

    def aggregate(self, cell: str) -> dict:
        reports = self.cells.get(cell, [])
        out = {"n_reports": len(reports)}
        for name in _AGG_METRICS:
            vals = np.array([getattr(r, name) for r in reports], dtype=float)
            if len(vals):
                out[name] = {"mean": float(vals.mean()),
                             "std": float(vals.std())}
        return out

    def to_json(self) -> str:
        doc = {"cells": {}}
        for cell in self.cells:
            doc["cells"][cell] = {
                "aggregate": self.aggregate(cell),
                "errors": {str(s): m
                           for s, m in self.errors.get(cell, {}).items()},
                "reports": [asdict(r) for r in self.cells[cell]],
            }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunLedger":
        doc = json.loads(text)
        ledger = cls()
        for cell, body in doc["cells"].items():
            ledger.cells[cell] = [ExperimentReport(**r)
                                  for r in body["reports"]]
            errs = {int(s): m for s, m in body.get("errors", {}).items()}
            if errs:
                ledger.errors[cell] = errs
        return ledger


# ---------------------------------------------------------------------------
# Single-seed pipeline

def _load_graph(cfg: AttackRunConfig, graph) -> Graph:
    if graph is not None:
        return graph
    if cfg.dataset is None:
        raise ValueError("config has no dataset path and no graph was given")
    return load_canonical(cfg.dataset)


def _prepare(g_full: Graph, cfg: AttackRunConfig, seed: int):
    g = split_train_test(g_full, cfg.train_fraction,
                         derive_seed(seed, "split"))
    partial = sample_partial(g, cfg.partial_fraction,
                             derive_seed(seed, "partial"))
    return g, partial


def _poison_stage(partial: PartialGraph, cfg: AttackRunConfig, k: int,
                  seed: int):
    if not cfg.poisoning:
        return partial, None
    shadow_cfg = replace(cfg.shadow, seed=derive_seed(seed, "shadow"))
    pcfg = replace(cfg.poison, target_class=k,
                   seed=derive_seed(seed, "poison"))
    result = poison.pgd_poison(partial, shadow_cfg, pcfg)
    return result.poisoned, result.trace


def _merge_contribution(g: Graph, partial: PartialGraph,
                        poisoned: PartialGraph) -> Graph:
    feats = g.features.copy()
    feats[partial.parent_ids] = poisoned.graph.features
    return g.with_features(feats)


def _echo(cfg: AttackRunConfig, k: int, extra: dict | None = None) -> dict:
    doc = {
        "mode": cfg.mode, "detector": cfg.detector,
        "poisoning": cfg.poisoning, "target_class": int(k),
        "vendor_arch": cfg.vendor.arch, "vendor_depth": cfg.vendor.depth,
        "shadow_arch": cfg.shadow.arch, "shadow_depth": cfg.shadow.depth,
        "step_size": cfg.poison.step_size,
        "iterations": cfg.poison.iterations,
        "alpha": cfg.poison.alpha, "beta": cfg.poison.beta,
        "lam": cfg.poison.lam, "gradient_mode": cfg.poison.gradient_mode,
        "train_fraction": cfg.train_fraction,
        "partial_fraction": cfg.partial_fraction,
    }
    doc.update(extra or {})
    return doc


def _train_detector(cfg: AttackRunConfig, ds, seed: int):
    mlp = train_mlp(ds, seed=derive_seed(seed, "mlp"))
    if cfg.detector == "mlp":
        return mlp
    warm = init_attn_from_mlp(mlp, seed=derive_seed(seed, "attn-init"))
    return train_attn(warm, ds, seed=derive_seed(seed, "attn"))


def _single_run(g_full: Graph, cfg: AttackRunConfig, k: int, seed: int,
                extra_echo: dict | None = None,
                vendor_trainer=None):
    """One (target class, seed) cell. `vendor_trainer(graph, poisoned)`
    overrides vendor training for online mode; it must return the model
    trained on the poisoned graph and one trained on the clean graph."""
    g, partial = _prepare(g_full, cfg, seed)
    poisoned, trace = _poison_stage(partial, cfg, k, seed)
    g_vendor = _merge_contribution(g, partial, poisoned)

    if vendor_trainer is None:
        vendor_cfg = replace(cfg.vendor, seed=derive_seed(seed, "vendor"))
        vendor = gnn.train(g_vendor, vendor_cfg)
        vendor_clean = vendor if not cfg.poisoning else gnn.train(g, vendor_cfg)
    else:
        vendor, vendor_clean = vendor_trainer(g, g_vendor, partial, seed)

    probs_partial = gnn.predict_posteriors(vendor, g_vendor,
                                           node_ids=partial.parent_ids)
    ds = build_pair_dataset(poisoned, probs_partial, k,
                            seed=derive_seed(seed, "pairs"))
    det = _train_detector(cfg, ds, seed)

    overall = metrics.link_auc(det, g_vendor, vendor, "all",
                               n_pairs=cfg.n_eval_pairs,
                               seed=derive_seed(seed, "eval-all"))
    intra = metrics.intra_class_auc(det, g_vendor, vendor, k,
                                    n_pairs=cfg.n_eval_pairs,
                                    seed=derive_seed(seed, "eval-intra"))
    acc_poisoned = gnn.accuracy(vendor, g_vendor, g_vendor.test_mask)
    acc_clean = gnn.accuracy(vendor_clean, g, g.test_mask)
    shift = metrics.homophily_shift(metrics.homophily_distribution(g),
                                    metrics.homophily_distribution(g_vendor))

    report = ExperimentReport(
        overall_auc=overall.auc, intra_class_auc=intra.auc, target_class=k,
        model_acc_clean=acc_clean, model_acc_poisoned=acc_poisoned,
        homophily_shift=shift, config=_echo(cfg, k, extra_echo), seed=seed)

    clean_probs = gnn.predict_posteriors(vendor_clean, g,
                                         node_ids=partial.parent_ids).probs
    phases = [("clean", clean_probs)]
    if cfg.poisoning:
        phases.append(("poisoned", probs_partial.probs))
    stacked = np.vstack([p for _, p in phases])
    node_labels = partial.graph.labels
    proj_labels = [f"{phase}:{int(c)}" for phase, _ in phases
                   for c in node_labels]
    try:  # side artifact only: a degenerate projection must not kill the run
        projection = (metrics.pca2d(stacked), proj_labels)
    except (ValueError, RuntimeError):
        projection = None
    return report, trace, projection


def _run_cells(g_full: Graph, cell_plans: list) -> RunLedger:
    """cell_plans rows: (cell_key, cfg, target_class, extra_echo,
    vendor_trainer)."""
    ledger = RunLedger()
    for cell, cfg, k, extra, trainer in cell_plans:
        for seed in cfg.seeds:
            try:
                report, trace, projection = _single_run(
                    g_full, cfg, k, seed, extra, trainer)
            except Exception as err:  # record the diagnostic, keep sweeping
                ledger.fail(cell, seed, f"{type(err).__name__}: {err}")
                continue
            ledger.add(cell, report)
            if trace is not None:
                ledger.traces[f"{cell}/seed{seed}"] = trace
            if projection is not None:
                ledger.projections[f"{cell}/seed{seed}"] = projection
    return ledger


# ---------------------------------------------------------------------------
# Offline attack matrix

def run_attack(cfg: AttackRunConfig, graph: Graph | None = None) -> RunLedger:
    """The end-to-end attack, one cell per target class."""
    g_full = _load_graph(cfg, graph)
    plans = [(f"class={k}", cfg, k, None, None) for k in cfg.target_classes]
    return _run_cells(g_full, plans)


# ---------------------------------------------------------------------------
# Online (batched) vendor training

def _partition_batches(g: Graph, partial: PartialGraph, n_batches: int,
                       position: int, seed: int) -> list:
    """Split train nodes into near-equal batches with the attacker's
    nodes pinned to the batch at `position` (1-based)."""
    train_ids = np.flatnonzero(g.train_mask)
    adv = partial.parent_ids
    adv_set = set(int(i) for i in adv)
    rest = np.array([i for i in train_ids if int(i) not in adv_set],
                    dtype=np.int64)
    order = SeededRng(seed).permutation(len(rest))
    queue = rest[order]

    n = len(train_ids)
    sizes = [n // n_batches + (1 if i < n % n_batches else 0)
             for i in range(n_batches)]
    batches = [[] for _ in range(n_batches)]
    batches[position - 1].extend(int(i) for i in adv)
    qi = 0
    for i in range(n_batches):
        want = max(0, sizes[i] - len(batches[i]))
        take = queue[qi:qi + want]
        batches[i].extend(int(t) for t in take)
        qi += len(take)

    for i, batch in enumerate(batches):
        members = set(batch)
        internal = sum(1 for u, v in g.edges
                       if int(u) in members and int(v) in members)
        if internal == 0:
            warnings.warn(f"online batch {i + 1} has no internal edges")
    return [np.array(sorted(b), dtype=np.int64) for b in batches]


def _stage_epochs(total: int, n_batches: int) -> list:
    base, rem = divmod(total, n_batches)
    return [base + (1 if i < rem else 0) for i in range(n_batches)]


def _train_stages(cfg: gnn.GnnConfig, g: Graph, stages: list) -> gnn.GnnModel:
    """Sequential full-batch training: one parameter set, one optimizer,
    one dropout stream across all stages. A single stage covering all
    train nodes reproduces gnn.train bit for bit."""
    if g.num_classes < 2:
        raise ValueError("need at least two classes to classify")
    rng = SeededRng(cfg.seed)
    params, names = gnn._init_params(cfg, g.num_features, g.num_classes,
                                     rng.spawn("init"))
    dropout_rng = rng.spawn("dropout")
    structures = gnn._build_structures(cfg, g)
    opt = T.AdamState.for_params(params, lr=cfg.lr)
    losses = []
    for stage_no, (feats, mask, n_epochs) in enumerate(stages, start=1):
        if not mask.any():
            raise ValueError(f"stage {stage_no} train mask is empty")
        features = T.Tensor(feats)
        for epoch in range(n_epochs):
            try:
                with T.tape() as tp:
                    logits = gnn._forward_logits(cfg, params, g, features,
                                                 structures, dropout_rng)
                    post = T.softmax_rows(logits)
                    loss = T.cross_entropy(post, g.labels, mask)
                grads_obj = tp.backward(loss)
            except T.NonFiniteError as err:
                raise RuntimeError(f"training diverged at stage {stage_no} "
                                   f"epoch {epoch}: {err}") from err
            grads = [grads_obj.of(p) + cfg.weight_decay * p.data
                     for p in params]
            params = T.adam_step(params, grads, opt)
            losses.append(loss.item())
    model = gnn.GnnModel(cfg, g.num_features, g.num_classes, params, names)
    model.loss_history = losses
    return model


def _online_trainer(cfg: AttackRunConfig, position: int):
    """Vendor trainer hook: batched arrival with the attacker's (possibly
    poisoned) contribution landing at `position`."""

    def trainer(g: Graph, g_vendor: Graph, partial: PartialGraph, seed: int):
        batches = _partition_batches(g, partial, cfg.batches, position,
                                     derive_seed(seed, "batches"))
        epochs = _stage_epochs(cfg.vendor.epochs, cfg.batches)
        vendor_cfg = replace(cfg.vendor, seed=derive_seed(seed, "vendor"))

        def stages(features_fn):
            mask = np.zeros(g.num_nodes, dtype=bool)
            out = []
            for i, batch in enumerate(batches, start=1):
                mask = mask.copy()
                mask[batch] = True
                out.append((features_fn(i), mask, epochs[i - 1]))
            return out

        poisoned_feats = lambda i: (g_vendor.features if i >= position
                                    else g.features)
        clean_feats = lambda i: g.features
        vendor = _train_stages(vendor_cfg, g, stages(poisoned_feats))
        if cfg.poisoning:
            vendor_clean = _train_stages(vendor_cfg, g, stages(clean_feats))
        else:
            vendor_clean = vendor
        return vendor, vendor_clean

    return trainer


def run_online(cfg: AttackRunConfig, graph: Graph | None = None) -> RunLedger:
    """Sweep the attacker's arrival position over every batch slot."""
    if cfg.mode != "online":
        cfg = replace(cfg, mode="online")
    g_full = _load_graph(cfg, graph)
    k = cfg.target_classes[0]
    plans = []
    for p in range(1, cfg.batches + 1):
        cell_cfg = replace(cfg, poison_position=p)
        plans.append((f"p={p}", cell_cfg, k,
                      {"batches": cfg.batches, "poison_position": p},
                      _online_trainer(cell_cfg, p)))
    return _run_cells(g_full, plans)


# ---------------------------------------------------------------------------
# Architecture transfer

def run_blackbox(cfg: AttackRunConfig, graph: Graph | None = None) -> RunLedger:
    """Full shadow x vendor architecture grid; diagonal cells are the
    matched-architecture baseline."""
    g_full = _load_graph(cfg, graph)
    k = cfg.target_classes[0]
    plans = []
    for shadow_arch, vendor_arch in product(ARCH_GRID, ARCH_GRID):
        cell_cfg = replace(cfg, mode="offline",
                           shadow=replace(cfg.shadow, arch=shadow_arch),
                           vendor=replace(cfg.vendor, arch=vendor_arch))
        plans.append((f"{shadow_arch}->{vendor_arch}", cell_cfg, k,
                      {"shadow_arch": shadow_arch,
                       "vendor_arch": vendor_arch}, None))
    return _run_cells(g_full, plans)


# ---------------------------------------------------------------------------
# Ablations

def run_ablation(cfg: AttackRunConfig, sweep: str,
                 graph: Graph | None = None) -> RunLedger:
    g_full = _load_graph(cfg, graph)
    k = cfg.target_classes[0]
    plans = []
    if sweep == "reg_weights":
        for a, b, l in REG_WEIGHT_GRID:
            cell_cfg = replace(cfg, poison=replace(cfg.poison, alpha=a,
                                                   beta=b, lam=l))
            plans.append((f"alpha={a},beta={b},lam={l}", cell_cfg, k,
                          {"sweep": sweep}, None))
    elif sweep == "depth":
        for depth in DEPTH_GRID:
            cell_cfg = replace(cfg, vendor=replace(cfg.vendor, depth=depth),
                               shadow=replace(cfg.shadow, depth=depth))
            plans.append((f"depth={depth}", cell_cfg, k, {"sweep": sweep},
                          None))
    elif sweep == "distortion":
        iters = cfg.poison.iterations
        if iters < 1:
            raise ValueError("distortion sweep needs iterations >= 1")
        for budget in DISTORTION_GRID:
            cell_cfg = replace(cfg, poison=replace(cfg.poison,
                                                   step_size=budget / iters))
            plans.append((f"budget={budget}", cell_cfg, k,
                          {"sweep": sweep, "budget": budget}, None))
    else:
        raise ValueError("sweep must be reg_weights, depth, or distortion")
    return _run_cells(g_full, plans)


# ---------------------------------------------------------------------------
# Output files

def _safe_name(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", key)


def emit_reports(ledger: RunLedger, out_dir) -> list:
    """Write ledger.json, the summary table, poisoning traces, and
    posterior projections. Returns the written paths."""
    if not ledger.cells:
        raise ValueError("ledger has no cells to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    ledger_path = out / "ledger.json"
    ledger_path.write_text(ledger.to_json() + "\n")
    written.append(ledger_path)

    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    summary = tables / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)  # cell keys may contain commas
        cols = ["cell", "n_reports"]
        for m in _AGG_METRICS:
            cols += [f"{m}_mean", f"{m}_std"]
        w.writerow(cols)
        for cell in sorted(ledger.cells):
            agg = ledger.aggregate(cell)
            row = [cell, agg["n_reports"]]
            for m in _AGG_METRICS:
                if m in agg:
                    row += [repr(agg[m]["mean"]), repr(agg[m]["std"])]
                else:
                    row += ["", ""]
            w.writerow(row)
    written.append(summary)

    if ledger.traces:
        traces = out / "traces"
        traces.mkdir(exist_ok=True)
        for key, trace in sorted(ledger.traces.items()):
            path = traces / f"{_safe_name(key)}.csv"
            poison.write_trace_csv(trace, path)
            written.append(path)

    if ledger.projections:
        pca = out / "pca"
        pca.mkdir(exist_ok=True)
        for key, (proj, labels) in sorted(ledger.projections.items()):
            path = pca / f"{_safe_name(key)}.csv"
            metrics.write_projection_csv(proj, labels, path)
            written.append(path)
    return written
