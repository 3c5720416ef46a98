"""Graph builders shared across test modules."""

import numpy as np

from linkleak.graphs import (Graph, PartialGraph, induced_subgraph,
                             sample_community_graph)
from linkleak.rng import SeededRng


def as_partial(g: Graph) -> PartialGraph:
    """Wrap a whole graph as an attacker-held partial graph (all nodes,
    everything train-masked)."""
    full = Graph(g.features, g.labels, g.edges, g.num_classes,
                 train_mask=np.ones(g.num_nodes, dtype=bool), name=g.name)
    return induced_subgraph(full, np.arange(g.num_nodes))


def make_random_graph(seed, n=12, d=5, c=3, p=0.3) -> Graph:
    """Erdos-Renyi graph with random features and round-robin labels."""
    rng = SeededRng(seed)
    features = rng.normal(size=(n, d))
    labels = np.arange(n) % c
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)
             if rng.uniform() < p]
    return Graph(features, labels, np.array(edges, dtype=np.int64).reshape(-1, 2),
                 num_classes=c, name=f"er{seed}")


def make_sbm(seed, n=60, d=8, c=3, p_in=0.25, p_out=0.02, sep=1.5) -> Graph:
    """Stochastic block model with class-separated Gaussian features.

    Blocks are contiguous id ranges; intra-block edges appear with p_in,
    cross-block with p_out; feature means are sep-scaled class prototypes.
    """
    rng = SeededRng(seed)
    labels = np.arange(n) % c
    protos = rng.normal(size=(c, d))
    protos = sep * protos / np.linalg.norm(protos, axis=1, keepdims=True)
    features = protos[labels] + rng.normal(scale=0.5, size=(n, d))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            prob = p_in if labels[i] == labels[j] else p_out
            if rng.uniform() < prob:
                edges.append((i, j))
    return Graph(features, labels, np.array(edges, dtype=np.int64).reshape(-1, 2),
                 num_classes=c, name=f"sbm{seed}")


# kept under its old name so test modules read uniformly; the generator
# itself graduated into the library for use by demo scripts
make_community_sbm = sample_community_graph
