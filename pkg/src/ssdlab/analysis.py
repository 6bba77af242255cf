"""Activation-sparsity measurement, Adjusted Rand Index, and checkpoint-to-
checkpoint activation-pattern similarity.

Sparsity is the fraction of exactly-zero entries in the post-ReLU hidden
states; no epsilon thresholding, since ReLU produces exact zeros. Pattern
similarity clusters both checkpoints' feed-forward input weights and compares
the groupings with ARI, which is chance-corrected: 1 for identical groupings,
about 0 for unrelated ones, with -0.5 the floor for balanced partitions.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from ssdlab.clustering import Partition, cluster_with_warmstart


@dataclass
class ActivationSample:
    """Per-layer post-ReLU hidden matrices (tokens x d_ff) captured at a step."""

    hiddens: list
    step: int = 0

    def __post_init__(self):
        for h in self.hiddens:
            if h.size and h.min() < 0:
                raise ValueError("post-ReLU activations must be >= 0")


@dataclass
class SimilarityReport:
    per_layer_ari: list
    mean_ari: float
    step_a: int
    step_b: int


def activation_sparsity(sample: ActivationSample) -> list:
    """Per-layer fraction of exactly-zero entries."""
    return [float((h == 0.0).mean()) for h in sample.hiddens]


def adjusted_rand_index(a: Partition, b: Partition) -> float:
    """Hubert-Arabie ARI from the contingency table of the two labelings."""
    la = np.asarray(a.assignment)
    lb = np.asarray(b.assignment)
    if la.shape != lb.shape:
        raise ValueError("partitions must have equal length")
    n = la.size
    if n < 2:
        raise ValueError("ARI needs at least 2 elements")
    contingency = np.zeros((la.max() + 1, lb.max() + 1), dtype=np.int64)
    np.add.at(contingency, (la, lb), 1)
    sum_cells = sum(comb(int(c), 2) for c in contingency.reshape(-1))
    sum_a = sum(comb(int(c), 2) for c in contingency.sum(axis=1))
    sum_b = sum(comb(int(c), 2) for c in contingency.sum(axis=0))
    expected = sum_a * sum_b / comb(n, 2)
    denom = 0.5 * (sum_a + sum_b) - expected
    if denom == 0.0:
        # both partitions trivial (all-singleton or single-cluster): identical
        return 1.0
    return (sum_cells - expected) / denom


def layer_seed_base(rng: np.random.Generator) -> int:
    """One draw that seeds all per-layer clusterings of a similarity call."""
    return int(rng.integers(0, 2 ** 63 - 1))


def _layer_rng(base: int, layer: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base, layer])))


def pattern_similarity(ckpt_a, ckpt_b, num_experts: int,
                       rng: np.random.Generator,
                       warm_chain: bool = True) -> SimilarityReport:
    """Per-layer ARI between the two checkpoints' neuron groupings.

    Each layer is clustered with the same derived seed on both sides, so
    identical checkpoints score exactly 1. With warm_chain (the training-time
    behavior) checkpoint b's clustering is initialized from checkpoint a's
    result; warm_chain=False clusters the two sides independently.
    """
    if ckpt_a.config.to_dict() != ckpt_b.config.to_dict():
        raise ValueError("checkpoints have different model configs")
    base = layer_seed_base(rng)
    per_layer = []
    for layer in range(ckpt_a.config.n_layers):
        key = f"block{layer}.ffn_w_in"
        out_a = cluster_with_warmstart(ckpt_a.params[key], num_experts, None,
                                       _layer_rng(base, layer))
        prev = out_a.partition if warm_chain else None
        out_b = cluster_with_warmstart(ckpt_b.params[key], num_experts, prev,
                                       _layer_rng(base, layer))
        per_layer.append(adjusted_rand_index(out_a.partition, out_b.partition))
    return SimilarityReport(
        per_layer_ari=per_layer,
        mean_ari=float(np.mean(per_layer)),
        step_a=getattr(ckpt_a, "step", 0),
        step_b=getattr(ckpt_b, "step", 0),
    )
