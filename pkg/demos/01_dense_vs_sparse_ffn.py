"""Dense feed-forward blocks vs their sparse expert form.

Walks through the core conversion machinery: cluster a block's input weights
into experts, split, gate tokens to experts, and verify the two exactness
guarantees that make switching safe: selecting all experts reproduces the
dense computation bit for bit, and experts no token selected receive
exactly-zero gradients.
"""

import numpy as np

from ssdlab import (
    FFNWeights,
    balanced_kmeans,
    compute_centroids,
    ffn_forward,
    gate,
    make_rng,
    merge_experts,
    smoe_backward,
    smoe_forward,
    split_ffn,
)

rng = make_rng(0)
d_model, d_ff, num_experts = 32, 128, 8

print("== building a dense feed-forward block ==")
w = FFNWeights(
    rng.normal(0, 0.2, (d_ff, d_model)), rng.normal(0, 0.2, d_ff),
    rng.normal(0, 0.2, (d_model, d_ff)), rng.normal(0, 0.2, d_model),
)
x = rng.standard_normal((6, d_model))
y_dense, hidden, _ = ffn_forward(w, x)
print(f"d_model={d_model}, d_ff={d_ff}; input {x.shape} -> output {y_dense.shape}")
print(f"hidden sparsity of this random block: {(hidden == 0).mean():.2f}")

print("\n== clustering neurons into experts ==")
outcome = balanced_kmeans(w.w_in, num_experts, rng=rng)
print(f"{num_experts} experts x {d_ff // num_experts} neurons, "
      f"WCSS = {outcome.wcss:.1f}")

m = split_ffn(w, outcome.partition, active_experts=2)
centroids = compute_centroids(m)
print(f"centroid matrix: {centroids.shape} (mean of each expert's rows)")

print("\n== gating ==")
decision = gate(m, x)
for t in range(3):
    chosen = np.flatnonzero(decision.selected[t])
    print(f"token {t}: scores {np.round(decision.scores[t], 2)} -> experts {chosen}")

print("\n== exactness guarantee 1: selecting everything is the dense block ==")
m_full = split_ffn(w, outcome.partition, active_experts=num_experts)
y_full, _, _, _ = smoe_forward(m_full, x)
print(f"max |dense - full-sparse| = {np.max(np.abs(y_dense - y_full))} "
      f"(bitwise equal: {np.array_equal(y_dense, y_full)})")
back = merge_experts(m_full)
print("split -> merge recovers parameters bitwise:",
      all(np.array_equal(getattr(back, f), getattr(w, f))
          for f in ("w_in", "b_in", "w_out", "b_out")))

print("\n== exactness guarantee 2: unselected experts get zero gradient ==")
y, decision, _, cache = smoe_forward(m, x)
_, grads = smoe_backward(m, cache, np.ones_like(y))
for e in range(num_experts):
    rows = m.expert_rows(e)
    touched = decision.selected[:, e].sum()
    grad_norm = np.abs(grads["w_in"][rows]).max()
    print(f"expert {e}: selected by {touched} tokens, "
          f"max |grad w_in| = {grad_norm:.4f}")

print("\n== conversion-policy comparison: clustered vs random split ==")
# a random balanced split scatters co-activating neurons across experts, so a
# K<N forward strays much further from the dense output than a clustered split
from ssdlab.clustering import Partition

k = 2
random_assign = np.repeat(np.arange(num_experts), d_ff // num_experts)
rng.shuffle(random_assign)
for name, part in (("clustered", outcome.partition),
                   ("random", Partition(random_assign, num_experts))):
    mk = split_ffn(w, part, active_experts=k)
    yk, _, _, _ = smoe_forward(mk, x)
    gap = np.abs(yk - y_dense).mean()
    print(f"{name:9s} split, K={k}/{num_experts}: mean |y_sparse - y_dense| = {gap:.4f}")
