"""Sharing importance scores across layers.

Layers tend to agree on which tokens matter, which invites two shortcuts:
average the per-layer score vectors (optionally skipping high-entropy
layers whose distribution is near uniform), or compute scores once per
group of layers and reuse them. The demo shows both, plus the keep-set
overlap that justifies them.
"""

import numpy as np

from kvgate.cache import CompressionPlan
from kvgate.crosslayer import (
    LayerScoreBundle,
    aggregate_scores,
    index_reuse_plan,
    overlap_matrix,
    scores_with_reuse,
)
from kvgate.numerics import Rng
from kvgate.policies import aggregate_heads, score_knorm, select
from kvgate.teacher import TeacherConfig, TeacherModel

cfg = TeacherConfig(n_layers=4, d_model=32, n_heads=4, n_kv_heads=2,
                    d_ffn=64, vocab_size=16, seed=0)
teacher = TeacherModel(cfg)
plan = CompressionPlan(ratio=0.5, sink_count=2, local_window=4)
length = 48

tokens = Rng(21).integers(0, cfg.vocab_size, length)
trace = teacher.forward(tokens=tokens)
per_layer = [aggregate_heads(score_knorm(lt.k)) for lt in trace.layers]
keeps = [select(plan, s, np.arange(length)) for s in per_layer]

overlap = overlap_matrix(keeps)
print("keep-set overlap between layers (Jaccard):")
for row in overlap:
    print("  " + " ".join(f"{v:.2f}" for v in row))

bundle = LayerScoreBundle.from_scores(per_layer)
print("\nper-layer score entropies:",
      " ".join(f"{e:.3f}" for e in bundle.entropies))
pooled = aggregate_scores(bundle, "layer_mean")
gamma = float(np.median(bundle.entropies))
gated = aggregate_scores(bundle, "ent_skip_high", gamma=gamma)
included = int(np.sum(bundle.entropies <= gamma))
print(f"layer_mean equals the plain mean: "
      f"{np.array_equal(pooled, np.mean(bundle.scores, axis=0))}")
print(f"gating at entropy <= {gamma:.3f} keeps {included} of "
      f"{bundle.n_layers} layers; result differs from the plain mean: "
      f"{not np.array_equal(pooled, gated)}")

calls = {"n": 0}


def compute(layer):
    calls["n"] += 1
    return per_layer[layer]


shared = scores_with_reuse(cfg.n_layers, 2, compute)
print(f"\nreuse plan for groups of 2: {index_reuse_plan(cfg.n_layers, 2)}")
print(f"score computations for {cfg.n_layers} layers: {calls['n']} "
      f"(layers in a group share one array: "
      f"{shared[1] is shared[0]})")
assert calls["n"] == 2
