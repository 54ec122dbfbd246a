"""Heuristic eviction scoring policies and the shared selection rule.

Every policy reduces the cached rows of one layer to a score vector; the
selection step is identical for all of them (top-k plus forced sinks and
local window), so two policies that emit the same scores keep the same rows.
Scores are computed per kv head and summed across heads for per-layer
eviction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import CompressionPlan, keep_indices_for_ratio
from .numerics import Rng, masked_softmax_rows
from .teacher import kv_head_of

POLICY_NAMES = ("snapkv", "knorm", "tova", "random", "indexer")
HEAD_POOLS = ("mean", "max")


@dataclass(frozen=True)
class PolicyId:
    """A policy choice plus its parameters, validated up front."""

    name: str
    window: int = 8
    seed: int = 0
    head_pool: str = "mean"

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy: {self.name!r}")
        if self.window < 1:
            raise ValueError("scoring window must be at least 1")
        if self.head_pool not in HEAD_POOLS:
            raise ValueError(f"unknown head pool: {self.head_pool!r}")


def score_snapkv(q_window: np.ndarray, keys: np.ndarray, scale_dim: int,
                 q_positions=None, key_positions=None,
                 head_pool: str = "mean") -> np.ndarray:
    """Average attention mass from the trailing query window to each key.

    Args:
        q_window: (n_heads, w, d_head) rotated queries, the last w of the
            sequence.
        keys: (n_kv_heads, L, d_head) cached keys.
        q_positions / key_positions: absolute positions for causal masking.
            When omitted, the queries are taken to be the newest w cached
            rows, which is the prefill case.
        head_pool: how to combine query heads sharing a kv head; "mean"
            keeps every softmax row summing to one.

    Returns (n_kv_heads, L) scores; each head's scores sum to 1 under mean
    pooling.
    """
    n_heads, w, _ = q_window.shape
    if w == 0:
        raise ValueError("scoring window must be at least 1")
    n_kv, n_rows, _ = keys.shape
    if w > n_rows:
        raise ValueError("scoring window exceeds the cached rows")
    if key_positions is None:
        key_positions = np.arange(n_rows)
    key_positions = np.asarray(key_positions, dtype=np.int64)
    if q_positions is None:
        q_positions = key_positions[n_rows - w:]
    q_positions = np.asarray(q_positions, dtype=np.int64)
    visible = key_positions[None, :] <= q_positions[:, None]
    if head_pool not in HEAD_POOLS:
        raise ValueError(f"unknown head pool: {head_pool!r}")

    scale = 1.0 / np.sqrt(float(scale_dim))
    per_query_head = np.empty((n_heads, n_rows))
    for h in range(n_heads):
        g = kv_head_of(h, n_heads, n_kv)
        logits = (q_window[h] @ keys[g].T) * scale
        logits = np.where(visible, logits, -np.inf)
        per_query_head[h] = masked_softmax_rows(logits).mean(axis=0)
    out = np.empty((n_kv, n_rows))
    group = n_heads // n_kv
    for g in range(n_kv):
        block = per_query_head[g * group:(g + 1) * group]
        out[g] = block.max(axis=0) if head_pool == "max" else block.mean(axis=0)
    return out


def score_knorm(keys: np.ndarray) -> np.ndarray:
    """Euclidean norm of each cached key row, per kv head: (n_kv_heads, L)."""
    return np.linalg.norm(np.asarray(keys, dtype=np.float64), axis=2)


def score_tova(q_last: np.ndarray, keys: np.ndarray, scale_dim: int,
               key_positions=None, head_pool: str = "mean") -> np.ndarray:
    """Attention row of the single newest query; snapkv with a width-1 window."""
    q_last = np.asarray(q_last, dtype=np.float64)
    if q_last.ndim == 2:
        q_last = q_last[:, None, :]
    return score_snapkv(q_last, keys, scale_dim, key_positions=key_positions,
                        head_pool=head_pool)


def score_random(n_rows: int, rng: Rng) -> np.ndarray:
    """Seeded uniform scores: the statistical floor policy, (L,) directly."""
    return rng.uniform((n_rows,))


def aggregate_heads(scores: np.ndarray) -> np.ndarray:
    """Per-layer score from per-kv-head scores: fixed sum across heads."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return scores
    return scores.sum(axis=0)


def select(plan: CompressionPlan, scores: np.ndarray,
           positions: np.ndarray) -> np.ndarray:
    """Row indices to keep for one layer, ascending.

    The score order picks the survivors; sinks (by original position) and
    the trailing local window ride along regardless of score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if scores.shape != positions.shape:
        raise ValueError("scores and positions must align")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.size
    sinks = np.flatnonzero(positions < plan.sink_count)
    window = np.arange(max(0, n - plan.local_window), n)
    forced = np.union1d(sinks, window)
    return keep_indices_for_ratio(scores, forced, plan.ratio, cap=plan.budget)


def heuristic_layer_scores(policy: PolicyId, keys: np.ndarray, scale_dim: int,
                           q_window: np.ndarray | None = None,
                           key_positions=None, rng: Rng | None = None) -> np.ndarray:
    """Dispatch a heuristic policy to one layer's cached rows: (L,) scores.

    The learned-indexer policy is not heuristic (it needs trained
    parameters) and is dispatched by the harness instead.
    """
    n_rows = keys.shape[1]
    if policy.name == "knorm":
        return aggregate_heads(score_knorm(keys))
    if policy.name == "random":
        if rng is None:
            raise ValueError("random policy needs an rng")
        return score_random(n_rows, rng)
    if policy.name in ("snapkv", "tova"):
        if q_window is None:
            raise ValueError(f"{policy.name} needs query rows")
        w = 1 if policy.name == "tova" else min(policy.window, q_window.shape[1])
        per_head = score_snapkv(q_window[:, q_window.shape[1] - w:, :], keys,
                                scale_dim, key_positions=key_positions,
                                head_pool=policy.head_pool)
        return aggregate_heads(per_head)
    raise ValueError(f"policy {policy.name!r} has no heuristic scorer")
