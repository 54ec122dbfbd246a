"""Learned importance indexer: gated low-rank similarity distilled from attention.

The indexer predicts which cached rows the attention actually needs, without
touching keys or values: queries are down-projected per head, keys share one
tiny feature stream (MQA style), both are RMS-normalized, and a per-head gate
computed from the hidden state mixes the ReLU similarities into one score.
Importance of a key is the max score any query in the aggregation set gives
it. Training distills the pooled importance distribution from the frozen
attention logits with a streaming KL loss, so the full L x L matrix never
needs to exist.

All gradients here are hand-derived; at max ties the lowest-index query
carries the subgradient and ReLU contributes zero slope at its kink, which
keeps finite-difference checks exact in 64-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, kl_divergence, rmsnorm
from .teacher import TeacherConfig, TeacherModel, flatten_heads, kv_head_of


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def default_h_index(n_heads: int) -> int:
    return max(1, n_heads // 4)


def default_d_index(d_head: int) -> int:
    return max(1, d_head // 8)


@dataclass
class IndexerParams:
    """Slow weights of one layer's indexer.

    Shapes (inputs x outputs): u_q (H * d_head, H_index * d_index),
    u_k (d_model, d_index), g (d_model, H_index).
    """

    u_q: np.ndarray
    u_k: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        if self.u_k.ndim != 2 or self.u_q.ndim != 2 or self.g.ndim != 2:
            raise ValueError("indexer weights must be matrices")
        if self.u_q.shape[1] != self.h_index * self.d_index:
            raise ValueError("u_q output width must equal H_index * d_index")
        if self.g.shape[0] != self.u_k.shape[0]:
            raise ValueError("g and u_k must consume the same hidden width")
        for w in (self.u_q, self.u_k, self.g):
            if not np.all(np.isfinite(w)):
                raise ValueError("indexer weights must be finite")

    @property
    def h_index(self) -> int:
        return self.g.shape[1]

    @property
    def d_index(self) -> int:
        return self.u_k.shape[1]

    @property
    def gate_scale(self) -> float:
        return 1.0 / math.sqrt(float(self.h_index * self.d_index))

    def copy(self) -> "IndexerParams":
        return IndexerParams(self.u_q.copy(), self.u_k.copy(), self.g.copy())

    @classmethod
    def init(cls, config: TeacherConfig, rng: Rng, h_index: int | None = None,
             d_index: int | None = None) -> "IndexerParams":
        """Random init scaled by 1/sqrt(fan_in), one fresh draw per matrix."""
        h_index = default_h_index(config.n_heads) if h_index is None else h_index
        d_index = default_d_index(config.d_head) if d_index is None else d_index
        if h_index < 1 or d_index < 1:
            raise ValueError("H_index and d_index must be at least 1")
        q_in = config.n_heads * config.d_head
        u_q = rng.split(0).normal((q_in, h_index * d_index)) / math.sqrt(q_in)
        u_k = rng.split(1).normal((config.d_model, d_index)) / math.sqrt(config.d_model)
        g = rng.split(2).normal((config.d_model, h_index)) / math.sqrt(config.d_model)
        return cls(u_q=u_q, u_k=u_k, g=g)


def query_features(params: IndexerParams, q_pre: np.ndarray) -> np.ndarray:
    """Per-head normalized query features: (L, H_index, d_index).

    ``q_pre`` is (n_heads, L, d_head) un-rotated query state; heads are
    flattened head-major before the down-projection.
    """
    flat = flatten_heads(q_pre)
    raw = flat @ params.u_q
    raw = raw.reshape(raw.shape[0], params.h_index, params.d_index)
    return rmsnorm(raw)


def key_features(params: IndexerParams, x: np.ndarray) -> np.ndarray:
    """Shared normalized key features: (L, d_index)."""
    return rmsnorm(np.asarray(x, dtype=np.float64) @ params.u_k)


def head_gates(params: IndexerParams, x: np.ndarray) -> np.ndarray:
    """Per-head score gates: (L, H_index), scaled by 1/sqrt(H_index*d_index)."""
    return (np.asarray(x, dtype=np.float64) @ params.g) * params.gate_scale


class IndexerKeyCache:
    """Append-only store of normalized key features, one row per token.

    Unlike the KV cache this is never compacted; its whole point is that
    scoring stays possible for rows the KV cache has already dropped. The
    footprint is d_index floats per token.
    """

    def __init__(self, d_index: int):
        self.d_index = d_index
        self._rows = np.zeros((0, d_index))
        self._positions = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._positions.size

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    def nbytes(self) -> int:
        return int(self._rows.nbytes)

    def append(self, rows: np.ndarray, positions) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        pos = np.asarray(positions, dtype=np.int64)
        if rows.shape != (pos.size, self.d_index):
            raise ValueError(f"expected rows of width {self.d_index}")
        if pos.size == 0:
            return
        if np.any(np.diff(pos) <= 0):
            raise ValueError("positions must be strictly increasing")
        if self._positions.size and pos[0] <= self._positions[-1]:
            raise ValueError("positions must extend past the cached range")
        self._rows = np.concatenate([self._rows, rows], axis=0)
        self._positions = np.concatenate([self._positions, pos])

    def rows_for(self, positions) -> np.ndarray:
        """Gather cached feature rows by original position."""
        want = np.asarray(positions, dtype=np.int64)
        if want.size == 0:
            return np.zeros((0, self.d_index))
        idx = np.searchsorted(self._positions, want)
        missing = idx >= self._positions.size
        idx = np.where(missing, 0, idx)
        missing |= self._positions[idx] != want
        if missing.any():
            raise ValueError("missing cached keys")
        return self._rows[idx]


def _score_from_features(q_feat: np.ndarray, gates: np.ndarray,
                         k_feat: np.ndarray, q_ids: np.ndarray,
                         k_ids: np.ndarray) -> np.ndarray:
    """Gated ReLU similarity block from precomputed per-row features.

    einsum with a fixed contraction order keeps the result bit-identical no
    matter how the rows were blocked, which the streamed/dense equivalence
    tests rely on.
    """
    z = np.maximum(np.einsum("shd,td->sth", q_feat, k_feat), 0.0)
    block = np.einsum("sth,sh->st", z, gates)
    invalid = k_ids[None, :] > q_ids[:, None]
    return np.where(invalid, -np.inf, block)


def score_block(params: IndexerParams, x: np.ndarray, q_pre: np.ndarray,
                q_ids, k_ids, key_cache: IndexerKeyCache | None = None) -> np.ndarray:
    """Score block A[q_ids, k_ids] with causal entries above the diagonal -inf.

    Keys come from ``key_cache`` when given (decode) and are otherwise
    computed from ``x`` (prefill); ids are absolute positions either way.
    """
    q_ids = np.asarray(q_ids, dtype=np.int64)
    k_ids = np.asarray(k_ids, dtype=np.int64)
    q_feat = query_features(params, q_pre[:, q_ids, :])
    if key_cache is not None:
        k_feat = key_cache.rows_for(k_ids)
    else:
        k_feat = key_features(params, np.asarray(x)[k_ids])
    gates = head_gates(params, np.asarray(x)[q_ids])
    return _score_from_features(q_feat, gates, k_feat, q_ids, k_ids)


def dense_scores(params: IndexerParams, x: np.ndarray,
                 q_pre: np.ndarray) -> np.ndarray:
    """Full L x L score matrix; test-scale reference for the blocked paths."""
    n = np.asarray(x).shape[0]
    ids = np.arange(n)
    return _score_from_features(query_features(params, q_pre),
                                head_gates(params, x),
                                key_features(params, x), ids, ids)


def indexer_importance(params: IndexerParams, x: np.ndarray, q_pre: np.ndarray,
                       q_set=None, q_blk: int = 128, k_blk: int = 4096,
                       key_cache: IndexerKeyCache | None = None) -> np.ndarray:
    """Per-key importance: max score over the query set, streamed in blocks.

    Per-row features are computed once up front (that is the cache-friendly
    shape of the computation anyway), so only score blocks are ever
    materialized and the result is bit-identical for every block size.
    Keys outside every query's causal support come back -inf.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    q_set = np.arange(n) if q_set is None else np.asarray(q_set, dtype=np.int64)
    if q_set.size == 0:
        raise ValueError("empty query set")
    if q_blk < 1 or k_blk < 1:
        raise ValueError("block sizes must be at least 1")
    q_feat = query_features(params, q_pre)
    gates = head_gates(params, x)
    if key_cache is not None:
        k_feat = key_cache.rows_for(np.arange(n))
    else:
        k_feat = key_features(params, x)
    imp = np.full(n, -np.inf)
    for qb in range(0, q_set.size, q_blk):
        q_ids = q_set[qb:qb + q_blk]
        for kb in range(0, n, k_blk):
            k_ids = np.arange(kb, min(kb + k_blk, n))
            block = _score_from_features(q_feat[q_ids], gates[q_ids],
                                         k_feat[k_ids], q_ids, k_ids)
            imp[k_ids] = np.maximum(imp[k_ids], block.max(axis=0))
    return imp


def pre_evict(params: IndexerParams, x_chunk: np.ndarray, q_pre_chunk: np.ndarray,
              plan) -> tuple[np.ndarray, np.ndarray]:
    """Keep/evict split decided before any KV row is materialized.

    Scores come from the indexer alone (hidden states and pre-rotation
    queries); the attention engine can then build the KV cache for the keep
    set only. Returns (keep, evicted) position arrays, both ascending.
    """
    from .cache import keep_indices_for_ratio

    n = np.asarray(x_chunk).shape[0]
    imp = indexer_importance(params, x_chunk, q_pre_chunk)
    forced = np.union1d(np.arange(min(plan.sink_count, n)),
                        np.arange(max(0, n - plan.local_window), n))
    keep = keep_indices_for_ratio(imp, forced, plan.ratio, cap=plan.budget)
    evicted = np.setdiff1d(np.arange(n), keep)
    return keep, evicted


@dataclass
class DistillBatch:
    """One sequence's worth of distillation inputs for a single layer.

    ``q_pre`` feeds the indexer (queries before rotation, as the scorer sees
    them); ``q_rot``/``k_rot`` are the states the attention actually used,
    from which the teacher logits are rebuilt.
    """

    x: np.ndarray        # (L, d_model) layer-input hidden states
    q_pre: np.ndarray    # (n_heads, L, d_head)
    q_rot: np.ndarray    # (n_heads, L, d_head)
    k_rot: np.ndarray    # (n_kv_heads, L, d_head)
    scale_dim: int
    sink_count: int = 4
    q_set: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.q_pre.shape[1]:
            raise ValueError("hidden states and queries must align")
        if self.sink_count < 0 or self.sink_count >= self.x.shape[0]:
            raise ValueError("sink count must leave at least one scored key")
        if self.q_set is not None:
            self.q_set = np.asarray(self.q_set, dtype=np.int64)

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def query_ids(self) -> np.ndarray:
        return np.arange(self.length) if self.q_set is None else self.q_set


def distill_batch(teacher: TeacherModel, x0: np.ndarray, layer: int,
                  sink_count: int = 4, q_set=None) -> DistillBatch:
    """Build a layer's distillation inputs by tracing the frozen teacher."""
    trace = teacher.forward(x0=x0)
    lt = trace.layers[layer]
    return DistillBatch(x=lt.x_in, q_pre=lt.q_pre, q_rot=lt.q, k_rot=lt.k,
                        scale_dim=teacher.config.d_model,
                        sink_count=sink_count, q_set=q_set)


def teacher_block(batch: DistillBatch, q_ids: np.ndarray,
                  k_ids: np.ndarray) -> np.ndarray:
    """Teacher logits max-pooled over every query head, causally masked."""
    n_heads = batch.q_rot.shape[0]
    n_kv = batch.k_rot.shape[0]
    scale = 1.0 / math.sqrt(float(batch.scale_dim))
    out = np.full((q_ids.size, k_ids.size), -np.inf)
    for h in range(n_heads):
        g = kv_head_of(h, n_heads, n_kv)
        logits = np.einsum("qd,kd->qk", batch.q_rot[h][q_ids],
                           batch.k_rot[g][k_ids]) * scale
        out = np.maximum(out, logits)
    invalid = k_ids[None, :] > q_ids[:, None]
    return np.where(invalid, -np.inf, out)


def pooled_vectors(params: IndexerParams, batch: DistillBatch,
                   q_blk: int = 128, k_blk: int = 4096):
    """Streamed (teacher_imp, student_imp) over all keys, both (L,).

    Bit-identical for every (q_blk, k_blk): per-row features are computed
    once and block maxima commute with the global max.
    """
    if q_blk < 1 or k_blk < 1:
        raise ValueError("block sizes must be at least 1")
    n = batch.length
    q_set = batch.query_ids
    if q_set.size == 0:
        raise ValueError("empty query set")
    q_feat = query_features(params, batch.q_pre)
    gates = head_gates(params, batch.x)
    k_feat = key_features(params, batch.x)
    teacher_imp = np.full(n, -np.inf)
    student_imp = np.full(n, -np.inf)
    for qb in range(0, q_set.size, q_blk):
        q_ids = q_set[qb:qb + q_blk]
        for kb in range(0, n, k_blk):
            k_ids = np.arange(kb, min(kb + k_blk, n))
            t_blk = teacher_block(batch, q_ids, k_ids)
            a_blk = _score_from_features(q_feat[q_ids], gates[q_ids],
                                         k_feat[k_ids], q_ids, k_ids)
            teacher_imp[k_ids] = np.maximum(teacher_imp[k_ids], t_blk.max(axis=0))
            student_imp[k_ids] = np.maximum(student_imp[k_ids], a_blk.max(axis=0))
    return teacher_imp, student_imp


def streaming_distill_loss(params: IndexerParams, batch: DistillBatch,
                           q_blk: int = 128, k_blk: int = 4096) -> float:
    """KL between pooled teacher and student importance, sinks excluded."""
    teacher_imp, student_imp = pooled_vectors(params, batch, q_blk, k_blk)
    keep = np.arange(batch.sink_count, batch.length)
    return kl_divergence(teacher_imp[keep], student_imp[keep])


def _rmsnorm_backward(raw: np.ndarray, normed: np.ndarray,
                      d_out: np.ndarray) -> np.ndarray:
    """Gradient through y = x / sqrt(mean(x^2) + eps) along the last axis."""
    n = raw.shape[-1]
    from .numerics import NORM_EPS
    ms = np.mean(raw * raw, axis=-1, keepdims=True) + NORM_EPS
    inv = 1.0 / np.sqrt(ms)
    dot = np.sum(raw * d_out, axis=-1, keepdims=True)
    return inv * d_out - (inv ** 3 / n) * raw * dot


def distill_gradients(params: IndexerParams, batch: DistillBatch):
    """Loss and analytic gradients of the streaming KL w.r.t. u_q, u_k, g.

    The computation is dense (test scale); the loss value matches the
    streamed one exactly because block maxima equal global maxima.
    """
    n = batch.length
    q_set = batch.query_ids
    ids = np.arange(n)

    flat_q = flatten_heads(batch.q_pre)            # (L, H*dh)
    raw_q = (flat_q @ params.u_q).reshape(n, params.h_index, params.d_index)
    q_feat = rmsnorm(raw_q)
    raw_k = batch.x @ params.u_k
    k_feat = rmsnorm(raw_k)
    gates = head_gates(params, batch.x)

    dots = np.einsum("shd,td->sth", q_feat, k_feat)
    z = np.maximum(dots, 0.0)
    scores = np.einsum("sth,sh->st", z, gates)
    invalid = ids[None, :] > ids[:, None]
    scores = np.where(invalid, -np.inf, scores)

    sub = scores[q_set]
    student_imp = sub.max(axis=0)
    arg_rows = q_set[np.argmax(sub, axis=0)]       # lowest index wins ties

    teacher_imp, _ = pooled_vectors(params, batch,
                                    q_blk=max(1, q_set.size), k_blk=max(1, n))
    keep = np.arange(batch.sink_count, n)
    t_valid = teacher_imp[keep]
    s_valid = student_imp[keep]
    loss = kl_divergence(t_valid, s_valid)

    # dKL/d(student logits) = softmax(student) - softmax(teacher), on the
    # shared finite support; -inf entries get no gradient.
    finite = np.isfinite(s_valid)
    p = np.zeros_like(t_valid)
    q = np.zeros_like(s_valid)
    tf = t_valid[finite]
    sf = s_valid[finite]
    p[finite] = np.exp(tf - tf.max()) / np.exp(tf - tf.max()).sum()
    q[finite] = np.exp(sf - sf.max()) / np.exp(sf - sf.max()).sum()
    d_imp = np.zeros(n)
    d_imp[keep] = q - p

    # Route each key's gradient through its argmax query.
    d_scores = np.zeros((n, n))
    cols = np.flatnonzero(np.isfinite(student_imp) & (d_imp != 0.0))
    d_scores[arg_rows[cols], cols] = d_imp[cols]

    d_gates = np.einsum("st,sth->sh", d_scores, z)
    d_z = np.einsum("st,sh->sth", d_scores, gates)
    d_dots = d_z * (dots > 0.0)
    d_qfeat = np.einsum("sth,td->shd", d_dots, k_feat)
    d_kfeat = np.einsum("sth,shd->td", d_dots, q_feat)

    d_raw_q = _rmsnorm_backward(raw_q, q_feat, d_qfeat)
    d_raw_k = _rmsnorm_backward(raw_k, k_feat, d_kfeat)

    grad_u_q = flat_q.T @ d_raw_q.reshape(n, -1)
    grad_u_k = batch.x.T @ d_raw_k
    grad_g = (batch.x.T @ d_gates) * params.gate_scale
    return loss, {"u_q": grad_u_q, "u_k": grad_u_k, "g": grad_g}


@dataclass(frozen=True)
class WsdSchedule:
    """Warmup-stable-decay learning rate: linear up, flat, linear down."""

    warmup_steps: int = 100
    stable_steps: int = 2000
    decay_steps: int = 2000
    peak: float = 1e-3
    final: float = 7.5e-6

    def __post_init__(self):
        if min(self.warmup_steps, self.stable_steps, self.decay_steps) < 0:
            raise ValueError("step counts must be nonnegative")
        if self.peak <= 0 or self.final <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.stable_steps + self.decay_steps

    def lr(self, step: int) -> float:
        """Learning rate for 0-based ``step``; hits peak at the end of
        warmup and exactly ``final`` on the last step."""
        if not 0 <= step < self.total_steps:
            raise ValueError("step outside the schedule")
        if step < self.warmup_steps:
            return self.peak * (step + 1) / self.warmup_steps
        if step < self.warmup_steps + self.stable_steps:
            return self.peak
        j = step - self.warmup_steps - self.stable_steps
        return self.peak + (self.final - self.peak) * (j + 1) / self.decay_steps

    def scaled(self, total: int) -> "WsdSchedule":
        """Same shape squeezed into ``total`` steps (desk-scale runs)."""
        if total < 1:
            raise ValueError("need at least one step")
        frac = total / self.total_steps
        warm = min(max(1, round(self.warmup_steps * frac)), total) if total >= 3 else 0
        decay = min(max(1, round(self.decay_steps * frac)), total - warm) if total >= 3 else 0
        return WsdSchedule(warm, total - warm - decay, decay, self.peak, self.final)


def clip_gradients(grads: dict, max_norm: float = 1.0) -> dict:
    """Scale the whole gradient set down to a global norm bound."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train_indexer(params: IndexerParams, batches: list, schedule: WsdSchedule,
                  steps: int | None = None, clip: float = 1.0) -> list:
    """SGD distillation over a cycled batch list; returns per-step losses.

    The loop mutates ``params`` in place and is deterministic: batch order
    is round-robin, gradients are exact, and the only schedule is WSD.
    Raises :class:`DivergenceError` when the loss stops being finite.
    """
    if not batches:
        raise ValueError("need at least one batch")
    total = schedule.total_steps if steps is None else steps
    if total > schedule.total_steps:
        raise ValueError("more steps than the schedule covers")
    losses = []
    for step in range(total):
        batch = batches[step % len(batches)]
        for w in (params.u_q, params.u_k, params.g):
            if not np.all(np.isfinite(w)):
                raise DivergenceError(f"indexer weights non-finite at step {step}")
        loss, grads = distill_gradients(params, batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"distillation loss diverged at step {step}")
        grads = clip_gradients(grads, clip)
        lr = schedule.lr(step)
        params.u_q -= lr * grads["u_q"]
        params.u_k -= lr * grads["u_k"]
        params.g -= lr * grads["g"]
        losses.append(float(loss))
    return losses
