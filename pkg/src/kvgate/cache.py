"""Per-layer KV cache with sink protection, compaction, and budget scheduling.

Eviction is per layer: one keep-index set applies to every kv head of that
layer, so the cache stays rectangular. Rows are identified by their original
sequence position, which never changes after a compaction; rotary rotations
were applied when the row was created, so nothing needs recomputing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import topk_indices

AGG_MODES = ("none", "layer_mean", "ent_skip_high", "ent_skip_low")


@dataclass(frozen=True)
class CompressionPlan:
    """Knobs shared by one compression run.

    ``budget`` is the total retained length including sinks and the local
    window; ``None`` disables the budget (prefill-ratio-only runs).
    """

    ratio: float = 0.5
    decode_interval: int = 128
    budget: int | None = None
    sink_count: int = 4
    local_window: int = 32
    policy: str = "snapkv"
    agg_mode: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.decode_interval < 1:
            raise ValueError("decode interval must be at least 1")
        if self.sink_count < 0 or self.local_window < 0:
            raise ValueError("sink_count and local_window must be nonnegative")
        if self.budget is not None and self.budget < self.sink_count + self.local_window:
            raise ValueError("budget must cover sinks plus the local window")
        if self.agg_mode not in AGG_MODES:
            raise ValueError(f"unknown aggregation mode: {self.agg_mode!r}")


class KvCache:
    """Append-only-until-compacted storage of rotated keys and values."""

    def __init__(self, n_layers: int, n_kv_heads: int, d_head: int, sink_count: int = 4):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.d_head = d_head
        self.sink_count = sink_count
        self._keys = [np.zeros((n_kv_heads, 0, d_head)) for _ in range(n_layers)]
        self._values = [np.zeros((n_kv_heads, 0, d_head)) for _ in range(n_layers)]
        self._positions = [np.zeros(0, dtype=np.int64) for _ in range(n_layers)]

    def length(self, layer: int) -> int:
        return self._positions[layer].size

    def positions(self, layer: int) -> np.ndarray:
        return self._positions[layer]

    def keys(self, layer: int) -> np.ndarray:
        return self._keys[layer]

    def values(self, layer: int) -> np.ndarray:
        return self._values[layer]

    def nbytes(self) -> int:
        return int(sum(k.nbytes + v.nbytes for k, v in zip(self._keys, self._values)))

    def append(self, layer: int, k_rows: np.ndarray, v_rows: np.ndarray, positions) -> None:
        """Append rows for strictly increasing, never-before-seen positions."""
        pos = np.asarray(positions, dtype=np.int64)
        k_rows = np.asarray(k_rows, dtype=np.float64)
        v_rows = np.asarray(v_rows, dtype=np.float64)
        expected = (self.n_kv_heads, pos.size, self.d_head)
        if k_rows.shape != expected or v_rows.shape != expected:
            raise ValueError(f"appended rows must have shape {expected}")
        if pos.size == 0:
            return
        if np.any(np.diff(pos) <= 0):
            raise ValueError("positions must be strictly increasing")
        existing = self._positions[layer]
        if existing.size and pos[0] <= existing[-1]:
            raise ValueError("positions must extend past the cached range")
        self._keys[layer] = np.concatenate([self._keys[layer], k_rows], axis=1)
        self._values[layer] = np.concatenate([self._values[layer], v_rows], axis=1)
        self._positions[layer] = np.concatenate([existing, pos])

    def sink_row_indices(self, layer: int) -> np.ndarray:
        """Row indices whose original position is below sink_count."""
        return np.flatnonzero(self._positions[layer] < self.sink_count)

    def forced_row_indices(self, layer: int, local_window: int) -> np.ndarray:
        """Sink rows plus the trailing local window, as row indices."""
        n = self.length(layer)
        window = np.arange(max(0, n - local_window), n)
        return np.union1d(self.sink_row_indices(layer), window)

    def compact(self, layer: int, keep_indices, local_window: int = 0):
        """Drop every row not listed in ``keep_indices``.

        The keep set must contain all sink rows and, when ``local_window`` is
        given, the trailing window rows; violations raise rather than being
        silently repaired. Returns the evicted rows in original order as a
        ``(keys, values, positions)`` triple with keys/values shaped
        (n_kv_heads, n_evicted, d_head).
        """
        n = self.length(layer)
        keep = np.unique(np.asarray(keep_indices, dtype=np.int64))
        if keep.size and (keep[0] < 0 or keep[-1] >= n):
            raise ValueError("keep index out of range")
        mask = np.zeros(n, dtype=bool)
        mask[keep] = True
        if not mask[self.sink_row_indices(layer)].all():
            raise ValueError("sink eviction forbidden")
        if local_window and not mask[max(0, n - local_window):].all():
            raise ValueError("local window eviction forbidden")
        drop = np.flatnonzero(~mask)
        evicted = (self._keys[layer][:, drop, :].copy(),
                   self._values[layer][:, drop, :].copy(),
                   self._positions[layer][drop].copy())
        self._keys[layer] = self._keys[layer][:, keep, :]
        self._values[layer] = self._values[layer][:, keep, :]
        self._positions[layer] = self._positions[layer][keep]
        return evicted


def keep_indices_for_ratio(scores: np.ndarray, forced: np.ndarray, ratio: float,
                           cap: int | None = None) -> np.ndarray:
    """Keep set for a ratio-based compression of one layer.

    The ratio applies to the evictable rows: of the ``n - len(forced)``
    candidates, the top ``ceil((1 - ratio) * candidates)`` by score survive,
    and the forced rows (sinks, local window) ride along on top. ``cap``
    optionally bounds the total keep count (budgeted prefill).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    forced = np.asarray(forced, dtype=np.int64)
    n_candidates = n - forced.size
    n_keep = math.ceil((1.0 - ratio) * n_candidates)
    if cap is not None:
        n_keep = min(n_keep, max(0, cap - forced.size))
    masked = scores.copy()
    masked[forced] = -np.inf
    chosen = topk_indices(masked, min(n_keep, n_candidates))
    return np.union1d(chosen, forced)


def prefill_compress(cache: KvCache, layer: int, plan: CompressionPlan,
                     scores: np.ndarray):
    """One-shot compression of a freshly prefetched layer cache.

    ``scores`` must cover every cached row. Returns the evicted triple from
    :meth:`KvCache.compact`.
    """
    n = cache.length(layer)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise ValueError("scores must match the cache length")
    forced = cache.forced_row_indices(layer, plan.local_window)
    keep = keep_indices_for_ratio(scores, forced, plan.ratio, cap=plan.budget)
    return cache.compact(layer, keep, plan.local_window)


def budget_compress(cache: KvCache, layer: int, plan: CompressionPlan,
                    scores: np.ndarray):
    """Compress one layer down to exactly the plan budget (if above it)."""
    if plan.budget is None:
        raise ValueError("plan has no budget")
    n = cache.length(layer)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n,):
        raise ValueError("scores must match the cache length")
    if n <= plan.budget:
        return (np.zeros((cache.n_kv_heads, 0, cache.d_head)),
                np.zeros((cache.n_kv_heads, 0, cache.d_head)),
                np.zeros(0, dtype=np.int64))
    forced = cache.forced_row_indices(layer, plan.local_window)
    masked = scores.copy()
    masked[forced] = -np.inf
    n_extra = plan.budget - forced.size
    chosen = topk_indices(masked, max(0, n_extra))
    keep = np.union1d(chosen, forced)
    return cache.compact(layer, keep, plan.local_window)


class DecodeSchedule:
    """Periodic compression driver for the decode phase.

    Steps are 1-based. Every ``decode_interval`` steps each layer holding
    more than the budget is compressed back to it, scored by a caller
    callback over the queries buffered since the previous compression.
    Between boundaries at most ``decode_interval`` rows accumulate, so the
    retained length never exceeds ``budget + decode_interval`` provided the
    cache respected the budget when decoding started.
    """

    def __init__(self, cache: KvCache, plan: CompressionPlan):
        if plan.budget is None:
            raise ValueError("decode scheduling requires a budget")
        self.cache = cache
        self.plan = plan
        self.step_index = 0
        self.interval_queries = [[] for _ in range(cache.n_layers)]

    def buffer_query(self, layer: int, **rows) -> None:
        """Stash per-step scoring inputs (e.g. x / q_pre / q rows) for a layer."""
        self.interval_queries[layer].append(rows)

    def step(self, scorer=None, on_evict=None) -> bool:
        """Advance one decode step; returns True when compression ran.

        ``scorer(layer, cache, buffered)`` must return one score per cached
        row of that layer. ``on_evict(layer, keys, values, positions)`` sees
        each layer's evicted rows, in original order.
        """
        self.step_index += 1
        if self.step_index % self.plan.decode_interval != 0:
            return False
        compressed = False
        for layer in range(self.cache.n_layers):
            if self.cache.length(layer) <= self.plan.budget:
                continue
            if scorer is None:
                raise ValueError("compression is due but no scorer was given")
            scores = scorer(layer, self.cache, self.interval_queries[layer])
            evicted = budget_compress(self.cache, layer, self.plan, scores)
            compressed = True
            if on_evict is not None and evicted[2].size:
                on_evict(layer, *evicted)
        if compressed:
            self.interval_queries = [[] for _ in range(self.cache.n_layers)]
        return compressed
