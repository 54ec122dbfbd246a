import math

import numpy as np
import pytest

from kvgate.cache import CompressionPlan
from kvgate.indexer import (
    DistillBatch,
    DivergenceError,
    IndexerKeyCache,
    IndexerParams,
    WsdSchedule,
    default_d_index,
    default_h_index,
    dense_scores,
    distill_batch,
    distill_gradients,
    indexer_importance,
    key_features,
    pooled_vectors,
    pre_evict,
    query_features,
    score_block,
    streaming_distill_loss,
    train_indexer,
)
from kvgate.numerics import Rng, rmsnorm
from kvgate.teacher import TeacherConfig, TeacherModel


def small_teacher(n_layers=2, seed=5):
    cfg = TeacherConfig(n_layers=n_layers, d_model=16, n_heads=4, n_kv_heads=2,
                        d_ffn=32, vocab_size=16, seed=seed)
    return TeacherModel(cfg)


def small_setup(length=20, sink_count=3, param_seed=61, x_seed=60, layer=0):
    teacher = small_teacher()
    x0 = Rng(x_seed).normal((length, 16))
    batch = distill_batch(teacher, x0, layer=layer, sink_count=sink_count)
    params = IndexerParams.init(teacher.config, Rng(param_seed),
                                h_index=2, d_index=3)
    return teacher, batch, params


def reference_scores(params, x, q_pre):
    """Scalar-loop oracle for the gated similarity matrix."""
    n = x.shape[0]
    flat = np.concatenate([q_pre[h] for h in range(q_pre.shape[0])], axis=1)
    out = np.full((n, n), -np.inf)
    for s in range(n):
        raw_q = (flat[s] @ params.u_q).reshape(params.h_index, params.d_index)
        q = np.stack([row / math.sqrt(np.mean(row**2) + 1e-6) for row in raw_q])
        alpha = (x[s] @ params.g) / math.sqrt(params.h_index * params.d_index)
        for t in range(s + 1):
            raw_k = x[t] @ params.u_k
            k = raw_k / math.sqrt(np.mean(raw_k**2) + 1e-6)
            total = 0.0
            for h in range(params.h_index):
                total += alpha[h] * max(0.0, float(q[h] @ k))
            out[s, t] = total
    return out


class TestParams:
    def test_defaults(self):
        assert default_h_index(8) == 2
        assert default_h_index(2) == 1
        assert default_d_index(16) == 2
        assert default_d_index(4) == 1

    def test_init_shapes(self):
        teacher = small_teacher()
        p = IndexerParams.init(teacher.config, Rng(1))
        assert p.u_q.shape == (16, p.h_index * p.d_index)
        assert p.u_k.shape == (16, p.d_index)
        assert p.g.shape == (16, p.h_index)

    def test_init_deterministic(self):
        teacher = small_teacher()
        a = IndexerParams.init(teacher.config, Rng(2))
        b = IndexerParams.init(teacher.config, Rng(2))
        assert np.array_equal(a.u_q, b.u_q)
        assert np.array_equal(a.u_k, b.u_k)
        assert np.array_equal(a.g, b.g)

    def test_rejects_mismatched_widths(self):
        with pytest.raises(ValueError, match="u_q output width"):
            IndexerParams(u_q=np.zeros((16, 5)), u_k=np.zeros((16, 3)),
                          g=np.zeros((16, 2)))

    def test_rejects_nonfinite(self):
        bad = np.zeros((16, 6))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            IndexerParams(u_q=bad, u_k=np.zeros((16, 3)), g=np.zeros((16, 2)))


class TestFeatures:
    def test_query_features_normalized_per_head(self):
        _, batch, params = small_setup()
        q = query_features(params, batch.q_pre)
        assert q.shape == (20, 2, 3)
        rms = np.sqrt(np.mean(q**2, axis=2))
        assert np.allclose(rms, 1.0, atol=1e-5)

    def test_key_features_normalized(self):
        _, batch, params = small_setup()
        k = key_features(params, batch.x)
        assert k.shape == (20, 3)
        assert np.allclose(np.sqrt(np.mean(k**2, axis=1)), 1.0, atol=1e-5)


class TestKeyCache:
    def test_append_and_gather(self):
        cache = IndexerKeyCache(d_index=3)
        rows = Rng(3).normal((5, 3))
        cache.append(rows, np.arange(5))
        assert len(cache) == 5
        assert cache.nbytes() == 5 * 3 * 8
        got = cache.rows_for([1, 4])
        assert np.array_equal(got, rows[[1, 4]])

    def test_missing_position_raises(self):
        cache = IndexerKeyCache(d_index=3)
        cache.append(Rng(4).normal((4, 3)), [0, 1, 2, 3])
        with pytest.raises(ValueError, match="missing cached keys"):
            cache.rows_for([2, 7])

    def test_survives_sparse_positions(self):
        # rows stay addressable by original position after the kv cache has
        # dropped the in-between tokens
        cache = IndexerKeyCache(d_index=2)
        rows = Rng(5).normal((3, 2))
        cache.append(rows, [0, 5, 9])
        assert np.array_equal(cache.rows_for([5, 9]), rows[1:])

    def test_rejects_rewind(self):
        cache = IndexerKeyCache(d_index=2)
        cache.append(Rng(6).normal((2, 2)), [0, 1])
        with pytest.raises(ValueError, match="extend past"):
            cache.append(Rng(7).normal((1, 2)), [1])


class TestScoreBlock:
    def test_matches_scalar_reference(self):
        _, batch, params = small_setup()
        ids = np.arange(20)
        got = score_block(params, batch.x, batch.q_pre, ids, ids)
        want = reference_scores(params, batch.x, batch.q_pre)
        m = np.isfinite(want)
        assert np.max(np.abs(got[m] - want[m])) < 1e-10
        assert np.all(np.isneginf(got[~m]))

    def test_zero_gate_zeroes_support(self):
        _, batch, params = small_setup()
        params.g[:] = 0.0
        a = dense_scores(params, batch.x, batch.q_pre)
        assert np.all(a[np.isfinite(a)] == 0.0)

    def test_causal_mask(self):
        _, batch, params = small_setup()
        a = score_block(params, batch.x, batch.q_pre, np.array([3]),
                        np.array([2, 3, 4]))
        assert np.isfinite(a[0, 0]) and np.isfinite(a[0, 1])
        assert np.isneginf(a[0, 2])

    def test_cache_rows_match_recomputed(self):
        _, batch, params = small_setup()
        cache = IndexerKeyCache(params.d_index)
        cache.append(key_features(params, batch.x), np.arange(20))
        ids = np.arange(20)
        from_cache = score_block(params, batch.x, batch.q_pre, ids, ids,
                                 key_cache=cache)
        fresh = score_block(params, batch.x, batch.q_pre, ids, ids)
        assert np.array_equal(from_cache, fresh)


class TestImportance:
    def test_column_max_example(self):
        # importance is the columnwise max over the query set
        _, batch, params = small_setup()
        dense = dense_scores(params, batch.x, batch.q_pre)
        q_set = np.array([0, 1])
        imp = indexer_importance(params, batch.x, batch.q_pre, q_set=q_set)
        want = dense[q_set].max(axis=0)
        finite = np.isfinite(want)
        assert np.array_equal(imp[finite], want[finite])
        assert np.all(np.isneginf(imp[~finite]))

    def test_single_query_is_its_row(self):
        _, batch, params = small_setup()
        dense = dense_scores(params, batch.x, batch.q_pre)
        imp = indexer_importance(params, batch.x, batch.q_pre, q_set=[7])
        assert np.array_equal(imp[:8], dense[7, :8])
        assert np.all(np.isneginf(imp[8:]))

    def test_streamed_equals_dense_exactly(self):
        teacher = small_teacher()
        x0 = Rng(63).normal((16, 16))
        batch = distill_batch(teacher, x0, 0, sink_count=2)
        params = IndexerParams.init(teacher.config, Rng(64), h_index=2, d_index=3)
        dense = dense_scores(params, batch.x, batch.q_pre).max(axis=0)
        blk = indexer_importance(params, batch.x, batch.q_pre, q_blk=2, k_blk=3)
        assert np.array_equal(blk, dense)

    def test_empty_query_set_rejected(self):
        _, batch, params = small_setup()
        with pytest.raises(ValueError, match="empty query set"):
            indexer_importance(params, batch.x, batch.q_pre, q_set=[])

    def test_causality_of_importance(self):
        # rows after the last query must not influence any score
        _, batch, params = small_setup()
        q_set = np.arange(10)
        imp = indexer_importance(params, batch.x, batch.q_pre, q_set=q_set)
        x2 = batch.x.copy()
        x2[12:] = Rng(65).normal((8, 16)) * 5.0
        imp2 = indexer_importance(params, x2, batch.q_pre, q_set=q_set)
        assert np.array_equal(imp[:10], imp2[:10])

    def test_gate_scaling_preserves_keep_set(self):
        _, batch, params = small_setup()
        imp = indexer_importance(params, batch.x, batch.q_pre)
        scaled = IndexerParams(params.u_q, params.u_k, params.g * 3.0)
        imp2 = indexer_importance(scaled, batch.x, batch.q_pre)
        finite = np.isfinite(imp)
        assert np.allclose(imp2[finite], 3.0 * imp[finite], rtol=1e-12)
        assert np.array_equal(np.argsort(-imp), np.argsort(-imp2))


class TestPreEvict:
    def test_ratio_zero_keeps_all(self):
        _, batch, params = small_setup()
        plan = CompressionPlan(ratio=0.0, sink_count=3, local_window=2)
        keep, evicted = pre_evict(params, batch.x, batch.q_pre, plan)
        assert keep.tolist() == list(range(20))
        assert evicted.size == 0

    def test_keep_and_evicted_partition(self):
        _, batch, params = small_setup()
        plan = CompressionPlan(ratio=0.5, sink_count=3, local_window=2)
        keep, evicted = pre_evict(params, batch.x, batch.q_pre, plan)
        assert np.intersect1d(keep, evicted).size == 0
        assert np.union1d(keep, evicted).tolist() == list(range(20))
        assert np.all(np.isin([0, 1, 2, 18, 19], keep))


class TestDistillBatch:
    def test_builder_shapes(self):
        teacher, batch, _ = small_setup()
        assert batch.x.shape == (20, 16)
        assert batch.q_pre.shape == (4, 20, 4)
        assert batch.k_rot.shape == (2, 20, 4)
        assert batch.scale_dim == 16

    def test_sink_count_validation(self):
        teacher = small_teacher()
        x0 = Rng(66).normal((6, 16))
        with pytest.raises(ValueError, match="sink count"):
            distill_batch(teacher, x0, 0, sink_count=6)


class TestStreamingLoss:
    def test_block_size_invariance(self):
        _, batch, params = small_setup()
        base = streaming_distill_loss(params, batch, q_blk=20, k_blk=20)
        for qb, kb in ((1, 1), (3, 8), (7, 5), (20, 20)):
            assert streaming_distill_loss(params, batch, q_blk=qb, k_blk=kb) == base

    def test_pooled_vectors_match_teacher_oracle(self):
        teacher, batch, params = small_setup()
        t_imp, _ = pooled_vectors(params, batch)
        trace = teacher.forward(x0=Rng(60).normal((20, 16)))
        from kvgate.teacher import pooled_teacher_importance
        lt = trace.layers[0]
        want = pooled_teacher_importance(lt.q, lt.k, 16)
        assert np.max(np.abs(t_imp - want)) < 1e-12

    def test_sink_scores_are_irrelevant(self):
        _, batch, params = small_setup(sink_count=4)
        base = streaming_distill_loss(params, batch)
        noisy = DistillBatch(x=batch.x, q_pre=batch.q_pre, q_rot=batch.q_rot,
                             k_rot=batch.k_rot.copy(), scale_dim=batch.scale_dim,
                             sink_count=batch.sink_count)
        noisy.k_rot[:, :4, :] += 100.0
        assert streaming_distill_loss(params, noisy) == base

    def test_zero_when_student_equals_teacher(self):
        # force the student pooled vector to coincide with the teacher's by
        # comparing the teacher against itself through the KL
        from kvgate.numerics import kl_divergence
        _, batch, params = small_setup()
        t_imp, _ = pooled_vectors(params, batch)
        keep = np.arange(batch.sink_count, batch.length)
        assert kl_divergence(t_imp[keep], t_imp[keep]) == pytest.approx(0.0, abs=1e-12)


class TestGradients:
    def test_finite_difference_check(self):
        _, batch, params = small_setup()
        loss, grads = distill_gradients(params, batch)
        assert loss == streaming_distill_loss(params, batch)
        h = 1e-5
        rng = Rng(67)
        for name in ("u_q", "u_k", "g"):
            flat = getattr(params, name).reshape(-1)
            coords = set(rng.split(len(name)).integers(0, flat.size, 15).tolist())
            for c in coords:
                old = flat[c]
                flat[c] = old + h
                lp = streaming_distill_loss(params, batch)
                flat[c] = old - h
                lm = streaming_distill_loss(params, batch)
                flat[c] = old
                fd = (lp - lm) / (2 * h)
                an = grads[name].reshape(-1)[c]
                if abs(fd) > 1e-12 or abs(an) > 1e-12:
                    assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-4

    def test_zero_gate_kills_query_gradient(self):
        _, batch, params = small_setup()
        params.g[:] = 0.0
        _, grads = distill_gradients(params, batch)
        assert np.all(grads["u_q"] == 0.0)

    def test_sink_rows_contribute_nothing(self):
        _, batch, params = small_setup(sink_count=4)
        _, grads = distill_gradients(params, batch)
        perturbed = DistillBatch(x=batch.x.copy(), q_pre=batch.q_pre,
                                 q_rot=batch.q_rot, k_rot=batch.k_rot,
                                 scale_dim=batch.scale_dim,
                                 sink_count=batch.sink_count)
        perturbed.x[:4] = Rng(68).normal((4, 16))
        _, grads2 = distill_gradients(params, perturbed)
        assert np.array_equal(grads["u_k"], grads2["u_k"])
        assert np.array_equal(grads["g"], grads2["g"])


class TestSchedule:
    def test_endpoints(self):
        s = WsdSchedule()
        assert s.peak == 1e-3 and s.final == 7.5e-6
        assert s.lr(s.warmup_steps - 1) == pytest.approx(s.peak)
        assert s.lr(s.warmup_steps + 100) == s.peak
        assert s.lr(s.total_steps - 1) == pytest.approx(s.final)

    def test_warmup_is_linear(self):
        s = WsdSchedule(warmup_steps=4, stable_steps=2, decay_steps=2)
        assert [s.lr(i) for i in range(4)] == pytest.approx(
            [0.25e-3, 0.5e-3, 0.75e-3, 1e-3])

    def test_scaled_preserves_total(self):
        s = WsdSchedule().scaled(600)
        assert s.total_steps == 600
        assert s.peak == 1e-3 and s.final == 7.5e-6
        assert s.warmup_steps >= 1 and s.decay_steps >= 1

    def test_scaled_tiny(self):
        s = WsdSchedule().scaled(1)
        assert s.total_steps == 1

    def test_step_bounds(self):
        s = WsdSchedule(warmup_steps=1, stable_steps=1, decay_steps=1)
        with pytest.raises(ValueError):
            s.lr(3)


class TestTraining:
    def test_loss_decreases(self):
        teacher = small_teacher()
        batches = []
        for i in range(4):
            x0 = Rng(70 + i).normal((16, 16))
            batches.append(distill_batch(teacher, x0, 0, sink_count=2))
        params = IndexerParams.init(teacher.config, Rng(71), h_index=2, d_index=3)
        before = np.mean([streaming_distill_loss(params, b) for b in batches])
        losses = train_indexer(params, batches,
                               WsdSchedule().scaled(80))
        after = np.mean([streaming_distill_loss(params, b) for b in batches])
        assert len(losses) == 80
        assert after < before

    def test_zero_steps_leaves_params_unchanged(self):
        teacher = small_teacher()
        x0 = Rng(72).normal((12, 16))
        batch = distill_batch(teacher, x0, 0, sink_count=2)
        params = IndexerParams.init(teacher.config, Rng(73), h_index=1, d_index=2)
        before = params.copy()
        losses = train_indexer(params, [batch], WsdSchedule(), steps=0)
        assert losses == []
        assert np.array_equal(params.u_q, before.u_q)
        assert np.array_equal(params.u_k, before.u_k)
        assert np.array_equal(params.g, before.g)

    def test_deterministic(self):
        teacher = small_teacher()
        x0 = Rng(74).normal((12, 16))
        batch = distill_batch(teacher, x0, 0, sink_count=2)
        runs = []
        for _ in range(2):
            params = IndexerParams.init(teacher.config, Rng(75), h_index=1,
                                        d_index=2)
            losses = train_indexer(params, [batch], WsdSchedule().scaled(30))
            runs.append((losses, params))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1].u_q, runs[1][1].u_q)

    def test_divergence_guard(self):
        teacher = small_teacher()
        x0 = Rng(76).normal((12, 16))
        batch = distill_batch(teacher, x0, 0, sink_count=2)
        params = IndexerParams.init(teacher.config, Rng(77), h_index=1, d_index=2)
        params.u_k[0, 0] = np.inf
        with pytest.raises(DivergenceError):
            train_indexer(params, [batch], WsdSchedule().scaled(10))
