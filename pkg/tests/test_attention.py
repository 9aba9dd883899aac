import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import causal, naive_attention, rule_allows
from phi3lab.attention import (
    AttnTensors,
    LayerKind,
    RopeParams,
    TileCounter,
    attention_weights,
    blocksparse_attention,
    dense_causal_attention,
    gqa_map,
    head_token_masks,
    layer_schedule,
    masked_attention,
    rope_apply,
)
from phi3lab.sparsity import SparsePattern, assign_offsets, block_mask, density, token_mask


def random_tensors(seed, heads=2, kv_heads=1, seq=8, head_dim=4, dtype=np.float64):
    return AttnTensors.random(seed, heads, kv_heads, seq, head_dim, dtype)


class TestAttnTensors:
    def test_rejects_nan(self):
        t = random_tensors(0)
        q = t.Q.copy()
        q[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            AttnTensors(q, t.K, t.V)

    def test_rejects_bad_grouping(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            AttnTensors(rng.standard_normal((3, 4, 2)), rng.standard_normal((2, 4, 2)), rng.standard_normal((2, 4, 2)))

    def test_scale(self):
        assert random_tensors(0, head_dim=16).scale == 0.25


class TestDenseCausal:
    def test_single_position_returns_value(self):
        t = random_tensors(1, heads=4, kv_heads=2, seq=1)
        out = dense_causal_attention(t)
        for h in range(4):
            assert np.array_equal(out[h, 0], t.V[h // 2, 0])

    def test_identical_keys_give_running_mean(self):
        rng = np.random.default_rng(2)
        k = np.repeat(rng.standard_normal((1, 1, 4)), 3, axis=1)
        v = rng.standard_normal((1, 3, 4))
        t = AttnTensors(rng.standard_normal((1, 3, 4)), k, v)
        w = attention_weights(t, np.tri(3, dtype=bool))
        assert np.allclose(w[0], [[1, 0, 0], [1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)
        running = np.cumsum(v[0], axis=0) / np.arange(1, 4)[:, None]
        assert np.allclose(dense_causal_attention(t)[0], running, atol=1e-15)

    def test_matches_naive_loop(self):
        t = random_tensors(3, heads=2, kv_heads=1, seq=8, head_dim=4)
        ref = naive_attention(t.Q, t.K, t.V, causal)
        assert np.abs(dense_causal_attention(t) - ref).max() < 1e-6

    def test_single_precision_matches_naive_loop(self):
        t = random_tensors(3, heads=2, kv_heads=1, seq=8, head_dim=4, dtype=np.float32)
        ref = naive_attention(t.Q, t.K, t.V, causal)
        assert np.abs(dense_causal_attention(t) - ref).max() < 1e-6

    def test_rows_sum_to_one(self):
        t = random_tensors(4, heads=4, kv_heads=2, seq=33)
        w = attention_weights(t, np.tri(33, dtype=bool))
        assert np.allclose(w.sum(-1), 1.0, atol=1e-6)
        assert not np.triu(w, 1).any()


class TestMaskedAttention:
    def test_full_mask_is_dense(self):
        t = random_tensors(5, seq=10)
        assert np.array_equal(masked_attention(t, np.tri(10, dtype=bool)), dense_causal_attention(t))

    def test_diagonal_only(self):
        t = random_tensors(6, heads=4, kv_heads=2, seq=6)
        out = masked_attention(t, np.eye(6, dtype=bool))
        for h in range(4):
            assert np.allclose(out[h], t.V[h // 2], atol=0)

    def test_figure_pattern_matches_naive(self):
        p = SparsePattern(4, 2, 3, 0)
        t = random_tensors(7, heads=2, kv_heads=1, seq=32)
        mask = token_mask(block_mask(p, 8), 32, 4)
        ref = naive_attention(t.Q, t.K, t.V, lambda h, i, j: bool(mask[i, j]))
        assert np.abs(masked_attention(t, mask) - ref).max() < 1e-6

    def test_empty_row_rejected(self):
        t = random_tensors(8, seq=3)
        mask = np.tri(3, dtype=bool)
        mask[1] = False
        with pytest.raises(ValueError, match="no allowed key"):
            masked_attention(t, mask)

    def test_acausal_rejected(self):
        t = random_tensors(8, seq=3)
        with pytest.raises(ValueError, match="causal"):
            masked_attention(t, np.ones((3, 3), dtype=bool))


class TestBlocksparse:
    def test_stride_one_equals_dense(self):
        t = random_tensors(9, heads=4, kv_heads=2, seq=40, dtype=np.float32)
        p = SparsePattern(8, 2, 1, 0)
        c = TileCounter()
        out = blocksparse_attention(t, assign_offsets(4, 2, 1), p, c)
        assert np.abs(out - dense_causal_attention(t)).max() < 1e-5
        assert c.computed == c.dense == 4 * 15

    def test_figure_pattern_six_heads(self):
        t = random_tensors(10, heads=6, kv_heads=6, seq=64, head_dim=8, dtype=np.float32)
        p = SparsePattern(8, 2, 3, 0)
        a = assign_offsets(6, 6, 3)
        assert a.offsets == (0, 1, 2, 0, 1, 2)
        c = TileCounter()
        out = blocksparse_attention(t, a, p, c)
        ref = masked_attention(t, head_token_masks(a, p, 64))
        assert np.abs(out - ref).max(axis=(1, 2)).max() < 1e-5
        expected = sum(density(block_mask(p.with_offset(o), 8)) * 36 for o in a.offsets)
        assert c.computed == round(expected)
        assert c.per_head == [block_mask(p.with_offset(o), 8).allowed_count for o in a.offsets]

    def test_local_window_covers_sequence(self):
        t = random_tensors(11, heads=3, kv_heads=3, seq=16)
        out = blocksparse_attention(t, assign_offsets(3, 3, 3), SparsePattern(8, 2, 3, 0))
        assert np.abs(out - dense_causal_attention(t)).max() < 1e-12

    def test_ragged_final_block(self):
        t = random_tensors(12, heads=2, kv_heads=1, seq=29)
        p = SparsePattern(4, 1, 2, 0)
        a = assign_offsets(2, 1, 2)
        ref = naive_attention(t.Q, t.K, t.V, lambda h, i, j: j <= i and rule_allows(i // 4, j // 4, 1, 2, 0))
        assert np.abs(blocksparse_attention(t, a, p) - ref).max() < 1e-12

    def test_assignment_mismatch(self):
        t = random_tensors(13, heads=4, kv_heads=2)
        with pytest.raises(ValueError):
            blocksparse_attention(t, assign_offsets(2, 2, 3), SparsePattern(2, 1, 3, 0))

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        seq=st.integers(2, 128),
        B=st.sampled_from([2, 4, 8, 16]),
        lb=st.integers(1, 4),
        s=st.integers(1, 5),
        heads=st.sampled_from([1, 2, 4, 8]),
        data=st.data(),
    )
    def test_oracle_equivalence(self, seed, seq, B, lb, s, heads, data):
        kv = data.draw(st.sampled_from([d for d in (1, 2, 4, 8) if heads % d == 0]))
        t = AttnTensors.random(seed, heads, kv, seq, 8, np.float32)
        p = SparsePattern(B, lb, s, 0)
        a = assign_offsets(heads, kv, s)
        c = TileCounter()
        out = blocksparse_attention(t, a, p, c)
        ref = masked_attention(t, head_token_masks(a, p, seq))
        assert np.abs(out - ref).max() < 1e-5
        nb = -(-seq // B)
        assert c.computed == sum(block_mask(p.with_offset(o), nb).allowed_count for o in a.offsets)

    def test_causality_under_mutation(self):
        rng = np.random.default_rng(14)
        p = SparsePattern(4, 2, 3, 0)
        a = assign_offsets(4, 2, 3)
        for case in range(10):
            t = AttnTensors.random(100 + case, 4, 2, 24, 8, np.float64)
            i = int(rng.integers(0, 23))
            K, V = t.K.copy(), t.V.copy()
            K[:, i + 1:] += rng.standard_normal(K[:, i + 1:].shape) * 5
            V[:, i + 1:] += rng.standard_normal(V[:, i + 1:].shape) * 5
            before = blocksparse_attention(t, a, p)
            after = blocksparse_attention(AttnTensors(t.Q, K, V), a, p)
            assert np.array_equal(before[:, : i + 1], after[:, : i + 1])

    def test_gqa_equals_replicated_multihead(self):
        t = random_tensors(15, heads=8, kv_heads=2, seq=20)
        K, V = t.kv_for_heads()
        full = AttnTensors(t.Q, K, V)
        assert np.array_equal(dense_causal_attention(t), dense_causal_attention(full))
        p = SparsePattern(4, 1, 2, 0)
        a_gqa = assign_offsets(8, 2, 2)
        a_mha = assign_offsets(8, 8, 2)
        # give the multi-head run the same per-head offsets as the grouped run
        a_mha = type(a_mha)(a_gqa.offsets, 8, 2)
        assert np.array_equal(blocksparse_attention(t, a_gqa, p), blocksparse_attention(full, a_mha, p))


class TestGQAMap:
    def test_group_of_four(self):
        assert gqa_map(5, 32, 8) == 1

    def test_identity(self):
        assert [gqa_map(h, 6, 6) for h in range(6)] == list(range(6))

    def test_preimages(self):
        counts = np.bincount([gqa_map(h, 32, 8) for h in range(32)])
        assert counts.tolist() == [4] * 8

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            gqa_map(32, 32, 8)


class TestRope:
    rp = RopeParams(head_dim=8)

    def test_position_zero_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 8))
        assert np.array_equal(rope_apply(x, [0], self.rp), x)

    def test_pair_norms_preserved(self):
        x = np.random.default_rng(1).standard_normal((16, 8))
        y = rope_apply(x, np.arange(16) * 37, self.rp)
        nx = np.hypot(x[:, 0::2], x[:, 1::2])
        ny = np.hypot(y[:, 0::2], y[:, 1::2])
        assert np.abs(nx - ny).max() < 1e-6

    def test_relative_position(self):
        rng = np.random.default_rng(2)
        q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
        a = float((rope_apply(q, [5], self.rp) * rope_apply(k, [2], self.rp)).sum())
        b = float((rope_apply(q, [7], self.rp) * rope_apply(k, [4], self.rp)).sum())
        assert abs(a - b) < 1e-6

    def test_first_pair_angle(self):
        y = rope_apply(np.array([[1.0, 0.0, 1.0, 0.0]]), [1], RopeParams(4, 10000.0))
        assert np.allclose(y[0, :2], [np.cos(1.0), np.sin(1.0)])
        assert np.allclose(y[0, 2:], [np.cos(0.01), np.sin(0.01)])

    def test_odd_head_dim(self):
        with pytest.raises(ValueError):
            RopeParams(head_dim=7)


class TestLayerSchedule:
    def test_one(self):
        assert layer_schedule(1).kinds == (LayerKind.DENSE,)

    def test_four(self):
        D, S = LayerKind.DENSE, LayerKind.SPARSE
        assert layer_schedule(4).kinds == (D, S, D, S)

    def test_thirty_two(self):
        assert layer_schedule(32).counts() == (16, 16)

    @given(st.integers(1, 200))
    def test_strict_alternation(self, n):
        kinds = layer_schedule(n).kinds
        assert all(a is not b for a, b in zip(kinds, kinds[1:]))

    def test_zero_layers(self):
        with pytest.raises(ValueError):
            layer_schedule(0)
