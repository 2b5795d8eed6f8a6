import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smtk import blocks as B
from smtk import tensor as T
from smtk.geometry import NeighborIndex, build_pooling_map, knn
from smtk.gradcheck import SUITES, run_suite
from smtk.layers import ParamRegistry
from smtk.tensor import ShapeError, Tensor

C, N, K, CLASSES = 8, 24, 6, 3


def setup(seed=0, kind="local", mask=None, multiplier=False, n=N, k=K):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, (n, 3))
    reg = ParamRegistry(seed)
    pe = B.PositionEncoding(reg, "pe", C, kind)
    params = B.VectorAttention(reg, "attn", C, pe, mask=mask, n_classes=CLASSES, multiplier=multiplier)
    return Tensor(rng.standard_normal((n, C))), pos, knn(pos, k), params, reg


def set_linear(layer, weight, bias=0.0):
    layer.weight.data = np.broadcast_to(weight, layer.weight.shape).copy()
    layer.bias.data = np.full(layer.bias.shape, bias)


class TestMaskConfig:
    def test_tau_required_iff_hard(self):
        B.MaskConfig("hard", 0.5)
        B.MaskConfig("soft")
        with pytest.raises(ValueError):
            B.MaskConfig("hard")
        with pytest.raises(ValueError):
            B.MaskConfig("soft", 0.5)
        with pytest.raises(ValueError):
            B.MaskConfig("hard", 1.5)
        with pytest.raises(ValueError):
            B.MaskConfig("sometimes")


class TestPointAttention:
    def test_single_neighbor_returns_value_plus_encoding(self):
        f, pos, _, params, _ = setup(k=1)
        idx = knn(pos, 1)
        out = B.pt_attention(f, pos, idx, params).data
        pe0 = params.pe.local_mlp(Tensor(np.zeros((N, 1, 3)))).data[:, 0]
        np.testing.assert_allclose(out, params.v(f).data + pe0, atol=1e-13)

    def test_uniform_inputs_give_uniform_weights(self):
        f, _, _, params, _ = setup()
        pos = np.zeros((N, 3))
        f = Tensor(np.ones((N, C)))
        idx = knn(pos, K)
        w = params.attention_weights(f, pos, idx).data
        np.testing.assert_allclose(w, 1.0 / K, atol=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_weights_sum_to_one(self, seed):
        f, pos, idx, params, _ = setup(seed, kind="enhanced")
        np.testing.assert_allclose(params.attention_weights(f, pos, idx).data.sum(axis=1), 1.0, atol=1e-12)

    def test_width_mismatch(self):
        _, pos, idx, params, _ = setup()
        with pytest.raises(ShapeError):
            B.pt_attention(Tensor(np.ones((N, C + 1))), pos, idx, params)

    def test_ptv2_multiplier_one_reduces_to_pt(self):
        f, pos, idx, params, _ = setup(multiplier=True)
        last = params.multiplier.layers[-1]
        set_linear(last, 0.0, 1.0)
        np.testing.assert_allclose(B.ptv2_attention(f, pos, idx, params).data,
                                   B.pt_attention(f, pos, idx, params).data, atol=1e-13)

    def test_ptv2_multiplier_zero_leaves_position_bias(self):
        f, pos, idx, params, _ = setup(multiplier=True)
        set_linear(params.multiplier.layers[-1], 0.0, 0.0)
        f2 = Tensor(np.random.default_rng(9).standard_normal(f.shape))
        # with the relation vector zeroed, weights depend on positions alone
        w1 = T.softmax(params.attn(params.pe(pos, idx)), axis=1).data
        values = B.group(params.v(f2), idx).data + params.pe(pos, idx).data
        np.testing.assert_allclose(B.ptv2_attention(f2, pos, idx, params).data,
                                   (w1 * values).sum(axis=1), atol=1e-12)

    def test_ptv2_needs_multiplier(self):
        f, pos, idx, params, _ = setup()
        with pytest.raises(ValueError):
            B.ptv2_attention(f, pos, idx, params)

    def test_neighbor_order_invariance(self):
        f, pos, idx, params, _ = setup(kind="enhanced", mask=B.MaskConfig("soft"))
        rng = np.random.default_rng(5)
        shuffled = np.array([row[rng.permutation(K)] for row in idx.indices])
        a = B.smtransformer(f, pos, idx, params).data
        b = B.smtransformer(f, pos, NeighborIndex(shuffled), params).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestMasks:
    def test_identical_features_give_zero_mask(self):
        _, pos, idx, params, _ = setup(mask=B.MaskConfig("soft"))
        f = Tensor(np.tile(np.arange(C, dtype=float), (N, 1)))
        np.testing.assert_array_equal(B.soft_mask(f, idx, params).data, 0.0)
        np.testing.assert_array_equal(B.smtransformer(f, pos, idx, params).data, 0.0)

    def test_identical_scores_give_zero_hard_mask(self):
        f, _, idx, params, _ = setup(mask=B.MaskConfig("hard", 0.5))
        params.score_k.weight.data = params.score_q.weight.data.copy()
        f = Tensor(np.tile(np.arange(C, dtype=float), (N, 1)))
        np.testing.assert_array_equal(B.hard_mask(f, idx, params, 0.5).data, 0.0)

    def test_hand_rolled_three_point_case(self):
        """Center scores one-hot on class 0, neighbors one-hot on class 1."""
        reg = ParamRegistry(0)
        pe = B.PositionEncoding(reg, "pe", 2, "local")
        params = B.VectorAttention(reg, "a", 2, pe, mask=B.MaskConfig("soft"), n_classes=2)
        big = 50.0
        # feature (1, 0) scores class 0 and (0, 1) class 1, for both projections
        for proj in (params.score_q, params.score_k):
            proj.weight.data = np.array([[big, -big], [-big, big]])
            proj.bias.data = np.zeros(2)
        f = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
        idx = NeighborIndex(np.array([[0, 1, 2], [1, 0, 2], [2, 0, 1]]))
        mask = B.soft_mask(f, idx, params).data

        qs = T.softmax(params.score_q(f)).data
        ks = T.softmax(params.score_k(f)).data
        d = ks[idx.indices] - qs[:, None, :]
        lo, hi = d.min(axis=1, keepdims=True), d.max(axis=1, keepdims=True)
        expected = np.abs(((d - lo) / (hi - lo)).max(axis=2))
        np.testing.assert_allclose(mask, expected, atol=1e-15)
        # row 0 differences: self (0, 0), opposite one-hot (-1, 1), midpoint (-0.5, 0.5)
        np.testing.assert_allclose(mask[0], [1.0, 1.0, 0.5], atol=1e-12)
        assert B.hard_mask(f, idx, params, 0.5).data[0, 1] == 1.0

    @given(st.integers(0, 2**31), st.sampled_from([0.1, 1.0, 10.0]))
    def test_ranges(self, seed, scale):
        f, pos, idx, params, _ = setup(seed % 1000, mask=B.MaskConfig("soft"))
        f = Tensor(f.data * scale)
        soft = B.soft_mask(f, idx, params).data
        assert soft.min() >= 0.0 and soft.max() <= 1.0
        hard_lo = B.hard_mask(f, idx, params, 0.0).data
        hard_hi = B.hard_mask(f, idx, params, 1.0).data
        assert set(np.unique(hard_lo)) <= {0.0, 1.0}
        assert np.all(hard_lo >= hard_hi)

    def test_hard_mask_tau_range(self):
        f, _, idx, params, _ = setup(mask=B.MaskConfig("soft"))
        with pytest.raises(ValueError):
            B.hard_mask(f, idx, params, -0.1)

    def test_hard_mode_selects_binary_mask(self):
        f, pos, idx, params, _ = setup(mask=B.MaskConfig("hard", 0.5))
        mask = B.hard_mask(f, idx, params, 0.5).data
        expected = params.attend(f, f, pos, idx, mask=Tensor(mask)).data
        np.testing.assert_array_equal(B.smtransformer(f, pos, idx, params).data, expected)

    def test_masks_need_score_projections(self):
        f, _, idx, params, _ = setup()
        with pytest.raises(ValueError):
            B.soft_mask(f, idx, params)


class TestPositionEncoding:
    def test_self_neighbor_encoding_is_shared_constant(self):
        _, pos, idx, params, _ = setup(kind="enhanced")
        pe = B.enhanced_position_encoding(pos, idx, params.pe).data
        np.testing.assert_allclose(pe[:, 0], np.broadcast_to(pe[0, 0], pe[:, 0].shape), atol=1e-14)

    def test_global_difference_translation_invariant_when_linear(self):
        _, pos, idx, params, _ = setup(kind="enhanced")
        params.pe.global_mlp.layers = [params.pe.global_mlp.layers[0]]  # linear only
        shift = np.array([3.0, -2.0, 0.5])
        a = B.enhanced_position_encoding(pos, idx, params.pe).data
        b = B.enhanced_position_encoding(pos + shift, idx, params.pe).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_enhanced_with_zero_global_equals_local_on_offsets(self):
        _, pos, idx, params, _ = setup(kind="enhanced")
        reg = ParamRegistry(1)
        local = B.PositionEncoding(reg, "loc", C, "local")
        first = params.pe.local_mlp.layers[0]
        set_linear(params.pe.global_mlp.layers[-1], 0.0, 0.0)
        local.local_mlp.layers[0].weight.data = first.weight.data[C:]
        local.local_mlp.layers[0].bias.data = first.bias.data
        for src, dst in zip(params.pe.local_mlp.layers[1:], local.local_mlp.layers[1:]):
            for attr in ("weight", "bias", "scale", "shift"):
                if hasattr(src, attr) and getattr(src, attr) is not None:
                    getattr(dst, attr).data = getattr(src, attr).data
        np.testing.assert_allclose(B.enhanced_position_encoding(pos, idx, params.pe).data,
                                   B.enhanced_position_encoding(pos, idx, local).data, atol=1e-12)

    def test_sharing_key(self):
        reg = ParamRegistry(0)
        pe = reg.share("level0", lambda: B.PositionEncoding(reg, "level0.pe", C, sharing_key="level0"))
        again = reg.share("level0", lambda: B.PositionEncoding(reg, "other", C))
        assert again is pe and pe.sharing_key == "level0"

    def test_width_mismatch(self):
        reg = ParamRegistry(0)
        with pytest.raises(ShapeError):
            B.VectorAttention(reg, "a", C, B.PositionEncoding(reg, "pe", C + 1))


class TestReductions:
    @pytest.mark.parametrize("seed", range(3))
    def test_smtransformer_without_mask_is_pt_bitwise(self, seed):
        f, pos, idx, params, _ = setup(seed, kind="local", mask=B.MaskConfig("soft"))
        a = B.smtransformer(f, pos, idx, params, mask=B.MaskConfig("none")).data
        b = B.pt_attention(f, pos, idx, params).data
        assert np.array_equal(a, b)

    def test_identity_map_saub_is_skip_attention_plus_residual(self):
        rng = np.random.default_rng(3)
        reg = ParamRegistry(3)
        pos = rng.uniform(-1, 1, (N, 3))
        idx = knn(pos, K)
        pe = B.PositionEncoding(reg, "pe", C)
        up = B.SAUB(reg, "up", 5, 4, C, pe)
        f_in2, f_l, f_h = (Tensor(rng.standard_normal((N, w))) for w in (5, 4, C))
        out = B.saub(f_in2, f_l, f_h, B.identity_map(N), pos, idx, up).data
        f_mid = up.proj_in(T.concat([f_in2, f_l], axis=-1))
        expected = up.proj_out(B.skip_attention(f_h, f_mid, pos, idx, up.attn) + f_h + f_mid).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_skip_attention_on_same_features_is_self_attention(self):
        f, pos, idx, params, _ = setup(kind="enhanced")
        np.testing.assert_array_equal(B.skip_attention(f, f, pos, idx, params).data,
                                      B.pt_attention(f, pos, idx, params).data)

    def test_zero_attention_path_leaves_projections(self):
        rng = np.random.default_rng(0)
        reg = ParamRegistry(0)
        pos = rng.uniform(-1, 1, (N, 3))
        idx = knn(pos, K)
        block = B.SMTB(reg, "b", 5, C, 4, B.PositionEncoding(reg, "pe", C))
        for layer in (block.attn.v, block.attn.pe.local_mlp.layers[-1]):
            set_linear(layer, 0.0, 0.0)
        f_in = Tensor(rng.standard_normal((N, 5)))
        expected = block.proj_out(block.proj_in(f_in)).data
        np.testing.assert_allclose(B.smtb(f_in, pos, idx, block).data, expected, atol=1e-13)


class TestShapes:
    @pytest.mark.parametrize("n", [5, 17, 40])
    def test_smtb_shapes(self, n):
        rng = np.random.default_rng(n)
        reg = ParamRegistry(0)
        pos = rng.uniform(size=(n, 3))
        block = B.SMTB(reg, "b", 3, C, 11, B.PositionEncoding(reg, "pe", C), mask=B.MaskConfig("soft"),
                       n_classes=2)
        assert B.smtb(Tensor(pos), pos, knn(pos, 4), block).shape == (n, 11)
        with pytest.raises(ShapeError):
            B.smtb(Tensor(np.ones((n, 4))), pos, knn(pos, 4), block)

    @pytest.mark.parametrize("grid", [0.3, 0.6, 5.0])
    def test_upsampling_output_is_fine_resolution(self, grid):
        rng = np.random.default_rng(1)
        reg = ParamRegistry(0)
        pos = rng.uniform(size=(30, 3))
        pmap = build_pooling_map(pos, grid)
        idx = knn(pos, 5)
        f_in2, f_l = Tensor(rng.standard_normal((pmap.m, 6))), Tensor(rng.standard_normal((pmap.m, 6)))
        f_h = Tensor(rng.standard_normal((30, C)))
        saub = B.SAUB(reg, "s", 6, 6, C, B.PositionEncoding(reg, "pe", C))
        gub = B.GUB(reg, "g", 6, 6, C)
        assert saub(f_in2, f_l, f_h, pmap, pos, idx).shape == (30, C)
        assert gub(f_in2, f_l, f_h, pmap, pos, idx).shape == (30, C)
        with pytest.raises(ShapeError):
            saub(f_in2, f_l, Tensor(np.ones((29, C))), pmap, pos, idx)

    def test_skip_attention_shape_mismatch(self):
        f, pos, idx, params, _ = setup()
        with pytest.raises(ShapeError):
            B.skip_attention(f, Tensor(np.ones((N, C - 1))), pos, idx, params)


@pytest.mark.parametrize("suite", [s for s in SUITES if s != "network"])
def test_block_gradcheck_seed_3(suite):
    report = run_suite(suite, 3)
    assert report.passed, report.failures
