import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smtk import tensor as T
from smtk.checkpoint import decode_text, encode_text, read_tensors, write_tensors
from smtk.errors import FormatError
from smtk.gradcheck import check_gradients
from smtk.layers import MLP, Linear, Norm, ParamRegistry, ReLU, mlp
from smtk.tensor import ShapeError, Tensor


def leaf(data, name="x"):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True, name=name)


def finite(shape, lo=-5.0, hi=5.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, width=64))


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_gradient_of_sum_is_ones_times_b_transposed(self, rng):
        a, b = leaf(rng.standard_normal((4, 5)), "a"), leaf(rng.standard_normal((5, 3)), "b")
        T.backward(T.sum(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((4, 3)), rtol=1e-14)
        report = check_gradients(lambda: T.sum(T.matmul(a, b)), [a, b], rtol=1e-6)
        assert report.passed, report.failures

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((5, 4))
        out = T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_case(self):
        out = T.linear(Tensor([1.0, 1.0]), Tensor([[2.0], [3.0]]), Tensor([-1.0]))
        np.testing.assert_array_equal(out.data, [4.0])

    def test_broadcasts_over_leading_dims(self, rng):
        x = rng.standard_normal((2, 3, 4))
        w, b = rng.standard_normal((4, 5)), rng.standard_normal(5)
        np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, rtol=1e-13)

    def test_gradcheck(self, rng):
        x = leaf(rng.standard_normal((6, 3)))
        w, b = leaf(rng.standard_normal((3, 2)), "w"), leaf(rng.standard_normal(2), "b")
        r = rng.standard_normal((6, 2))
        assert check_gradients(lambda: T.sum(T.linear(x, w, b) * Tensor(r)), [x, w, b]).passed

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


class TestSoftmax:
    def test_constant_is_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.full(4, 7.0))).data, 0.25, rtol=1e-15)

    def test_hand_case(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], rtol=1e-14)

    def test_large_logits_stay_finite(self):
        out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-300)

    @given(finite((3, 5), -50, 50), st.integers(0, 1))
    def test_sums_to_one(self, x, axis):
        out = T.softmax(Tensor(x), axis=axis).data
        assert np.all(out > 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)

    def test_gradcheck_rows(self, rng):
        x = leaf(rng.standard_normal((2, 5)))
        r = rng.standard_normal((2, 5))
        assert check_gradients(lambda: T.sum(T.softmax(x, axis=1) * Tensor(r)), [x]).passed

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.standard_normal((4, 6)) * 10
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 2)))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square_gives_twice(self, rng):
        x = leaf(rng.standard_normal(5))
        T.backward(T.sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_repeated_calls_accumulate(self, rng):
        x = leaf(rng.standard_normal(4))
        loss = T.sum(x * x)
        T.backward(loss)
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 4 * x.data, rtol=1e-15)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(leaf(np.ones(3)) * 2.0)

    def test_constant_loss_rejected(self):
        with pytest.raises(ValueError):
            T.backward(T.sum(Tensor(np.ones(3))))

    def test_shared_subexpression_sums_paths(self):
        x = leaf([3.0])
        y = x * x
        T.backward(T.sum(y + y * x))  # d/dx (x^2 + x^3)
        np.testing.assert_allclose(x.grad, [2 * 3 + 3 * 9])

    def test_tape_is_execution_order(self, rng):
        x = leaf(rng.standard_normal(3))
        a = x * 2.0
        b = T.exp(a)
        c = T.relu(b - a)
        loss = T.sum(c)
        tape = T.Tape(loss)
        seqs = [n._seq for n in tape.nodes]
        assert seqs == sorted(seqs)
        assert tape.nodes[-1] is loss and tape.nodes[0] is x

    def test_no_grad_records_nothing(self):
        x = leaf([1.0, 2.0])
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad and y.is_leaf

    def test_bitwise_determinism(self, rng):
        data = rng.standard_normal((8, 4))

        def run():
            x = leaf(data)
            loss = T.sum(T.softmax(T.relu(x) * x, axis=0) * Tensor(np.arange(32.0).reshape(8, 4)))
            T.backward(loss)
            return loss.item(), x.grad

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2 and np.array_equal(g1, g2)


def _ops(rng):
    idx = rng.integers(0, 6, size=(4, 3))
    seg = np.array([0, 1, 1, 2, 2, 2])
    return {
        "add": lambda x: x + x * 0.5,
        "sub": lambda x: T.sub(x, T.exp(x * 0.1)),
        "mul": lambda x: x * x,
        "relu": lambda x: T.relu(x),
        "exp": lambda x: T.exp(x * 0.3),
        "max": lambda x: T.max(x, axis=0),
        "mean": lambda x: T.mean(x, axis=1),
        "norm": lambda x: T.norm(x, axis=1),
        "minmax": lambda x: T.minmax_normalize(x, axis=0),
        "standardize": lambda x: T.standardize(x),
        "log_softmax": lambda x: T.log_softmax(x, axis=1),
        "concat": lambda x: T.concat([x, x * x], axis=-1),
        "gather": lambda x: T.gather(x, idx),
        "segment_max": lambda x: T.segment_max(x, seg, 3),
        "reshape": lambda x: T.reshape(x, (3, 8)) * 2.0,
        "index": lambda x: x[np.arange(6), np.arange(6) % 4],
    }


@pytest.mark.parametrize("op", sorted(_ops(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradcheck(op, seed):
    rng = np.random.default_rng(seed)
    fn = _ops(np.random.default_rng(0))[op]
    x = leaf(rng.standard_normal((6, 4)))
    r = Tensor(np.random.default_rng(seed + 50).standard_normal(fn(x).shape))

    def loss():
        return T.sum(fn(x) * r)

    report = check_gradients(loss, [x])
    assert report.passed, report.failures


def test_affine_standardize_matches_composition(rng):
    x = leaf(rng.standard_normal((7, 3)))
    scale, shift = leaf(rng.standard_normal(3), "s"), leaf(rng.standard_normal(3), "t")
    fused = T.affine_standardize(x, scale, shift).data
    np.testing.assert_allclose(fused, T.standardize(x).data * scale.data + shift.data, atol=1e-13)
    r = rng.standard_normal((7, 3))
    assert check_gradients(lambda: T.sum(T.affine_standardize(x, scale, shift) * Tensor(r)),
                           [x, scale, shift]).passed


class TestReductions:
    def test_minmax_flat_slice_is_zero(self):
        out = T.minmax_normalize(Tensor([[2.0, 1.0], [2.0, 3.0], [2.0, 5.0]]), axis=0).data
        np.testing.assert_array_equal(out, [[0.0, 0.0], [0.0, 0.5], [0.0, 1.0]])

    @given(finite((5, 3)))
    def test_minmax_range(self, x):
        out = T.minmax_normalize(Tensor(x), axis=0).data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_norm_of_zero_vector_has_zero_gradient(self):
        x = leaf(np.zeros((2, 3)))
        T.backward(T.sum(T.norm(x, axis=1)))
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_max_gradient_goes_to_first_argmax(self):
        x = leaf([[1.0, 3.0, 3.0]])
        T.backward(T.sum(T.max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_segment_max_values(self):
        x = Tensor([[1.0, 5.0], [3.0, 2.0], [0.0, 0.0]])
        out = T.segment_max(x, np.array([0, 0, 1]), 2).data
        np.testing.assert_array_equal(out, [[3.0, 5.0], [0.0, 0.0]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather(Tensor(np.ones((3, 2))), np.array([[0, 3]]))


class TestLayers:
    def test_relu_hand_case(self):
        np.testing.assert_array_equal(ReLU()(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_identity_linear_layer(self, rng):
        reg = ParamRegistry(0)
        layer = Linear(reg, "id", 3, 3)
        layer.weight.data = np.eye(3)
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(mlp(Tensor(x), [layer]).data, x)

    def test_width_chaining_checked(self):
        reg = ParamRegistry(0)
        with pytest.raises(ShapeError):
            mlp(Tensor(np.ones((2, 3))), [Linear(reg, "a", 3, 4), Linear(reg, "b", 5, 2)])

    def test_norm_standardizes_per_channel(self, rng):
        x = rng.standard_normal((50, 3)) * [1, 10, 100] + [5, -5, 0]
        out = Norm(ParamRegistry(0), "n", 3)(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=0), 1.0, rtol=1e-3)

    def test_two_layer_mlp_gradcheck(self, rng):
        reg = ParamRegistry(3)
        net = MLP(reg, "m", [4, 6, 2])
        x = leaf(rng.standard_normal((9, 4)))
        r = rng.standard_normal((9, 2))
        report = check_gradients(lambda: T.sum(net(x) * Tensor(r)), [x] + reg.parameters())
        assert report.passed, report.failures

    def test_registry_rejects_duplicates_and_counts_once(self):
        reg = ParamRegistry(0)
        reg.create("w", (4, 4))
        reg.create("b", (4,), init="zeros")
        assert reg.total() == 20
        with pytest.raises(KeyError):
            reg.create("w", (2,))

    def test_seeded_initialization(self):
        a, b = ParamRegistry(7).create("w", (3, 5)), ParamRegistry(7).create("w", (3, 5))
        assert np.array_equal(a.data, b.data)
        assert np.all(np.abs(a.data) <= math.sqrt(6 / 8))

    def test_single_precision_option(self, rng):
        T.set_default_dtype(np.float32)
        x = leaf(rng.standard_normal((3, 2)))
        assert x.dtype == np.float32 and T.softmax(x).dtype == np.float32
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)


class TestCheckpoint:
    def test_layout_matches_hand_encoding(self, tmp_path):
        arr = np.array([[1.5, -2.0, 3.25]])
        path = tmp_path / "t.ckpt"
        write_tensors(path, {"w": arr})
        expected = (b"SMTK" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w"
                    + struct.pack("<B", 2) + struct.pack("<2Q", 1, 3) + struct.pack("<3d", 1.5, -2.0, 3.25))
        assert path.read_bytes() == expected

    @given(st.lists(finite((2, 3), -1e300, 1e300), min_size=1, max_size=3))
    def test_round_trip_bit_exact(self, tmp_path_factory, arrays_):
        path = tmp_path_factory.mktemp("ck") / "r.ckpt"
        tensors = {f"t{i}.é": a for i, a in enumerate(arrays_)}
        tensors["scalar"] = np.array(np.pi)
        write_tensors(path, tensors)
        back = read_tensors(path)
        assert list(back) == list(tensors)
        for name in tensors:
            assert back[name].shape == np.shape(tensors[name])
            assert back[name].tobytes() == np.asarray(tensors[name], dtype=float).tobytes()

    @pytest.mark.parametrize("damage,message", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ])
    def test_corruption_detected(self, tmp_path, damage, message):
        path = tmp_path / "c.ckpt"
        write_tensors(path, {"w": np.ones((2, 2))})
        path.write_bytes(damage(path.read_bytes()))
        with pytest.raises(FormatError, match=message):
            read_tensors(path)

    def test_text_round_trip(self):
        text = '{"k": "ünï"}'
        assert decode_text(encode_text(text)) == text
