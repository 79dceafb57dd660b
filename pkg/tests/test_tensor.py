"""Tape engine: recording, backward sweep, accumulation, serialization."""

import numpy as np
import pytest

from aggsearch.errors import FormatError, ShapeError, TapeError
from aggsearch.tensor import (
    Tape, Tensor, gather, load_tensor, save_tensor, weighted_sum,
)
from aggsearch import ops

from helpers import fd_gradient, rel_err


class TestForwardRecord:
    def test_elementwise_add(self):
        t = Tape()
        a = t.leaf(np.ones((1, 1, 2, 2)))
        b = t.leaf(2 * np.ones((1, 1, 2, 2)))
        out = a + b
        np.testing.assert_array_equal(out.data, 3 * np.ones((1, 1, 2, 2)))

    def test_shape_mismatch_names_op_and_dims(self):
        t = Tape()
        a = t.leaf(np.ones((1, 1, 2, 2)))
        b = t.leaf(np.ones((1, 1, 3, 3)))
        with pytest.raises(ShapeError) as e:
            a + b
        msg = str(e.value)
        assert "add" in msg and "(1, 1, 2, 2)" in msg and "(1, 1, 3, 3)" in msg

    def test_constant_inputs_stay_off_tape(self):
        t = Tape()
        a = t.leaf(np.ones(3))
        c = Tensor(np.ones(3))
        out = a + c
        assert out.grad_id is not None and c.grad_id is None

    def test_mixed_tapes_rejected(self):
        a = Tape().leaf(np.ones(2))
        b = Tape().leaf(np.ones(2))
        with pytest.raises(TapeError):
            a + b

    def test_extent_zero_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 0)))

    def test_u8_arithmetic_rejected(self):
        a = Tensor(np.zeros(3, dtype=np.uint8))
        b = Tensor(np.zeros(3))
        with pytest.raises(ShapeError):
            a + b


class TestBackward:
    def test_sum_gradient_is_ones(self):
        t = Tape()
        x = t.leaf(np.arange(6.0).reshape(2, 3))
        grads = t.backward(x.sum())
        np.testing.assert_array_equal(grads[x.grad_id].data, np.ones((2, 3)))

    def test_sigmoid_at_zero(self):
        t = Tape()
        x = t.leaf(np.zeros((2, 2)))
        root = ops.sigmoid(x).sum()
        grads = t.backward(root)
        np.testing.assert_allclose(grads[x.grad_id].data, 0.25 * np.ones((2, 2)), atol=1e-15)

    def test_add_mul_chain_matches_product_rule(self):
        rng = np.random.default_rng(7)
        t = Tape()
        a = t.leaf(rng.normal(size=(2, 3)))
        b = t.leaf(rng.normal(size=(2, 3)))
        c = t.leaf(rng.normal(size=(2, 3)))
        root = ((a + b) * c).sum()
        grads = t.backward(root)
        np.testing.assert_allclose(grads[a.grad_id].data, c.data, rtol=1e-12)
        np.testing.assert_allclose(grads[b.grad_id].data, c.data, rtol=1e-12)
        np.testing.assert_allclose(grads[c.grad_id].data, a.data + b.data, rtol=1e-12)

    def test_add_mul_chain_matches_finite_differences(self):
        # Expected values computed by the central-difference oracle at eps=1e-3.
        rng = np.random.default_rng(11)
        arrs = [rng.normal(size=(2, 2)) for _ in range(3)]

        def run():
            t = Tape()
            a, b, c = (t.leaf(x) for x in arrs)
            root = ((a + b) * c).sum()
            return t, (a, b, c), root

        t, leaves, root = run()
        grads = t.backward(root)
        for arr, leaf in zip(arrs, leaves):
            num = fd_gradient(lambda: run()[2].item(), arr)
            assert rel_err(grads[leaf.grad_id].data, num) <= 1e-6

    def test_five_op_chain_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        arrs = [rng.normal(size=(2, 3)) for _ in range(2)]

        def run():
            t = Tape()
            x, y = (t.leaf(a) for a in arrs)
            z = ops.sigmoid(x * y)
            w = ops.relu(z + x)
            root = (w * w).sum()
            return t, (x, y), root

        t, leaves, root = run()
        grads = t.backward(root)
        for arr, leaf in zip(arrs, leaves):
            num = fd_gradient(lambda: run()[2].item(), arr)
            assert rel_err(grads[leaf.grad_id].data, num) <= 1e-6

    def test_reuse_accumulates(self):
        t = Tape()
        x = t.leaf(np.array([3.0]))
        root = (x + x).sum()
        grads = t.backward(root)
        np.testing.assert_array_equal(grads[x.grad_id].data, [2.0])

    def test_unreachable_leaf_gets_zeros(self):
        t = Tape()
        x = t.leaf(np.ones((2, 2)))
        y = t.leaf(np.ones((4,)))
        grads = t.backward(x.sum())
        np.testing.assert_array_equal(grads[y.grad_id].data, np.zeros(4))

    def test_non_scalar_root_rejected(self):
        t = Tape()
        x = t.leaf(np.ones((2, 2)))
        with pytest.raises(TapeError):
            t.backward(x + x)

    def test_root_off_tape_rejected(self):
        t = Tape()
        t.leaf(np.ones(2))
        with pytest.raises(TapeError):
            t.backward(Tensor(np.ones(1)))

    def test_backward_linearity_over_roots(self):
        rng = np.random.default_rng(5)
        t = Tape()
        x = t.leaf(rng.normal(size=(3, 3)))
        y = t.leaf(rng.normal(size=(3, 3)))
        r1 = (x * y).sum()
        r2 = ops.sigmoid(x).sum()
        r12 = r1 + r2
        g12 = t.backward(r12)
        g1 = t.backward(r1)
        g2 = t.backward(r2)
        for leaf in (x, y):
            np.testing.assert_allclose(
                g12[leaf.grad_id].data,
                g1[leaf.grad_id].data + g2[leaf.grad_id].data, rtol=1e-12)

    def test_replay_is_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(123)
            t = Tape()
            x = t.leaf(rng.normal(size=(4, 4)))
            y = t.leaf(rng.normal(size=(4, 4)))
            root = (ops.sigmoid(x * y) + x).sum()
            g = t.backward(root)
            return root.data.copy(), g[x.grad_id].data.copy()

        r1, gx1 = run()
        r2, gx2 = run()
        assert np.array_equal(r1, r2) and np.array_equal(gx1, gx2)


class TestCompositePrimitives:
    def test_weighted_sum_matches_explicit(self):
        rng = np.random.default_rng(0)
        t = Tape()
        w = t.leaf(rng.normal(size=3))
        xs = [t.leaf(rng.normal(size=(2, 2))) for _ in range(3)]
        out = weighted_sum(w, xs)
        expect = sum(w.data[i] * xs[i].data for i in range(3))
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)

    def test_weighted_sum_finite_differences(self):
        rng = np.random.default_rng(1)
        warr = rng.normal(size=3)
        xarrs = [rng.normal(size=(2, 2)) for _ in range(3)]

        def run():
            t = Tape()
            w = t.leaf(warr)
            xs = [t.leaf(a) for a in xarrs]
            root = (weighted_sum(w, xs) * weighted_sum(w, xs)).sum()
            return t, w, xs, root

        t, w, xs, root = run()
        grads = t.backward(root)
        for arr, leaf in [(warr, w), *zip(xarrs, xs)]:
            num = fd_gradient(lambda: run()[3].item(), arr)
            assert rel_err(grads[leaf.grad_id].data, num) <= 1e-6

    def test_gather_backward_scatters(self):
        t = Tape()
        v = t.leaf(np.arange(5.0))
        out = gather(v, [1, 3, 1])
        np.testing.assert_array_equal(out.data, [1.0, 3.0, 1.0])
        grads = t.backward(out.sum())
        np.testing.assert_array_equal(grads[v.grad_id].data, [0, 2, 0, 1, 0])

    def test_gather_range_check(self):
        t = Tape()
        v = t.leaf(np.arange(3.0))
        with pytest.raises(ShapeError):
            gather(v, [0, 3])


class TestBinaryFormat:
    @pytest.mark.parametrize("dtype,data", [
        ("f64", np.linspace(-2, 2, 24).reshape(2, 3, 4)),
        ("f32", np.linspace(-1, 1, 6).reshape(2, 3).astype(np.float32)),
        ("u8", np.arange(12, dtype=np.uint8).reshape(3, 4)),
    ])
    def test_round_trip(self, tmp_path, dtype, data):
        p = tmp_path / "t.agt"
        save_tensor(p, Tensor(data))
        back = load_tensor(p)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back.data, data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.agt"
        p.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.agt"
        save_tensor(p, Tensor(np.ones(4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_tensor(p)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "h.agt"
        save_tensor(p, Tensor(np.zeros((2, 3), dtype=np.float32)))
        raw = p.read_bytes()
        assert raw[:4] == b"AGT1"
        assert raw[4] == 0 and raw[5] == 2
        assert int.from_bytes(raw[6:10], "little") == 2
        assert int.from_bytes(raw[10:14], "little") == 3
