import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypercast import autodiff as ad
from hypercast.autodiff import Parameter, Tape, Tensor, gradient_check

TOL = 1e-4


def away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestOpGradients:
    """Every catalogue op against central finite differences."""

    def test_add_sub_mul_broadcast(self, rng):
        b = Tensor(rng.normal(size=(1, 4)))
        assert gradient_check(lambda x: ad.sum_(ad.add(x, b) * ad.sub(x, b)), rng.normal(size=(3, 4))) < TOL
        c = rng.normal(size=(3, 4))
        assert gradient_check(lambda x: ad.sum_(ad.mul(Tensor(c), x)), rng.normal(size=(1, 4))) < TOL

    def test_scale_and_mean(self, rng):
        for axis in (None, 0, 1, (0, 2), -1):
            f = lambda x, a=axis: ad.sum_(ad.mean(ad.scale(x, 2.5), axis=a) * ad.mean(x, axis=a))
            assert gradient_check(f, rng.normal(size=(2, 3, 4))) < TOL

    def test_relu_and_leaky_relu(self, rng):
        x = away_from_zero(rng, (5, 6))
        w = rng.normal(size=(5, 6))
        assert gradient_check(lambda t: ad.sum_(ad.relu(t) * Tensor(w)), x) < TOL
        assert gradient_check(lambda t: ad.sum_(ad.leaky_relu(t) * Tensor(w)), x) < TOL

    def test_matmul_2d_and_batched(self, rng):
        W = rng.normal(size=(4, 3))
        assert gradient_check(lambda x: ad.sum_(ad.matmul(x, Tensor(W)) * ad.matmul(x, Tensor(W))),
                              rng.normal(size=(2, 5, 4))) < TOL
        X = rng.normal(size=(2, 5, 4))
        assert gradient_check(lambda w: ad.sum_(ad.matmul(Tensor(X), w) * ad.matmul(Tensor(X), w)), W) < TOL
        B = rng.normal(size=(2, 4, 3))
        assert gradient_check(lambda b: ad.sum_(ad.matmul(Tensor(X), b) * ad.matmul(Tensor(X), b)), B) < TOL

    def test_shape_ops(self, rng):
        w = rng.normal(size=(4, 3, 2))
        x = rng.normal(size=(2, 3, 4))
        assert gradient_check(lambda t: ad.sum_(ad.transpose(t, (2, 1, 0)) * Tensor(w)), x) < TOL
        assert gradient_check(lambda t: ad.sum_(ad.swapaxes(t, 0, 2) * Tensor(w)), x) < TOL
        assert gradient_check(lambda t: ad.sum_(ad.reshape(t, (6, 4)) * Tensor(w.reshape(6, 4))), x) < TOL

    def test_getitem_and_index_select(self, rng):
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(3, 5))
        assert gradient_check(lambda t: ad.sum_(ad.getitem(t, slice(1, 4)) * Tensor(w)), x) < TOL
        idx = np.array([0, 2, 2])  # repeated index accumulates
        assert gradient_check(lambda t: ad.sum_(ad.index_select(t, idx, axis=0) * Tensor(w)), x) < TOL

    def test_concat_and_stack(self, rng):
        y = Tensor(rng.normal(size=(3, 2)))
        w = rng.normal(size=(3, 6))
        assert gradient_check(lambda t: ad.sum_(ad.concat([t, y, t], axis=-1) * Tensor(w)), rng.normal(size=(3, 2))) < TOL
        w2 = rng.normal(size=(3, 2, 2))
        assert gradient_check(lambda t: ad.sum_(ad.stack([t, y], axis=2) * Tensor(w2)), rng.normal(size=(3, 2))) < TOL

    def test_softmax(self, rng):
        w = rng.normal(size=(3, 5))
        assert gradient_check(lambda t: ad.sum_(ad.softmax(t) * Tensor(w)), rng.normal(size=(3, 5))) < TOL

    def test_masked_softmax(self, rng):
        w = rng.normal(size=(4, 4))
        mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
        assert gradient_check(lambda t: ad.sum_(ad.masked_softmax(t, mask) * Tensor(w)), rng.normal(size=(4, 4))) < TOL

    def test_layer_norm_all_inputs(self, rng):
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=6)
        b = rng.normal(size=6)
        w = Tensor(rng.normal(size=(3, 6)))
        assert gradient_check(lambda t: ad.sum_(ad.layer_norm(t, Tensor(g), Tensor(b)) * w), x) < TOL
        assert gradient_check(lambda t: ad.sum_(ad.layer_norm(Tensor(x), t, Tensor(b)) * w), g) < TOL
        assert gradient_check(lambda t: ad.sum_(ad.layer_norm(Tensor(x), Tensor(g), t) * w), b) < TOL

    def test_dropout_train_mode_uses_fixed_mask(self, rng):
        x = rng.normal(size=(4, 5))

        def f(t):
            return ad.sum_(ad.dropout(t, 0.3, np.random.default_rng(1), training=True) * t)

        assert gradient_check(f, x) < TOL

    def test_mse_loss(self, rng):
        y = Tensor(rng.normal(size=(2, 3)))
        assert gradient_check(lambda t: ad.mse_loss(t, y), rng.normal(size=(2, 3))) < TOL

    def test_softmax_of_matmul_chain(self, rng):
        W = Tensor(rng.normal(size=(4, 4)))
        v = Tensor(rng.normal(size=(3, 4)))
        assert gradient_check(lambda t: ad.sum_(ad.softmax(ad.matmul(t, W)) * v), rng.normal(size=(3, 4))) < TOL


class TestForwardExamples:
    def test_uniform_softmax(self):
        out = ad.softmax(Tensor(np.zeros((1, 3)))).data
        np.testing.assert_allclose(out, np.full((1, 3), 1 / 3), atol=1e-15)

    def test_masked_softmax_zeroes_masked_position(self):
        out = ad.masked_softmax(Tensor(np.array([[0.3, -1.2, 2.0]])), np.array([[False, False, True]])).data
        assert out[0, 2] == 0.0
        assert abs(out[0, :2].sum() - 1.0) < 1e-12

    def test_fully_masked_row_is_an_error(self):
        with pytest.raises(ValueError):
            ad.masked_softmax(Tensor(np.zeros((1, 2))), np.ones((1, 2), dtype=bool))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
    def test_softmax_rows_sum_to_one(self, x):
        out = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert (out >= 0).all()

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 8), elements=st.floats(-50, 50)))
    def test_layer_norm_standardizes_rows(self, x):
        x = x + np.linspace(0, 1, 8)  # keep every row non-constant
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        var = x.var(axis=-1)
        np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), atol=1e-6)

    def test_dropout_is_identity_at_eval(self, rng):
        x = rng.normal(size=(5, 5))
        assert ad.dropout(Tensor(x), 0.5, rng, training=False).data is not None
        np.testing.assert_array_equal(ad.dropout(Tensor(x), 0.5, rng, training=False).data, x)

    def test_dropout_inverted_scaling(self):
        x = np.ones((200, 200))
        out = ad.dropout(Tensor(x), 0.25, np.random.default_rng(0), training=True).data
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1 / 0.75)
        assert abs(out.mean() - 1.0) < 0.02

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_non_finite_output_raises(self):
        with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
            ad.mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3), "x")
        with Tape() as tape:
            loss = ad.sum_(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mse_of_self_is_zero_grad(self):
        x = Parameter(np.array([1.0, -2.0]), "x")
        with Tape() as tape:
            loss = ad.mse_loss(x, x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros(2))

    def test_reuse_sums_both_paths(self, rng):
        # f(x) = sum(x * x) + sum(relu(x) @ W): x feeds three places
        W = Tensor(rng.normal(size=(4, 2)))
        f = lambda t: ad.add(ad.sum_(t * t), ad.sum_(ad.matmul(ad.relu(t), W)))
        assert gradient_check(f, away_from_zero(rng, (3, 4))) < TOL

    def test_repeated_backward_accumulates(self):
        x = Parameter(np.array([1.0, 2.0]), "x")
        for _ in range(2):
            with Tape() as tape:
                loss = ad.sum_(x * x)
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * 2 * np.array([1.0, 2.0]))

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3), "x")
        with Tape() as tape:
            y = x * x
        with pytest.raises(ad.ShapeError):
            tape.backward(y)

    def test_empty_tape_rejected(self):
        with Tape() as tape:
            pass
        with pytest.raises(ValueError):
            tape.backward(Tensor(np.array(1.0)))

    def test_no_recording_outside_tape(self):
        x = Parameter(np.ones(2), "x")
        y = x * x
        assert y._node is None

    def test_module_level_backward(self):
        x = Parameter(np.array([3.0]), "x")
        with Tape() as tape:  # noqa: F841  nodes refer to the tape weakly
            loss = ad.sum_(x * x)
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])


class TestGradientCheck:
    def test_quadratic(self):
        x = np.array([1.0, 2.0])
        leaf = Parameter(x.copy(), "x")
        with Tape() as tape:
            loss = ad.sum_(leaf * leaf)
        tape.backward(loss)
        np.testing.assert_allclose(leaf.grad, [2.0, 4.0])
        assert gradient_check(lambda t: ad.sum_(t * t), x) < 1e-6

    def test_constant_function(self):
        assert gradient_check(lambda t: Tensor(np.array(3.0)), np.ones(3)) == 0.0

    def test_detects_a_wrong_gradient(self):
        def broken(t):
            y = ad.relu(t)
            if y._node is not None:
                y._node.backward = lambda g: (2 * g,)  # wrong by a factor of two
            return ad.sum_(y)

        assert gradient_check(broken, np.array([1.0, 2.0])) > 0.1


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        p = np.array([1.0, -1.0, 0.5])
        g = np.array([0.3, -2.0, 1e-3])
        new, m, v = ad.adam_step(p, g, np.zeros(3), np.zeros(3), 1, lr=0.01)
        expected = p - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(new, expected, rtol=1e-12)
        np.testing.assert_allclose(m, 0.1 * g)
        np.testing.assert_allclose(v, 0.001 * g * g)

    def test_zero_gradient_decays_moments(self):
        p = np.array([2.0])
        new, m, v = ad.adam_step(p, np.zeros(1), np.array([1.0]), np.array([4.0]), 3, lr=0.1)
        np.testing.assert_allclose(m, [0.9])
        np.testing.assert_allclose(v, [4.0 * 0.999])
        assert new[0] < p[0]  # moments still carry momentum

    def test_zero_gradient_from_fresh_state_is_noop(self):
        p = np.array([2.0, -3.0])
        new, _, _ = ad.adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1)
        np.testing.assert_array_equal(new, p)

    def test_identical_parameters_update_identically(self):
        a, b = Parameter(np.ones(3), "a"), Parameter(np.ones(3), "b")
        opt = ad.Adam([a, b], lr=0.05)
        for _ in range(3):
            a.grad = np.array([0.1, -0.2, 0.3])
            b.grad = a.grad.copy()
            opt.step()
        np.testing.assert_array_equal(a.data, b.data)

    def test_non_finite_gradient_names_parameter(self):
        w = Parameter(np.ones(2), "decoder.w")
        w.grad = np.array([np.nan, 0.0])
        with pytest.raises(ad.NonFiniteError, match="decoder.w"):
            ad.Adam([w], lr=0.1).step()

    def test_t_must_be_positive(self):
        with pytest.raises(ValueError):
            ad.adam_step(np.ones(1), np.ones(1), np.zeros(1), np.zeros(1), 0, lr=0.1)


class TestSnapshot:
    def test_roundtrip(self, tmp_path, rng):
        arrays = {"a": rng.normal(size=(2, 3)), "héad.b": rng.normal(size=(4,)), "scalar": np.array(1.5)}
        path = tmp_path / "p.params"
        ad.save_snapshot(path, arrays)
        back = ad.load_snapshot(path)
        assert list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].shape == arrays[k].shape

    def test_layout(self, tmp_path):
        path = tmp_path / "p.params"
        ad.save_snapshot(path, {"w": np.array([1.0, 2.0])})
        raw = path.read_bytes()
        assert raw[:4] == b"HCPS"
        assert len(raw) == 4 + 8 + 4 + 1 + 4 + 8 + 16
        assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.0, 2.0]

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "p.params"
        ad.save_snapshot(path, {"w": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ValueError, match="trailing"):
            ad.load_snapshot(path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(ValueError, match="magic"):
            ad.load_snapshot(path)
