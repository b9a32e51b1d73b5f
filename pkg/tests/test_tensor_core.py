import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from besovnet.tensor_core import (
    BiasMatrix,
    ConvFilter,
    FeatureMap,
    ShapeError,
    Tape,
    TapeReplayError,
    conv_block_apply,
    convolve,
    convolve_loop,
    grad,
    readout,
    relu,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_conv(W, z):
    """Independent oracle: pad the bottom with K-1 zero rows, then slide."""
    c_out, K, C = W.shape
    D = z.shape[0]
    zp = np.vstack([z, np.zeros((K - 1, C))])
    y = np.zeros((D, c_out))
    for i in range(D):
        for j in range(c_out):
            y[i, j] = sum(W[j, k, l] * zp[i + k, l] for k in range(K) for l in range(C))
    return y


class TestConvolve:
    def test_identity_filter(self):
        z = np.random.default_rng(0).standard_normal((5, 3))
        W = np.eye(3)[:, None, :]
        np.testing.assert_array_equal(convolve(ConvFilter(W), FeatureMap(z)).data, z)

    def test_hand_example_with_bottom_padding(self):
        y = convolve(ConvFilter(np.array([[[1.0], [1.0]]])), FeatureMap([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(y.data[:, 0], [3.0, 5.0, 3.0])

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((4, 3, 2))
        z = rng.standard_normal((5, 2))
        fast = convolve(ConvFilter(W), FeatureMap(z)).data
        np.testing.assert_allclose(fast, naive_conv(W, z), rtol=0, atol=1e-14)
        # the reference loop shares the summation order, so it agrees bit for bit
        np.testing.assert_array_equal(fast, convolve_loop(ConvFilter(W), FeatureMap(z)).data)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_property_matches_oracle(self, D, C, c_out, K, seed):
        K = min(K, D)
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((c_out, K, C))
        z = rng.standard_normal((D, C))
        np.testing.assert_allclose(convolve(ConvFilter(W), FeatureMap(z)).data, naive_conv(W, z), atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 1, 3\).*\(4, 2\)"):
            convolve(ConvFilter(np.ones((2, 1, 3))), FeatureMap(np.ones((4, 2))))

    def test_filter_longer_than_map(self):
        with pytest.raises(ShapeError):
            convolve(ConvFilter(np.ones((1, 3, 1))), FeatureMap(np.ones((2, 1))))

    def test_nonfinite_map_rejected(self):
        with pytest.raises(ValueError):
            FeatureMap([1.0, np.nan])

    def test_filter_norm(self):
        f = ConvFilter(np.array([[[0.5, -3.0]], [[2.0, 0.0]]]))
        assert f.norm == 3.0


class TestRelu:
    def test_nonnegative_unchanged(self):
        z = np.abs(np.random.default_rng(2).standard_normal((4, 2)))
        np.testing.assert_array_equal(relu(FeatureMap(z)).data, z)

    def test_negative_one(self):
        assert relu(FeatureMap([-1.0])).data[0, 0] == 0.0

    def test_mixed(self):
        np.testing.assert_array_equal(relu(FeatureMap([-2.0, 0.0, 3.0])).data[:, 0], [0.0, 0.0, 3.0])

    @given(arrays(np.float64, (3, 2), elements=finite))
    def test_idempotent(self, z):
        once = relu(FeatureMap(z))
        np.testing.assert_array_equal(relu(once).data, once.data)


class TestConvBlock:
    def test_identity_zero_bias(self):
        z = np.abs(np.random.default_rng(3).standard_normal((4, 2)))
        out = conv_block_apply([ConvFilter(np.eye(2)[:, None, :])], [BiasMatrix.zeros(4, 2)], FeatureMap(z))
        np.testing.assert_array_equal(out.data, z)

    def test_zero_filter_constant_bias(self):
        b = np.full((3, 2), 0.7)
        out = conv_block_apply([ConvFilter(np.zeros((2, 1, 1)) + 0.0 * np.ones((2, 1, 1)))], [BiasMatrix(b)],
                               FeatureMap(np.ones(3)))
        np.testing.assert_array_equal(out.data, b)

    def test_two_layers_compose(self):
        rng = np.random.default_rng(4)
        f1, f2 = ConvFilter(rng.standard_normal((3, 2, 1)) * 0.3), ConvFilter(rng.standard_normal((2, 2, 3)) * 0.3)
        b1, b2 = BiasMatrix(rng.standard_normal((5, 3)) * 0.1), BiasMatrix(rng.standard_normal((5, 2)) * 0.1)
        z = FeatureMap(rng.standard_normal(5))
        both = conv_block_apply([f1, f2], [b1, b2], z)
        step = conv_block_apply([f2], [b2], conv_block_apply([f1], [b1], z))
        np.testing.assert_array_equal(both.data, step.data)

    def test_relu_after_last_layer(self):
        out = conv_block_apply([ConvFilter(-np.ones((1, 1, 1)))], [BiasMatrix.zeros(2, 1)], FeatureMap([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_layer_count_mismatch(self):
        with pytest.raises(ShapeError):
            conv_block_apply([ConvFilter(np.ones((1, 1, 1)))], [], FeatureMap([1.0]))


class TestReadout:
    def test_zero_weights_give_bias(self):
        assert readout(np.zeros((3, 2)), 1.5, FeatureMap(np.ones((3, 2)))) == 1.5

    def test_selects_first_entry(self):
        W = np.zeros((3, 2))
        W[0, 0] = 1.0
        Q = np.arange(6.0).reshape(3, 2) + 4.0
        assert readout(W, 0.0, FeatureMap(Q)) == 4.0

    def test_random_against_double_loop(self):
        rng = np.random.default_rng(5)
        W, Q = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        ref = sum(W[i, c] * Q[i, c] for i in range(4) for c in range(3)) + 0.25
        assert readout(W, 0.25, FeatureMap(Q)) == pytest.approx(ref, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            readout(np.zeros((2, 2)), 0.0, FeatureMap(np.ones((3, 2))))


def _cnn_forward(tape, x, params):
    z = x
    n_layers = (len(params) - 1) // 2
    for i in range(n_layers):
        z = tape.relu(tape.add(tape.conv(params[2 * i], z), params[2 * i + 1]))
    return tape.inner(params[-1], z)


class TestGrad:
    def test_linear_network_gradient_is_input(self):
        # f(x) = <W, x> has gradient x with respect to W
        x = np.random.default_rng(6).standard_normal((1, 4, 2))
        W = np.random.default_rng(7).standard_normal((4, 2))
        _, (g,) = grad(lambda t, xv, p: t.inner(p[0], xv), x, [W])
        np.testing.assert_array_equal(g, x[0])

    def test_dead_relu_blocks_gradient(self):
        x = np.ones((1, 2, 1))
        w = -np.ones((1, 1, 1))
        ro = np.ones((2, 1))
        _, (gw, gro) = grad(lambda t, xv, p: t.inner(p[1], t.relu(t.conv(p[0], xv))), x, [w, ro])
        np.testing.assert_array_equal(gw, 0.0)

    def test_conv_gradient_against_finite_differences(self):
        rng = np.random.default_rng(8)
        params = [rng.standard_normal((3, 2, 1)), rng.standard_normal((4, 3)) * 0.1 + 0.5, rng.standard_normal((4, 3))]
        x = rng.standard_normal((5, 4, 1))
        _, grads = grad(_cnn_forward, x, params)

        def value(ps):
            t = Tape()
            return float(np.sum(_cnn_forward(t, t.constant(x), [t.param(p) for p in ps]).value))

        h = 1e-6
        for pi, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                up = [q.copy() for q in params]
                dn = [q.copy() for q in params]
                up[pi][idx] += h
                dn[pi][idx] -= h
                fd = (value(up) - value(dn)) / (2 * h)
                assert grads[pi][idx] == pytest.approx(fd, abs=1e-6)

    def test_replay_reproduces_values(self):
        rng = np.random.default_rng(9)
        t = Tape()
        params = [t.param(rng.standard_normal((2, 1, 1))), t.param(np.zeros((3, 2))), t.param(np.ones((3, 2)))]
        _cnn_forward(t, t.constant(rng.standard_normal((4, 3, 1))), params)
        t.replay()

    def test_replay_divergence_detected(self):
        t = Tape()
        a = t.param(np.array([1.0, -2.0]))
        r = t.relu(a)
        op, ins, attrs, value = t.nodes[r.index]
        t.nodes[r.index] = (op, ins, attrs, value + 1.0)
        with pytest.raises(TapeReplayError):
            t.replay()

    def test_tape_is_single_use(self):
        t = Tape()
        out = t.relu(t.param(np.ones(2)))
        t.backward(out)
        with pytest.raises(RuntimeError):
            t.backward(out)
