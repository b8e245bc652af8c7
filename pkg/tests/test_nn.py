import numpy as np
import pytest

from teleguard.nn import (
    CheckpointError,
    Mlp,
    adam_init,
    adam_step,
    backward,
    clone_mlp,
    forward,
    init_mlp,
    load_arrays,
    mlp_from_arrays,
    mlp_meta,
    mlp_to_arrays,
    params_hash,
    save_arrays,
)

from oracles import finite_diff_grads, max_relative_error


class TestForward:
    def test_zero_network_outputs_zero(self):
        net = Mlp(
            sizes=(3, 4, 2),
            activations=("tanh", "identity"),
            weights=[np.zeros((3, 4)), np.zeros((4, 2))],
            biases=[np.zeros(4), np.zeros(2)],
        )
        y, _ = forward(net, np.ones((5, 3)))
        assert np.all(y == 0.0)

    def test_identity_layer_passes_input_through(self):
        net = Mlp(
            sizes=(3, 3),
            activations=("identity",),
            weights=[np.eye(3)],
            biases=[np.zeros(3)],
        )
        x = np.random.default_rng(0).normal(size=(4, 3))
        y, _ = forward(net, x)
        assert np.allclose(y, x, atol=0)

    def test_hand_computed_2_2_1_tanh(self):
        w0 = np.array([[0.5, -1.0], [0.25, 0.75]])
        b0 = np.array([0.1, -0.2])
        w1 = np.array([[2.0], [-0.5]])
        b1 = np.array([0.3])
        net = Mlp((2, 2, 1), ("tanh", "identity"), [w0, w1], [b0, b1])
        x = np.array([[0.2, -0.4]])
        h = np.tanh(x @ w0 + b0)
        expected = h @ w1 + b1
        y, _ = forward(net, x)
        assert np.allclose(y, expected, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        net = init_mlp((3, 2), ("identity",), np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(net, np.ones((1, 4)))

    def test_forward_is_pure(self):
        net = init_mlp((3, 8, 2), ("tanh", "identity"), np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(6, 3))
        y1, _ = forward(net, x)
        y2, _ = forward(net, x)
        assert np.array_equal(y1, y2)


class TestBackward:
    def test_gradcheck_4_8_8_2(self):
        rng = np.random.default_rng(42)
        net = init_mlp((4, 8, 8, 2), ("tanh", "relu", "identity"), rng)
        x = rng.normal(size=(5, 4))
        r = rng.normal(size=(5, 2))  # fixed projection to scalar loss

        def loss():
            y, _ = forward(net, x)
            return float(np.sum(y * r))

        y, cache = forward(net, x)
        grads, _ = backward(net, cache, r)
        numeric = finite_diff_grads(loss, net.parameters(), h=1e-5)
        err = max_relative_error(grads.as_list(), numeric)
        assert err <= 1e-4, f"gradcheck relative error {err}"

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        net = init_mlp((3, 6, 1), ("tanh", "identity"), rng)
        x = rng.normal(size=(1, 3))
        y, cache = forward(net, x)
        _, dx = backward(net, cache, np.ones((1, 1)))
        h = 1e-6
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[0, j] += h
            xm[0, j] -= h
            num = (forward(net, xp)[0] - forward(net, xm)[0]) / (2 * h)
            assert abs(dx[0, j] - num[0, 0]) < 1e-6

    def test_linear_weight_gradient_is_input_outer_product(self):
        net = Mlp(
            sizes=(3, 2),
            activations=("identity",),
            weights=[np.random.default_rng(0).normal(size=(3, 2))],
            biases=[np.zeros(2)],
        )
        x = np.array([[1.0, -2.0, 0.5]])
        dy = np.array([[0.3, -0.7]])
        _, cache = forward(net, x)
        grads, _ = backward(net, cache, dy)
        assert np.allclose(grads.d_weights[0], x.T @ dy, atol=1e-15)

    def test_zero_output_gradient_gives_zero_grads(self):
        net = init_mlp((3, 5, 2), ("tanh", "identity"), np.random.default_rng(0))
        _, cache = forward(net, np.ones((2, 3)))
        grads, dx = backward(net, cache, np.zeros((2, 2)))
        assert all(np.all(g == 0.0) for g in grads.as_list())
        assert np.all(dx == 0.0)

    def test_stale_cache_rejected(self):
        net = init_mlp((3, 5, 2), ("tanh", "identity"), np.random.default_rng(0))
        _, cache = forward(net, np.ones((2, 3)))
        with pytest.raises(ValueError):
            backward(net, cache[:1], np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = [np.array([1.0, -2.0])]
        state = adam_init(p, lr=0.1)
        adam_step(p, [np.zeros(2)], state)
        assert np.array_equal(p[0], [1.0, -2.0])

    def test_first_step_matches_closed_form(self):
        # from zero state with constant gradient g the bias-corrected update
        # is exactly lr * g / (|g| + eps)
        g = np.array([0.3, -4.0])
        p = [np.zeros(2)]
        state = adam_init(p, lr=0.01)
        adam_step(p, [g], state)
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p[0], expected, rtol=1e-9)
        assert np.all(np.abs(np.abs(p[0]) - 0.01) < 1e-6)

    def test_non_finite_gradient_rejected_without_mutation(self):
        p = [np.array([1.0, 2.0])]
        state = adam_init(p, lr=0.1)
        with pytest.raises(ValueError):
            adam_step(p, [np.array([np.nan, 0.0])], state)
        assert np.array_equal(p[0], [1.0, 2.0])
        assert state.step == 0


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        net = init_mlp((4, 16, 3), ("tanh", "identity"), rng)
        path = tmp_path / "net.ckpt"
        save_arrays(path, {"nets": {"net": mlp_meta(net)}}, mlp_to_arrays("net", net))
        meta, arrays = load_arrays(path)
        restored = mlp_from_arrays("net", meta["nets"]["net"], arrays)
        for a, b in zip(net.parameters(), restored.parameters()):
            assert np.array_equal(a, b)
        assert params_hash(net.parameters()) == params_hash(restored.parameters())

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x00\x01\x02 not json\n1234")
        with pytest.raises(CheckpointError):
            load_arrays(path)

    def test_truncated_payload_rejected(self, tmp_path):
        net = init_mlp((4, 4), ("identity",), np.random.default_rng(0))
        path = tmp_path / "net.ckpt"
        save_arrays(path, {}, mlp_to_arrays("net", net))
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_arrays(path)

    def test_version_mismatch_rejected(self, tmp_path):
        net = init_mlp((2, 2), ("identity",), np.random.default_rng(0))
        path = tmp_path / "net.ckpt"
        save_arrays(path, {}, mlp_to_arrays("net", net))
        raw = path.read_bytes()
        head, _, tail = raw.partition(b"\n")
        head = head.replace(b'"version":1', b'"version":9')
        path.write_bytes(head + b"\n" + tail)
        with pytest.raises(CheckpointError, match="version"):
            load_arrays(path)

    def test_clone_is_deep(self):
        net = init_mlp((2, 2), ("identity",), np.random.default_rng(0))
        copy = clone_mlp(net)
        copy.weights[0][0, 0] += 1.0
        assert net.weights[0][0, 0] != copy.weights[0][0, 0]
