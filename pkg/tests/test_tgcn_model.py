import numpy as np
import pytest

from latentdemand import tensor_core as tc
from latentdemand.errors import ValidationError
from latentdemand.spatial_graph import build_adjacency
from latentdemand.tgcn_model import (
    GaussianForecast,
    QuantileForecast,
    TgcnConfig,
    gcn_forward,
    init_params,
    load_checkpoint,
    lstm_step,
    param_shapes,
    save_checkpoint,
    tgcn_forward,
    zero_grads,
)

from conftest import finite_diff_grad, grad_errors


def small_config(head="gaussian"):
    return TgcnConfig(in_features=5, gcn_channels=(6, 4), hidden_size=8, head=head)


def random_adjacency(k, seed=0):
    rng = np.random.default_rng(seed)
    cents = np.column_stack([rng.uniform(55.0, 55.6, k), rng.uniform(11.8, 12.8, k)])
    return build_adjacency(cents, bandwidth_km=10.0).normalized


class TestGcnForward:
    def test_zero_weights_zero_output(self):
        adj = random_adjacency(3)
        x = np.random.default_rng(0).normal(size=(3, 5))
        out = gcn_forward(adj, x, tc.as_tensor(np.zeros((5, 6))), tc.as_tensor(np.zeros((6, 4))))
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_single_node_collapses(self):
        adj = np.array([[1.0]])
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 5))
        w1 = rng.normal(size=(5, 6))
        w2 = rng.normal(size=(6, 4))
        out = gcn_forward(adj, x, tc.as_tensor(w1), tc.as_tensor(w2))
        want = np.maximum(x @ w1, 0.0) @ w2
        assert out.data == pytest.approx(want, abs=1e-12)

    def test_three_node_line_graph_matrix_oracle(self):
        # Independent oracle: plain numpy composition of the definition.
        adj = random_adjacency(3, seed=5)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        w1 = rng.normal(size=(5, 6))
        w2 = rng.normal(size=(6, 4))
        out = gcn_forward(adj, x, tc.as_tensor(w1), tc.as_tensor(w2))
        want = adj @ np.maximum(adj @ x @ w1, 0.0) @ w2
        assert out.data == pytest.approx(want, abs=1e-10)

    def test_batched_matches_loop(self):
        adj = random_adjacency(4, seed=3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, 4, 5))
        w1 = tc.as_tensor(rng.normal(size=(5, 6)))
        w2 = tc.as_tensor(rng.normal(size=(6, 4)))
        batched = gcn_forward(adj, x, w1, w2)
        for b in range(7):
            single = gcn_forward(adj, x[b], w1, w2)
            assert batched.data[b] == pytest.approx(single.data, abs=1e-10)

    def test_node_count_mismatch(self):
        with pytest.raises(ValidationError, match="node count"):
            gcn_forward(np.eye(3), np.zeros((4, 5)),
                        tc.as_tensor(np.zeros((5, 6))), tc.as_tensor(np.zeros((6, 4))))


class TestLstmStep:
    def test_all_zero_gives_zero_state(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        for name in params:
            params[name].data = np.zeros_like(params[name].data)
        g_t = np.zeros((3, 4))
        h, c = lstm_step(g_t, np.zeros((3, 8)), np.zeros((3, 8)), params)
        # gates sit at 0.5, candidate at 0, so cell and hidden stay zero
        assert np.allclose(c.data, 0.0)
        assert np.allclose(h.data, 0.0)

    def test_saturated_forget_passes_memory(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        for name in params:
            params[name].data = np.zeros_like(params[name].data)
        params["b_f"].data = np.full(8, 50.0)   # forget gate -> 1
        params["b_i"].data = np.full(8, -50.0)  # input gate -> 0
        c_prev = np.random.default_rng(4).normal(size=(3, 8))
        _h, c = lstm_step(np.zeros((3, 4)), np.zeros((3, 8)), c_prev, params)
        assert c.data == pytest.approx(c_prev, abs=1e-12)

    def test_matches_independent_reference(self):
        # Second implementation as oracle: plain numpy gate equations.
        cfg = small_config()
        params = init_params(cfg, seed=11)
        rng = np.random.default_rng(12)
        g_t = rng.normal(size=(5, 4))
        h_prev = rng.normal(size=(5, 8))
        c_prev = rng.normal(size=(5, 8))
        h, c = lstm_step(g_t, h_prev, c_prev, params)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        p = {k: t.data for k, t in params.items()}
        gate_i = sig(g_t @ p["w_i"] + h_prev @ p["u_i"] + p["b_i"])
        gate_f = sig(g_t @ p["w_f"] + h_prev @ p["u_f"] + p["b_f"])
        gate_o = sig(g_t @ p["w_o"] + h_prev @ p["u_o"] + p["b_o"])
        cand = np.tanh(g_t @ p["w_c"] + h_prev @ p["u_c"] + p["b_c"])
        c_ref = gate_f * c_prev + gate_i * cand
        h_ref = gate_o * np.tanh(c_ref)
        assert c.data == pytest.approx(c_ref, abs=1e-10)
        assert h.data == pytest.approx(h_ref, abs=1e-10)


class TestTgcnForward:
    def test_single_step_zero_params_head_is_bias(self):
        cfg = small_config("gaussian")
        params = init_params(cfg, seed=0)
        for name, t in params.items():
            if name != "head_b":
                t.data = np.zeros_like(t.data)
        params["head_b"].data = np.array([0.25, -0.5])
        adj = random_adjacency(3)
        window = np.random.default_rng(1).normal(size=(2, 1, 3, 5))
        fc = tgcn_forward(adj, window, params, cfg)
        assert np.allclose(fc.mean.data, 0.25)
        want_sigma = np.log1p(np.exp(-0.5)) + cfg.sigma_floor
        assert np.allclose(fc.std.data, want_sigma)

    def test_sigma_strictly_positive(self):
        cfg = small_config("gaussian")
        params = init_params(cfg, seed=5)
        params["head_b"].data[1] = -40.0  # drive the softplus toward zero
        adj = random_adjacency(4, seed=2)
        window = np.random.default_rng(3).normal(size=(3, 6, 4, 5))
        fc = tgcn_forward(adj, window, params, cfg)
        assert np.all(fc.std.data > 0.0)

    def test_node_permutation_equivariance(self):
        cfg = small_config("quantile")
        params = init_params(cfg, seed=7)
        k = 5
        adj = random_adjacency(k, seed=9)
        rng = np.random.default_rng(10)
        window = rng.normal(size=(4, 6, k, 5))
        perm = rng.permutation(k)
        fc = tgcn_forward(adj, window, params, cfg)
        fc_perm = tgcn_forward(adj[np.ix_(perm, perm)], window[:, :, perm, :], params, cfg)
        assert fc_perm.values.data == pytest.approx(fc.values.data[:, perm, :], abs=1e-12)

    def test_identity_adjacency_locality(self):
        # With no spatial mixing, perturbing one node's inputs must leave
        # every other node's outputs bit-for-bit unchanged.
        cfg = small_config("gaussian")
        params = init_params(cfg, seed=3)
        k = 4
        adj = np.eye(k)
        rng = np.random.default_rng(8)
        window = rng.normal(size=(2, 5, k, 5))
        base = tgcn_forward(adj, window, params, cfg)
        poked = window.copy()
        poked[:, :, 2, :] += 1.0
        out = tgcn_forward(adj, poked, params, cfg)
        others = [v for v in range(k) if v != 2]
        assert np.array_equal(out.mean.data[:, others], base.mean.data[:, others])
        assert not np.allclose(out.mean.data[:, 2], base.mean.data[:, 2])

    def test_quantile_head_shape(self):
        cfg = small_config("quantile")
        params = init_params(cfg, seed=0)
        adj = random_adjacency(3)
        fc = tgcn_forward(adj, np.zeros((2, 4, 3, 5)), params, cfg)
        assert isinstance(fc, QuantileForecast)
        assert fc.values.data.shape == (2, 3, 3)

    def test_unbatched_window(self):
        cfg = small_config("gaussian")
        params = init_params(cfg, seed=0)
        adj = random_adjacency(3)
        fc = tgcn_forward(adj, np.zeros((4, 3, 5)), params, cfg)
        assert isinstance(fc, GaussianForecast)
        assert fc.mean.data.shape == (3,)

    def test_gradient_of_mean_output_all_params(self):
        # Full-model finite differences over every parameter coordinate.
        cfg = small_config("gaussian")
        params = init_params(cfg, seed=21)
        adj = random_adjacency(3, seed=4)
        rng = np.random.default_rng(22)
        window = rng.normal(size=(2, 4, 3, 5))

        def loss_value():
            fc = tgcn_forward(adj, window, params, cfg)
            return tc.mean(fc.mean)

        zero_grads(params)
        tc.backward(loss_value())
        for name, t in params.items():
            def f(v, name=name):
                orig = params[name].data
                params[name].data = v
                try:
                    return loss_value().item()
                finally:
                    params[name].data = orig

            numeric = finite_diff_grad(f, t.data.copy())
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            rel, n, total = grad_errors(analytic, numeric)
            if n:
                assert rel.max() < 1e-4, f"{name}: rel err {rel.max():.2e}"

    def test_window_validation(self):
        cfg = small_config()
        params = init_params(cfg, seed=0)
        with pytest.raises(ValidationError, match="features"):
            tgcn_forward(np.eye(3), np.zeros((2, 4, 3, 7)), params, cfg)
        with pytest.raises(ValidationError, match="nodes"):
            tgcn_forward(np.eye(3), np.zeros((2, 4, 5, 5)), params, cfg)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        cfg = small_config("quantile")
        params = init_params(cfg, seed=13)
        meta = {"model_kind": "qr", "nodes": 3, "window": 4}
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, cfg, meta)
        loaded, cfg2, meta2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert meta2 == meta
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data)

    def test_missing_array_rejected(self, tmp_path):
        import json

        cfg = small_config()
        params = init_params(cfg, seed=0)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, cfg, {})
        payload = json.loads(path.read_text())
        del payload["arrays"]["head_w"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ValidationError, match="head_w"):
            load_checkpoint(path)

    def test_param_shapes_consistent(self):
        cfg = TgcnConfig(head="quantile", quantiles=(0.1, 0.5, 0.9))
        shapes = param_shapes(cfg)
        assert shapes["head_w"] == (32, 3)
        assert shapes["gcn_w1"] == (5, 16)
