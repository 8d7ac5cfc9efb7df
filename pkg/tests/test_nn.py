"""Numeric kernel tests: ops, attention, optimizer, gradient machinery."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dermdit import nn
from dermdit.nn import (
    ConfigurationError,
    GradTape,
    ParamStore,
    Tensor,
    adam_step,
    finite_difference_gradcheck,
    gelu,
    gelu_mlp,
    grad,
    layer_norm,
    multi_head_attention,
    precision,
)


def make_attention_params(d, rng, scale=0.3, prefix=None):
    ps = ParamStore()
    view = ps.view(prefix) if prefix else ps
    for key in ("wq", "wk", "wv", "wo"):
        view.add(key, rng.standard_normal((d, d)) * scale)
    for key in ("bq", "bv", "bo"):
        view.add(key, rng.standard_normal(d) * 0.05)
    return ps


def make_mlp_params(d, mult, rng, zero=False):
    ps = ParamStore()
    if zero:
        ps.add("w1", np.zeros((d, mult * d)))
        ps.add("b1", np.zeros(mult * d))
        ps.add("w2", np.zeros((mult * d, d)))
        ps.add("b2", np.zeros(d))
    else:
        ps.add("w1", rng.standard_normal((d, mult * d)) * 0.3)
        ps.add("b1", rng.standard_normal(mult * d) * 0.05)
        ps.add("w2", rng.standard_normal((mult * d, d)) * 0.3)
        ps.add("b2", rng.standard_normal(d) * 0.05)
    return ps


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class TestAttention:
    def test_single_key_value_ignores_query(self, rng):
        # softmax over one key is 1: output is the projected single token,
        # identical for every query row
        d = 8
        ps = make_attention_params(d, rng)
        kv = Tensor(rng.standard_normal((1, d)))
        q1 = Tensor(rng.standard_normal((5, d)))
        q2 = Tensor(rng.standard_normal((5, d)))
        out1 = multi_head_attention(q1, kv, 2, ps).data
        out2 = multi_head_attention(q2, kv, 2, ps).data
        assert np.allclose(out1, out2, atol=1e-6)
        v = kv.data @ ps["wv"].data + ps["bv"].data
        expected = v @ ps["wo"].data + ps["bo"].data
        assert np.allclose(out1, np.repeat(expected, 5, axis=0), atol=1e-5)

    def test_identical_keys_average_values(self, rng):
        d = 8
        ps = make_attention_params(d, rng)
        row = rng.standard_normal(d)
        kv = Tensor(np.tile(row, (4, 1)))
        q = Tensor(rng.standard_normal((3, d)))
        out, weights = multi_head_attention(q, kv, 2, ps, return_weights=True)
        assert np.allclose(weights, 0.25, atol=1e-6)
        v = row @ ps["wv"].data + ps["bv"].data
        expected = v @ ps["wo"].data + ps["bo"].data
        assert np.allclose(out.data, np.tile(expected, (3, 1)), atol=1e-5)

    def test_weight_rows_sum_to_one(self, rng):
        ps = make_attention_params(8, rng)
        q = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
        kv = Tensor(rng.standard_normal((9, 8)).astype(np.float32))
        _, weights = multi_head_attention(q, kv, 2, ps, return_weights=True)
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance_in_kv(self, rng):
        ps = make_attention_params(8, rng)
        q = Tensor(rng.standard_normal((5, 8)))
        kv = rng.standard_normal((7, 8))
        out = multi_head_attention(q, Tensor(kv), 2, ps).data
        perm = rng.permutation(7)
        out_p = multi_head_attention(q, Tensor(kv[perm]), 2, ps).data
        assert np.allclose(out, out_p, atol=1e-6)

    def test_self_attention_is_kv_equals_q(self, rng):
        ps = make_attention_params(8, rng)
        q = Tensor(rng.standard_normal((4, 8)))
        a = multi_head_attention(q, q, 2, ps).data
        b = multi_head_attention(q, Tensor(q.data.copy()), 2, ps).data
        assert np.array_equal(a, b)

    def test_dimension_mismatch_raises(self, rng):
        ps = make_attention_params(8, rng)
        q = Tensor(rng.standard_normal((4, 8)))
        kv = Tensor(rng.standard_normal((4, 6)))
        with pytest.raises(ConfigurationError):
            multi_head_attention(q, kv, 2, ps)
        with pytest.raises(ConfigurationError):
            multi_head_attention(q, q, 3, ps)  # 8 % 3 != 0

    def test_forward_purity(self, rng):
        ps = make_attention_params(8, rng)
        q = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        a = multi_head_attention(q, q, 2, ps).data
        b = multi_head_attention(q, q, 2, ps).data
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# layer norm / mlp
# ---------------------------------------------------------------------------

class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.array([[5.0, 5.0, 5.0, 5.0]]))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-3)

    def test_already_standardized_row(self):
        with precision("float64"):
            x = Tensor(np.array([[1.0, -1.0]]))
            out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), epsilon=1e-15)
            assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-7)

    def test_zero_gain_gives_bias_exactly(self, rng):
        x = Tensor(rng.standard_normal((3, 6)))
        bias = rng.standard_normal(6)
        out = layer_norm(x, Tensor(np.zeros(6)), Tensor(bias))
        assert np.array_equal(out.data, np.broadcast_to(bias.astype(out.data.dtype), (3, 6)))

    def test_normalizes_last_axis(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 16)) * 3 + 1)
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.allclose(out.mean(-1), 0.0, atol=1e-5)
        assert np.allclose(out.var(-1), 1.0, atol=1e-3)


class TestGeluMlp:
    def test_zero_params_zero_output(self, rng):
        ps = make_mlp_params(6, 2, rng, zero=True)
        x = Tensor(rng.standard_normal((4, 6)))
        assert np.array_equal(gelu_mlp(x, 2, ps).data, np.zeros((4, 6), dtype=np.float32))

    def test_gelu_asymptote_and_origin(self):
        assert abs(float(gelu(Tensor(np.array(10.0))).data) - 10.0) < 1e-4
        assert float(gelu(Tensor(np.array(0.0))).data) == 0.0

    def test_shape_mismatch_raises(self, rng):
        ps = make_mlp_params(6, 2, rng)
        x = Tensor(rng.standard_normal((4, 5)))
        with pytest.raises(ConfigurationError):
            gelu_mlp(x, 2, ps)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal((3, 3)))
        before = w.data.copy()
        adam_step(ps, {"w": Tensor(np.zeros((3, 3)))}, lr=0.1)
        assert np.array_equal(w.data, before)

    def test_first_step_is_signed_lr(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal(5))
        before = w.data.copy()
        g = np.array([1.0, -2.0, 0.5, -0.1, 3.0], dtype=np.float32)
        adam_step(ps, {"w": Tensor(g)}, lr=1e-2)
        update = w.data - before
        assert np.allclose(update, -1e-2 * np.sign(g), atol=1e-6)

    def test_deterministic_across_runs(self, rng):
        def run():
            ps = ParamStore()
            r = np.random.default_rng(7)
            w = ps.add("w", r.standard_normal((4, 4)))
            for step in range(10):
                g = np.random.default_rng((7, step)).standard_normal((4, 4))
                adam_step(ps, {"w": Tensor(g.astype(np.float32))}, lr=1e-3)
            return w.data.copy()

        assert np.array_equal(run(), run())

    def test_lr_zero_never_moves(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal(8))
        before = w.data.copy()
        for _ in range(5):
            adam_step(ps, {"w": Tensor(rng.standard_normal(8).astype(np.float32))}, lr=0.0)
        assert np.array_equal(w.data, before)

    def test_missing_gradient_raises(self, rng):
        ps = ParamStore()
        ps.add("w", rng.standard_normal(3))
        ps.add("v", rng.standard_normal(3))
        with pytest.raises(ConfigurationError, match="v"):
            adam_step(ps, {"w": Tensor(np.zeros(3))}, lr=0.1)

    def test_step_counter_increments(self, rng):
        ps = ParamStore()
        ps.add("w", rng.standard_normal(3))
        adam_step(ps, {"w": Tensor(np.zeros(3))}, lr=0.1)
        adam_step(ps, {"w": Tensor(np.zeros(3))}, lr=0.1)
        assert ps.step_count == 2


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

class TestGrad:
    def test_quadratic_gradient_exact(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal((3, 4)))
        with GradTape() as tape:
            loss = nn.tsum(nn.mul(w, w))
            grads = grad(loss, tape)
        assert np.array_equal(grads["w"].data, 2.0 * w.data)

    def test_untouched_parameter_gets_zero(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal(4))
        u = ps.add("u", rng.standard_normal(4))
        with GradTape() as tape:
            # u participates in a computation that never reaches the loss
            _ = nn.mul(u, 2.0)
            loss = nn.tsum(nn.mul(w, w))
            grads = grad(loss, tape)
        assert np.array_equal(grads["u"].data, np.zeros(4, dtype=np.float32))

    def test_non_scalar_loss_raises(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal(4))
        with GradTape() as tape:
            y = nn.mul(w, w)
            with pytest.raises(ConfigurationError):
                grad(y, tape)

    def test_replay_identical(self, rng):
        ps = ParamStore()
        w = ps.add("w", rng.standard_normal((2, 3)))
        with GradTape() as tape:
            loss = nn.tmean(nn.mul(nn.add(w, 1.0), w))
            g1 = grad(loss, tape)
            g2 = grad(loss, tape)
        assert np.array_equal(g1["w"].data, g2["w"].data)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

class TestGradcheck:
    def test_linear_model_is_exact_up_to_rounding(self):
        with precision("float64"):
            ps = ParamStore()
            rng = np.random.default_rng(0)
            ps.add("w", rng.standard_normal((6, 3)))
            x = Tensor(rng.standard_normal((5, 6)))
            y = Tensor(rng.standard_normal((5, 3)))

            def forward():
                return nn.mse_loss(nn.matmul(x, ps["w"]), y)

            err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=8)
        assert err < 1e-9

    def test_injected_fault_reports_half(self):
        with precision("float64"):
            ps = ParamStore()
            rng = np.random.default_rng(1)
            ps.add("w", rng.standard_normal((4, 2)))
            x = Tensor(rng.standard_normal((3, 4)))

            def forward():
                return nn.tmean(nn.mul(nn.matmul(x, ps["w"]), 1.0))

            err = finite_difference_gradcheck(
                forward, ps, h=1e-5, coords_per_param=4, fault_scale=2.0
            )
        assert abs(err - 0.5) < 1e-3

    def test_requires_float64(self, rng):
        ps = ParamStore()
        ps.add("w", rng.standard_normal(3))
        with pytest.raises(ConfigurationError):
            finite_difference_gradcheck(lambda: nn.tsum(ps["w"]), ps)

    def test_attention_block_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(3)
            ps = make_attention_params(8, rng)
            x = Tensor(rng.standard_normal((5, 8)))

            def forward():
                out = multi_head_attention(x, x, 2, ps)
                return nn.tmean(nn.mul(out, out))

            err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=4)
        assert err < 1e-4

    def test_mlp_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(4)
            ps = make_mlp_params(6, 2, rng)
            x = Tensor(rng.standard_normal((4, 6)))

            def forward():
                out = gelu_mlp(x, 2, ps)
                return nn.tmean(nn.mul(out, out))

            err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=6)
        assert err < 1e-4

    def test_layer_norm_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(5)
            ps = ParamStore()
            ps.add("gain", rng.standard_normal(7))
            ps.add("bias", rng.standard_normal(7))
            x = Tensor(rng.standard_normal((4, 7)))

            def forward():
                out = layer_norm(x, ps["gain"], ps["bias"])
                return nn.tmean(nn.mul(out, out))

            err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=7)
        assert err < 1e-4

    def test_conv_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(6)
            ps = ParamStore()
            ps.add("w", rng.standard_normal((4, 3, 3, 3)) * 0.3)
            ps.add("b", rng.standard_normal(4) * 0.1)
            x = Tensor(rng.standard_normal((2, 3, 8, 8)))

            def forward():
                out = nn.conv2d(x, ps["w"], ps["b"], stride=2, padding=1)
                return nn.tmean(nn.mul(out, out))

            err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=6)
        assert err < 1e-4


@settings(max_examples=12, deadline=None)
@given(
    layer=st.sampled_from(["attention", "mlp", "layer_norm", "softmax", "gelu", "conv"]),
    seed=st.integers(0, 10_000),
)
def test_layer_gradients_match_finite_differences(layer, seed):
    """Every layer type passes the finite-difference check on random shapes."""
    with precision("float64"):
        rng = np.random.default_rng(seed)
        ps = ParamStore()
        if layer == "attention":
            d = int(rng.choice([4, 8, 12]))
            for key in ("wq", "wk", "wv", "wo"):
                ps.add(key, rng.standard_normal((d, d)) * 0.4)
            for key in ("bq", "bv", "bo"):
                ps.add(key, rng.standard_normal(d) * 0.05)
            x = Tensor(rng.standard_normal((int(rng.integers(1, 6)), d)))
            heads = 2 if d % 2 == 0 else 1

            def forward():
                out = multi_head_attention(x, x, heads, ps)
                return nn.tmean(nn.mul(out, out))
        elif layer == "mlp":
            d = int(rng.integers(2, 8))
            ps2 = make_mlp_params(d, 2, rng)
            for name, p in ps2.items():
                ps.add(name, p.data)
            x = Tensor(rng.standard_normal((int(rng.integers(1, 5)), d)))
            forward = lambda: nn.tmean(nn.mul(gelu_mlp(x, 2, ps), 1.0))
        elif layer == "layer_norm":
            d = int(rng.integers(2, 10))
            ps.add("gain", rng.standard_normal(d))
            ps.add("bias", rng.standard_normal(d))
            x = Tensor(rng.standard_normal((int(rng.integers(1, 5)), d)))
            forward = lambda: nn.tmean(
                nn.mul(layer_norm(x, ps["gain"], ps["bias"]),
                       layer_norm(x, ps["gain"], ps["bias"]))
            )
        elif layer == "softmax":
            d = int(rng.integers(2, 9))
            ps.add("w", rng.standard_normal((d, d)))
            x = Tensor(rng.standard_normal((3, d)))
            forward = lambda: nn.tmean(
                nn.mul(nn.softmax(nn.matmul(x, ps["w"])), np.arange(d, dtype=float))
            )
        elif layer == "gelu":
            d = int(rng.integers(2, 9))
            ps.add("w", rng.standard_normal((d,)))
            forward = lambda: nn.tmean(nn.mul(gelu(ps["w"]), 1.0))
        else:  # conv
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            ps.add("w", rng.standard_normal((cout, cin, 3, 3)) * 0.4)
            ps.add("b", rng.standard_normal(cout) * 0.1)
            x = Tensor(rng.standard_normal((1, cin, 6, 6)))
            forward = lambda: nn.tmean(
                nn.mul(nn.conv2d(x, ps["w"], ps["b"], padding=1),
                       nn.conv2d(x, ps["w"], ps["b"], padding=1))
            )
        err = finite_difference_gradcheck(forward, ps, h=1e-5, coords_per_param=3, seed=seed)
    assert err < 1e-4, f"{layer}: {err}"


# ---------------------------------------------------------------------------
# misc ops
# ---------------------------------------------------------------------------

def test_softmax_rows_sum_to_one_float32(rng):
    x = Tensor(rng.standard_normal((10, 7)).astype(np.float32) * 5)
    y = nn.softmax(x).data
    assert y.dtype == np.float32
    assert np.allclose(y.sum(-1), 1.0, atol=1e-6)


def test_concat_and_slice_roundtrip(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((2, 4)))
    c = nn.concat([a, b], axis=0)
    assert np.array_equal(nn.slice_axis(c, 0, 0, 3).data, a.data)
    assert np.array_equal(nn.slice_axis(c, 0, 3, 5).data, b.data)


def test_upsample_nearest_shapes(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 5)))
    y = nn.upsample_nearest2(x)
    assert y.shape == (2, 3, 8, 10)
    assert np.array_equal(y.data[:, :, ::2, ::2], x.data)


def test_param_store_unique_names(rng):
    ps = ParamStore()
    ps.add("w", np.zeros(3))
    with pytest.raises(ConfigurationError):
        ps.add("w", np.zeros(3))


def test_param_view_scopes_names(rng):
    ps = ParamStore()
    view = ps.view("blocks.0.attn")
    t = view.add("wq", np.zeros((2, 2)))
    assert t.name == "blocks.0.attn.wq"
    assert "blocks.0.attn.wq" in ps
    assert view["wq"] is t


def test_tensor_shape_invariant(rng):
    t = Tensor(rng.standard_normal((3, 4)))
    assert int(np.prod(t.shape)) == t.data.size
    assert np.all(np.isfinite(t.data))
