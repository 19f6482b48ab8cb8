"""Tests for the tensor substrate: op semantics, gradients, SGD, checkpoints."""

import numpy as np
import pytest

import weedvision.numerics as nm
from weedvision.errors import CheckError, ConfigError, ShapeError, StateError


def t64(arr):
    return nm.Tensor(np.asarray(arr, dtype=np.float64))


def p64(rng, shape, scale=1.0):
    return nm.Parameter(rng.normal(0.0, scale, size=shape))


def sq_sum(t):
    return nm.sum_(nm.mul(t, t))


def assert_grad_ok(f, params, tol=1e-3, max_coords=None, seed=0):
    report = nm.grad_check(f, params, max_coords_per_param=max_coords, seed=seed)
    assert report.passed(tol), f"worst: {report.worst()}"


# ---------------------------------------------------------------------------
# Op semantics


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = nm.Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = nm.conv2d(x, nm.Tensor(w))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_sum(self):
        x = nm.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = nm.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = nm.conv2d(x, w, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_channel_mismatch_raises(self):
        x = nm.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
        w = nm.Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            nm.conv2d(x, w)

    def test_empty_output_raises(self):
        x = nm.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        w = nm.Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(ShapeError):
            nm.conv2d(x, w)

    def test_linearity_in_input(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = nm.Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        base = nm.conv2d(nm.Tensor(x), w, stride=1, padding=1).data
        for alpha in (0.5, 2.0, -3.0):
            scaled = nm.conv2d(nm.Tensor(alpha * x), w, stride=1, padding=1).data
            err = np.abs(scaled - alpha * base).max() / max(np.abs(base).max(), 1e-9)
            assert err <= 1e-5

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = nm.conv2d(nm.Tensor(x), nm.Tensor(w), stride=2, padding=1).data
        b = nm.conv2d(nm.Tensor(x.copy()), nm.Tensor(w.copy()), stride=2, padding=1).data
        assert a.tobytes() == b.tobytes()


class TestAttention:
    def test_single_token_weights_are_one(self):
        with nm.default_dtype(np.float64):
            rng = np.random.default_rng(1)
            mha = nm.MultiHeadAttention(4, 2, rng)
            x = t64(rng.normal(size=(1, 1, 4)))
            weights = mha.attention_weights(x)
            np.testing.assert_allclose(weights, 1.0)
            # With a single token the block reduces to projecting V.
            qkv = x.data @ mha.qkv.weight.data.T + mha.qkv.bias.data
            v = qkv[..., 8:]
            expected = v @ mha.proj.weight.data.T + mha.proj.bias.data
            np.testing.assert_allclose(mha(x).data, expected, rtol=1e-12)

    def test_weight_rows_sum_to_one(self):
        with nm.default_dtype(np.float64):
            rng = np.random.default_rng(2)
            mha = nm.MultiHeadAttention(8, 2, rng)
            x = t64(rng.normal(size=(2, 5, 8)))
            weights = mha.attention_weights(x)
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            nm.MultiHeadAttention(6, 4, np.random.default_rng(0))

    def test_functional_alias_checks_heads(self):
        rng = np.random.default_rng(0)
        mha = nm.MultiHeadAttention(4, 2, rng)
        x = nm.Tensor(np.zeros((1, 2, 4), dtype=np.float32))
        with pytest.raises(ConfigError):
            nm.multi_head_attention(x, 4, mha)


class TestElementwiseOps:
    def test_layer_norm_constant_is_zero(self):
        x = nm.Tensor(np.full((2, 5), 3.7, dtype=np.float32))
        gamma = nm.Tensor(np.ones(5, dtype=np.float32))
        beta = nm.Tensor(np.zeros(5, dtype=np.float32))
        out = nm.layer_norm(x, gamma, beta)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_upsample_nearest_repeats_value(self):
        x = nm.Tensor(np.full((1, 1, 1, 1), 2.5, dtype=np.float32))
        out = nm.upsample_nearest(x, factor=2)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, 2.5)

    def test_max_pool_picks_window_max(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = nm.max_pool(nm.Tensor(x), kernel=2)
        np.testing.assert_array_equal(out.data.reshape(2, 2), [[5, 7], [13, 15]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = nm.Tensor(rng.normal(size=(3, 7)).astype(np.float32) * 50)
        out = nm.softmax(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_extreme_logits_stable(self):
        x = nm.Tensor(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
        out = nm.softmax(x)
        assert np.isfinite(out.data).all()


class TestMse:
    def test_identical_inputs_zero(self):
        a = nm.Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
        assert nm.mse(a, a).item() == 0.0

    def test_unit_difference(self):
        a = nm.Tensor(np.array([1.0, 1.0], dtype=np.float32))
        b = nm.Tensor(np.array([0.0, 0.0], dtype=np.float32))
        assert nm.mse(a, b).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        a = nm.Tensor(np.zeros(3, dtype=np.float32))
        b = nm.Tensor(np.zeros(4, dtype=np.float32))
        with pytest.raises(ShapeError):
            nm.mse(a, b)

    def test_gradient_is_scaled_difference(self):
        with nm.default_dtype(np.float64):
            rng = np.random.default_rng(5)
            a = p64(rng, (4,))
            b = t64(rng.normal(size=4))
            nm.mse(a, b).backward()
            np.testing.assert_allclose(a.grad, 2.0 * (a.data - b.data) / 4.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# Finite-difference property checks (>= 20 seeds per op)


def _case_add_broadcast(rng):
    a, b = p64(rng, (3, 4)), p64(rng, (4,))
    return lambda: sq_sum(nm.add(a, b)), [a, b]


def _case_concat(rng):
    a, b = p64(rng, (2, 3)), p64(rng, (2, 2))
    return lambda: sq_sum(nm.concat([a, b], axis=1)), [a, b]


def _case_matmul(rng):
    a, b = p64(rng, (3, 4)), p64(rng, (4, 2))
    return lambda: sq_sum(nm.matmul(a, b)), [a, b]


def _case_gelu(rng):
    x = p64(rng, (10,))
    return lambda: sq_sum(nm.gelu(x)), [x]


def _case_sigmoid_softplus(rng):
    x = p64(rng, (10,))
    return lambda: nm.sum_(nm.add(nm.sigmoid(x), nm.softplus(x))), [x]


def _case_softmax(rng):
    x = p64(rng, (3, 5))
    w = t64(rng.normal(size=(3, 5)))
    return lambda: nm.sum_(nm.mul(nm.softmax(x), w)), [x]


def _case_log_softmax(rng):
    x = p64(rng, (2, 6))
    w = t64(rng.normal(size=(2, 6)))
    return lambda: nm.sum_(nm.mul(nm.log_softmax(x), w)), [x]


def _case_layer_norm(rng):
    x, g, b = p64(rng, (2, 3, 6)), p64(rng, (6,)), p64(rng, (6,))
    return lambda: sq_sum(nm.layer_norm(x, g, b)), [x, g, b]


def _case_linear(rng):
    x, w, b = p64(rng, (2, 3, 5)), p64(rng, (4, 5)), p64(rng, (4,))
    return lambda: sq_sum(nm.linear(x, w, b)), [x, w, b]


def _case_conv2d(rng):
    x, w, b = p64(rng, (2, 3, 5, 5)), p64(rng, (4, 3, 3, 3), 0.5), p64(rng, (4,))
    return lambda: sq_sum(nm.conv2d(x, w, b, stride=2, padding=1)), [x, w, b]


def _case_max_pool(rng):
    x = p64(rng, (1, 2, 4, 4))
    return lambda: sq_sum(nm.max_pool(x, kernel=2)), [x]


def _case_avg_pool(rng):
    x = p64(rng, (1, 2, 4, 4))
    return lambda: sq_sum(nm.avg_pool(x, kernel=2)), [x]


def _case_upsample(rng):
    x = p64(rng, (1, 2, 3, 3))
    return lambda: sq_sum(nm.upsample_nearest(x, factor=2)), [x]


def _case_mse(rng):
    a, b = p64(rng, (7,)), p64(rng, (7,))
    return lambda: nm.mse(a, b), [a, b]


def _case_bce(rng):
    x = p64(rng, (6,))
    t = (rng.random(6) > 0.5).astype(np.float64)
    return lambda: nm.mean(nm.bce_with_logits(x, t)), [x]


def _case_attention(rng):
    mha = nm.MultiHeadAttention(4, 2, rng)
    x = p64(rng, (1, 3, 4))
    return lambda: sq_sum(mha(x)), [x] + mha.parameters()


def _case_pointwise_chain(rng):
    x = nm.Parameter(rng.uniform(0.5, 2.0, size=10))
    return lambda: nm.sum_(nm.mul(nm.exp(nm.mul(x, 0.3)), nm.log(x))), [x]


def _case_min_max(rng):
    a, b = p64(rng, (8,)), p64(rng, (8,))
    return lambda: nm.sum_(nm.add(nm.minimum(a, b), nm.mul(nm.maximum(a, b), 0.5))), [a, b]


OP_CASES = {
    "add_broadcast": _case_add_broadcast,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "gelu": _case_gelu,
    "sigmoid_softplus": _case_sigmoid_softplus,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "max_pool": _case_max_pool,
    "avg_pool": _case_avg_pool,
    "upsample": _case_upsample,
    "mse": _case_mse,
    "bce_with_logits": _case_bce,
    "attention": _case_attention,
    "pointwise_chain": _case_pointwise_chain,
    "min_max": _case_min_max,
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    for seed in range(20):
        with nm.default_dtype(np.float64):
            rng = np.random.default_rng(seed)
            f, params = OP_CASES[name](rng)
            assert_grad_ok(f, params, tol=1e-3, max_coords=30, seed=seed)


def test_mse_gradient_error_below_1e4():
    with nm.default_dtype(np.float64):
        rng = np.random.default_rng(11)
        a, b = p64(rng, (9,)), p64(rng, (9,))
        report = nm.grad_check(lambda: nm.mse(a, b), [a, b])
        assert report.max_rel_err <= 1e-4


def test_composite_model_gradient():
    # conv -> gelu -> flatten -> linear -> mse against a fixed target
    with nm.default_dtype(np.float64):
        rng = np.random.default_rng(21)
        x = p64(rng, (1, 2, 6, 6), 0.5)
        conv = nm.Conv2d(2, 3, 3, rng, stride=1, padding=1)
        lin = nm.Linear(3 * 36, 5, rng)
        target = t64(rng.normal(size=(1, 5)))

        def f():
            h = nm.gelu(conv(x))
            h = nm.reshape(h, (1, 3 * 36))
            return nm.mse(lin(h), target)

        params = [x] + conv.parameters() + lin.parameters()
        assert_grad_ok(f, params, tol=1e-3, max_coords=25)


# ---------------------------------------------------------------------------
# grad_check oracle behavior


def test_grad_check_constant_function():
    x = nm.Parameter(np.ones(3, dtype=np.float32))
    report = nm.grad_check(lambda: nm.mul(nm.Tensor(np.zeros((), np.float32)), 1.0), [x])
    assert report.max_rel_err == 0.0


def test_grad_check_exact_quadratic():
    with nm.default_dtype(np.float64):
        rng = np.random.default_rng(8)
        x = p64(rng, (6,))
        zero = t64(np.zeros(6))
        report = nm.grad_check(lambda: nm.mse(x, zero), [x])
        assert report.max_rel_err <= 1e-6


def test_grad_check_rejects_non_scalar():
    x = nm.Parameter(np.ones(3, dtype=np.float32))
    with pytest.raises(CheckError):
        nm.grad_check(lambda: nm.mul(x, 2.0), [x])


def test_grad_check_rejects_non_finite():
    x = nm.Parameter(np.array([0.0], dtype=np.float32))
    with np.errstate(divide="ignore"), pytest.raises(CheckError):
        nm.grad_check(lambda: nm.log(nm.mul(x, 1.0)), [x])


# ---------------------------------------------------------------------------
# SGD


class TestSgd:
    def _param(self, values):
        p = nm.Parameter(np.asarray(values, dtype=np.float32))
        p.name = "w"
        return p

    def test_zero_lr_is_noop(self):
        p = self._param([1.0, -2.0])
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        nm.sgd_step([p], lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_vanilla_step(self):
        p = self._param([1.0, 1.0])
        p.grad = np.array([0.5, -0.5], dtype=np.float32)
        nm.sgd_step([p], lr=0.1)
        np.testing.assert_allclose(p.data, [0.95, 1.05], rtol=1e-6)
        assert p.grad is None

    def test_missing_grad_raises(self):
        p = self._param([1.0])
        with pytest.raises(StateError):
            nm.sgd_step([p], lr=0.1)

    def test_weight_decay_shrinks(self):
        p = self._param([1.0])
        p.grad = np.array([0.0], dtype=np.float32)
        nm.sgd_step([p], lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, [0.95], rtol=1e-6)

    def test_quadratic_bowl_converges(self):
        rng = np.random.default_rng(13)
        w = nm.Parameter(rng.normal(0.0, 1.0, size=8).astype(np.float32))
        w.name = "w"
        for step in range(200):
            loss = sq_sum(w)
            loss.backward()
            nm.sgd_step([w], lr=0.1)
            if np.linalg.norm(w.data) < 1e-3:
                break
        assert np.linalg.norm(w.data) < 1e-3
        assert step < 200

    def test_momentum_accumulates(self):
        p = self._param([0.0])
        p.grad = np.array([1.0], dtype=np.float32)
        nm.sgd_step([p], lr=1.0, momentum=0.9)
        p.grad = np.array([1.0], dtype=np.float32)
        nm.sgd_step([p], lr=1.0, momentum=0.9)
        # steps: v=1 then v=1.9 -> total 2.9
        np.testing.assert_allclose(p.data, [-2.9], rtol=1e-6)


# ---------------------------------------------------------------------------
# Checkpoints


class TestCheckpoint:
    def _params(self, rng):
        a = nm.Parameter(rng.normal(size=(3, 4)).astype(np.float32))
        a.name = "block.weight"
        b = nm.Parameter(rng.normal(size=(5,)).astype(np.float32))
        b.name = "block.bias"
        return [a, b]

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        params = self._params(rng)
        path = tmp_path / "model.ckpt"
        nm.save_checkpoint(path, params, {"depth": 3})
        config, arrays = nm.load_checkpoint(path)
        assert config == {"depth": 3}
        for p in params:
            assert arrays[p.name].tobytes() == p.data.tobytes()

    def test_archive_bytes_reproducible(self, tmp_path):
        rng = np.random.default_rng(18)
        params = self._params(rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nm.save_checkpoint(p1, params, {"x": 1})
        nm.save_checkpoint(p2, params, {"x": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_into_restores_values(self, tmp_path):
        rng = np.random.default_rng(19)
        params = self._params(rng)
        original = [p.data.copy() for p in params]
        path = tmp_path / "model.ckpt"
        nm.save_checkpoint(path, params, {})
        for p in params:
            p.data[:] = 0.0
        _, arrays = nm.load_checkpoint(path)
        nm.load_into(params, arrays)
        for p, orig in zip(params, original):
            np.testing.assert_array_equal(p.data, orig)

    def test_unnamed_parameter_rejected(self, tmp_path):
        p = nm.Parameter(np.zeros(2, dtype=np.float32))
        from weedvision.errors import FormatError

        with pytest.raises(FormatError):
            nm.save_checkpoint(tmp_path / "x.ckpt", [p], {})


# ---------------------------------------------------------------------------
# Tensor basics


def test_default_dtype_is_float32():
    t = nm.Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32


def test_backward_grad_shapes_match():
    with nm.default_dtype(np.float64):
        rng = np.random.default_rng(23)
        a, b = p64(rng, (3, 4)), p64(rng, (4,))
        sq_sum(nm.add(a, b)).backward()
        assert a.grad.shape == (3, 4)
        assert b.grad.shape == (4,)


def test_module_names_are_unique_and_dotted():
    rng = np.random.default_rng(0)

    class Tiny(nm.Module):
        def __init__(self):
            self.fc = nm.Linear(3, 2, rng)
            self.blocks = [nm.LayerNorm(2), nm.LayerNorm(2)]

    m = Tiny()
    m.bind_parameter_names()
    names = [p.name for p in m.parameters()]
    assert len(names) == len(set(names))
    assert "fc.weight" in names
    assert "blocks.0.gamma" in names
