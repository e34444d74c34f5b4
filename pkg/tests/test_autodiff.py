
import numpy as np
import pytest

from emocomment import autodiff as ad
from emocomment.errors import ConfigError, DimensionError, TrainingError, UsageError


def numeric_grad(fn, x, eps=1e-5):
    """Independent central-difference gradient of scalar fn wrt array x (float64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def f64(rng, *shape):
    return ad.Tensor(rng.uniform(-1.0, 1.0, size=shape, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = ad.Tensor(np.eye(2, dtype=np.float32))
        b = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(ad.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_zero(self):
        a = ad.Tensor([[1.0, 2.0]])
        b = ad.Tensor([[0.0], [0.0]])
        assert np.allclose(ad.matmul(a, b).data, [[0.0]])

    def test_shape_mismatch_names_shapes(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((4, 2)))
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(a, b)

    def test_backward_matches_finite_differences(self):
        rng = ad.Rng(0)
        a = f64(rng, 3, 4)
        b = f64(rng, 4, 2)
        out = ad.tsum(ad.matmul(a, b))
        out.backward()
        num = numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
        assert rel_err(a.grad, num) < 1e-3

    def test_batched_backward(self):
        rng = ad.Rng(1)
        a = f64(rng, 2, 3, 4)
        b = f64(rng, 4, 5)
        loss = lambda: ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))
        out = loss()
        out.backward()
        for t in (a, b):
            num = numeric_grad(lambda: loss().item(), t.data)
            assert rel_err(t.grad, num) < 1e-4


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_stability_under_large_inputs(self):
        out = ad.softmax(ad.Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-6)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            ad.softmax(ad.Tensor(np.zeros((2, 0))), axis=1)

    def test_rows_sum_to_one(self):
        rng = ad.Rng(3)
        for seed in range(5):
            x = ad.Tensor(ad.Rng(seed).uniform(-5, 5, size=(4, 7)))
            s = ad.softmax(x, axis=1).data.sum(axis=1)
            assert np.allclose(s, 1.0, atol=1e-6)
            assert np.all(ad.softmax(x, axis=1).data >= 0)

    def test_backward_matches_finite_differences(self):
        rng = ad.Rng(4)
        x = f64(rng, 5)
        w = rng.uniform(-1, 1, size=5, dtype=np.float64)

        def fwd():
            return float((ad.softmax(ad.Tensor(x.data), axis=0).data * w).sum())

        out = ad.tsum(ad.mul(ad.softmax(x, axis=0), ad.Tensor(w)))
        out.backward()
        num = numeric_grad(fwd, x.data)
        assert rel_err(x.grad, num) < 1e-3


class TestElementwiseOps:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor([0.0])).item() == pytest.approx(0.5)

    def test_concat_axis0(self):
        out = ad.concat([ad.Tensor([1.0, 2.0]), ad.Tensor([3.0])], axis=0)
        assert np.allclose(out.data, [1, 2, 3])

    def test_concat_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 4)))], axis=0)

    def test_embedding_out_of_range(self):
        table = ad.Tensor(np.zeros((4, 2)))
        with pytest.raises(IndexError):
            ad.embedding_lookup(table, np.array([4]))

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t))),
            ("tanh", lambda t: ad.tsum(ad.tanh(t))),
            ("exp", lambda t: ad.tsum(ad.exp(t))),
            ("mul_self", lambda t: ad.tsum(ad.mul(t, t))),
            ("add_bias", lambda t: ad.tsum(ad.add(ad.mul(t, t), t))),
            ("softmax", lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=-1), ad.softmax(t, axis=-1)))),
        ],
    )
    def test_backward_vs_finite_differences(self, name, fn):
        for seed in range(5):
            rng = ad.Rng(seed)
            t = f64(rng, 3, 4)
            fn(t).backward()
            num = numeric_grad(lambda: fn(ad.Tensor(t.data.copy())).item(), t.data)
            assert rel_err(t.grad, num) < 1e-3, name

    def test_cross_entropy_backward(self):
        rng = ad.Rng(9)
        logits = f64(rng, 3, 6)
        targets = np.array([1, 0, 5])

        def loss():
            return ad.tmean(ad.cross_entropy(ad.softmax(logits, axis=1), targets))

        loss().backward()
        num = numeric_grad(lambda: loss().item(), logits.data)
        assert rel_err(logits.grad, num) < 1e-3

    def test_embedding_lookup_accumulates_repeats(self):
        table = ad.Tensor(np.zeros((3, 2), dtype=np.float64), requires_grad=True)
        out = ad.tsum(ad.embedding_lookup(table, np.array([1, 1, 2])))
        out.backward()
        assert np.allclose(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_scatter_add_values_and_grads(self):
        base = ad.Tensor(np.zeros((2, 4), dtype=np.float64), requires_grad=True)
        vals = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        ids = np.array([[0, 0], [1, 3]])
        out = ad.scatter_add(base, ids, vals)
        assert np.allclose(out.data, [[3, 0, 0, 0], [0, 3, 0, 4]])
        ad.tsum(ad.mul(out, out)).backward()
        num = numeric_grad(
            lambda: float((_scatter_np(base.data, ids, vals.data) ** 2).sum()), vals.data
        )
        assert rel_err(vals.grad, num) < 1e-3


def _scatter_np(base, ids, vals):
    out = base.copy()
    rows = np.arange(ids.shape[0])[:, None]
    np.add.at(out, (rows, ids), vals)
    return out


class TestLSTMCell:
    def _params(self, rng, d_in, d_h, dtype=np.float64):
        return ad.LSTMParams(
            w_input=ad.Tensor(rng.uniform(-0.5, 0.5, size=(d_in, 4 * d_h), dtype=dtype), requires_grad=True),
            w_hidden=ad.Tensor(rng.uniform(-0.5, 0.5, size=(d_h, 4 * d_h), dtype=dtype), requires_grad=True),
            bias=ad.Tensor(rng.uniform(-0.5, 0.5, size=4 * d_h, dtype=dtype), requires_grad=True),
        )

    def test_zero_params_zero_state_give_zero_hidden(self):
        p = ad.LSTMParams(
            w_input=ad.Tensor(np.zeros((3, 8))),
            w_hidden=ad.Tensor(np.zeros((2, 8))),
            bias=ad.Tensor(np.zeros(8)),
        )
        x = ad.Tensor([[5.0, -2.0, 1.0]])
        h = ad.Tensor(np.zeros((1, 2)))
        c = ad.Tensor(np.zeros((1, 2)))
        h2, c2 = ad.lstm_cell(x, h, c, p)
        assert np.allclose(h2.data, 0.0)

    def test_hidden_in_unit_interval(self):
        rng = ad.Rng(5)
        p = self._params(rng, 4, 6)
        x = f64(rng, 2, 4)
        h = f64(rng, 2, 6)
        c = f64(rng, 2, 6)
        h2, _ = ad.lstm_cell(x, h, c, p)
        assert np.all(np.abs(h2.data) < 1.0)

    def test_shape_mismatch(self):
        rng = ad.Rng(6)
        p = self._params(rng, 4, 6)
        with pytest.raises(DimensionError):
            ad.lstm_cell(f64(rng, 2, 5), f64(rng, 2, 6), f64(rng, 2, 6), p)

    def test_full_cell_backward_vs_finite_differences(self):
        rng = ad.Rng(7)
        p = self._params(rng, 4, 6)
        x = f64(rng, 2, 4)
        h0 = f64(rng, 2, 6)
        c0 = f64(rng, 2, 6)
        probe = ad.Tensor(rng.uniform(-1, 1, size=(2, 6), dtype=np.float64))

        def loss():
            h2, c2 = ad.lstm_cell(x, h0, c0, p)
            return ad.tsum(ad.add(ad.mul(h2, probe), ad.mul(c2, c2)))

        loss().backward()
        for t in [x, h0, c0, p.w_input, p.w_hidden, p.bias]:
            num = numeric_grad(lambda: loss().item(), t.data)
            assert rel_err(t.grad, num) < 1e-3


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = ad.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        opt = ad.Adam({"p": p})
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step()
        assert np.allclose(p.data, [1.0, 2.0])

    def test_single_step_hand_computed(self):
        # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) = lr
        p = ad.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=1e-3)
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        assert p.item() == pytest.approx(1.0 - 1e-3, abs=1e-7)
        assert opt.state.step == 1

    def test_descends_quadratic(self):
        p = ad.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = ad.Adam({"p": p}, lr=1e-2)
        for _ in range(200):
            opt.zero_grad()
            loss = ad.tsum(ad.mul(p, p))
            loss.backward()
            opt.step()
        assert abs(p.item()) < 0.5

    def test_nonfinite_gradient_names_parameter(self):
        p = ad.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = ad.Adam({"w_spike": p})
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(TrainingError, match="w_spike"):
            opt.step()

    def test_step_counter_increments(self):
        p = ad.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        opt = ad.Adam({"p": p})
        for t in range(1, 4):
            p.grad = np.array([0.1], dtype=np.float32)
            opt.step()
            assert opt.state.step == t


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = ad.Tensor(np.ones((3, 3)))
        out = ad.dropout(x, 0.0, ad.Rng(0), training=True)
        assert out is x

    def test_inference_is_identity(self):
        x = ad.Tensor(np.ones((3, 3)))
        out = ad.dropout(x, 0.9, ad.Rng(0), training=False)
        assert out is x

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            ad.dropout(ad.Tensor(np.ones(3)), 1.0, ad.Rng(0), training=True)

    def test_monte_carlo_mean_preserved(self):
        rng = ad.Rng(42)
        ones = ad.Tensor(np.ones(10_000, dtype=np.float32))
        out = ad.dropout(ones, 0.3, rng, training=True)
        assert out.data.mean() == pytest.approx(1.0, rel=0.01)

    def test_same_seed_same_mask(self):
        x = ad.Tensor(np.ones((4, 4)))
        a = ad.dropout(x, 0.5, ad.Rng(11), training=True).data
        b = ad.dropout(x, 0.5, ad.Rng(11), training=True).data
        assert np.array_equal(a, b)


class TestRng:
    def test_same_seed_same_stream(self):
        a = ad.Rng(123)
        b = ad.Rng(123)
        assert np.array_equal(a.uniform(-1, 1, size=100), b.uniform(-1, 1, size=100))

    def test_fork_is_deterministic_and_distinct(self):
        a = ad.Rng(5).fork("init")
        b = ad.Rng(5).fork("init")
        c = ad.Rng(5).fork("dropout")
        assert np.array_equal(a.uniform(0, 1, size=10), b.uniform(0, 1, size=10))
        assert not np.array_equal(ad.Rng(5).fork("init").uniform(0, 1, size=10), c.uniform(0, 1, size=10))

    def test_init_param_bit_identical(self):
        a = ad.init_param(ad.Rng(7), (5, 5))
        b = ad.init_param(ad.Rng(7), (5, 5))
        assert a.data.tobytes() == b.data.tobytes()
        assert a.data.dtype == np.float32
        assert np.all(np.abs(a.data) <= ad.INIT_SCALE)


class TestBackwardSemantics:
    def test_double_backward_accumulates(self):
        x = ad.Tensor(np.array([1.0, 2.0], dtype=np.float64), requires_grad=True)
        out = ad.tsum(ad.mul(x, x))
        out.backward()
        g1 = x.grad.copy()
        out2 = ad.tsum(ad.mul(x, x))
        out2.backward()
        assert np.allclose(x.grad, 2 * g1)

    def test_shared_subexpression_counted_once_per_path(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        y = ad.mul(x, x)
        out = ad.add(y, y)
        out.backward(seed=np.ones(1, dtype=np.float32))
        assert x.grad[0] == pytest.approx(12.0)

    def test_backward_nonscalar_without_seed_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(UsageError):
            ad.mul(x, x).backward()

    def test_no_grad_blocks_graph(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad

    def test_deep_graph_survives_recursion_limit(self):
        x = ad.Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
        y = x
        for _ in range(3000):
            y = ad.add(y, x)
        ad.tsum(y).backward()
        assert x.grad[0] == pytest.approx(3001.0)


class TestGradCheck:
    def _linear_setup(self):
        w = ad.Tensor(np.array([0.3, -0.7, 1.1], dtype=np.float64), requires_grad=True)
        coeff = ad.Tensor(np.array([2.0, -1.0, 0.5], dtype=np.float64))
        return w, lambda: ad.tsum(ad.mul(w, coeff))

    def test_linear_function_near_exact(self):
        w, fn = self._linear_setup()
        assert ad.grad_check(fn, {"w": w}) < 1e-6

    def test_nonscalar_rejected(self):
        w = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            ad.grad_check(lambda: ad.mul(w, w), {"w": w})

    def test_corrupted_gradient_detected(self):
        # doubled analytic gradient: |2g - g| / max(|2g|, |g|) = 1/2
        w = ad.Tensor(np.array([0.4, 0.9], dtype=np.float64), requires_grad=True)
        coeff = np.array([1.5, -2.5])

        def fn():
            out = ad.tsum(ad.mul(ad.mul(w, ad.Tensor(coeff)), 2.0))
            return out

        # corrupt by doubling the stored gradient after backward via a wrapper fn
        def corrupted_check():
            for p in (w,):
                p.zero_grad()
            out = fn()
            out.backward()
            w.grad *= 2
            worst = 0.0
            flat = w.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                h = 1e-3 * max(1.0, abs(float(orig)))
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = float(w.grad.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            return worst

        assert corrupted_check() == pytest.approx(0.5, abs=1e-3)

    def test_op_catalogue_float32(self):
        # Float32 storage with a step size above the float32 forward-noise
        # floor; restricted to ops whose gradient components stay O(1) here,
        # so per-component relative error is meaningful.
        for seed in range(5):
            rng = ad.Rng(seed)
            w = ad.Tensor(rng.uniform(0.2, 1.0, size=(3, 4)), requires_grad=True)
            b = ad.Tensor(rng.uniform(0.2, 1.0, size=(4,)), requires_grad=True)
            u = ad.Tensor(rng.uniform(-1.0, 1.0, size=(2, 3)), requires_grad=True)
            t = ad.Tensor(rng.uniform(-1.0, 1.0, size=(5, 3)), requires_grad=True)
            x = ad.Tensor(rng.uniform(0.2, 1.0, size=(2, 3)))
            probe = ad.Tensor(rng.uniform(1.0, 2.0, size=(2, 4 + 3 + 3)))
            ids = np.array([0, 4])

            def fn():
                z = ad.add(ad.matmul(x, w), b)
                rows = ad.embedding_lookup(t, ids)
                y = ad.concat([z, ad.tanh(u), rows], axis=1)
                return ad.tsum(ad.mul(y, probe))

            params = {"w": w, "b": b, "u": u, "t": t}
            assert ad.grad_check(fn, params, eps=1e-2) < 1e-3

    def test_op_catalogue_float64(self):
        # Full catalogue, float64 tensors: sharp gradients at the default step.
        for seed in range(5):
            rng = ad.Rng(seed)

            def f64(lo, hi, *shape, grad=True):
                return ad.Tensor(
                    rng.uniform(lo, hi, size=shape, dtype=np.float64),
                    requires_grad=grad,
                )

            d_in, d_h = 3, 4
            params = {
                "w_input": f64(-0.5, 0.5, d_in, 4 * d_h),
                "w_hidden": f64(-0.5, 0.5, d_h, 4 * d_h),
                "bias": f64(-0.5, 0.5, 4 * d_h),
                "x": f64(-1.0, 1.0, 2, d_in),
                "h": f64(-1.0, 1.0, 2, d_h),
                "c": f64(-1.0, 1.0, 2, d_h),
                "logits": f64(-1.0, 1.0, 2, 5),
            }
            ph = f64(1.0, 2.0, 2, d_h, grad=False)
            pc = f64(1.0, 2.0, 2, d_h, grad=False)
            targets = np.array([1, 4])

            def fn():
                lp = ad.LSTMParams(params["w_input"], params["w_hidden"], params["bias"])
                h2, c2 = ad.lstm_cell(params["x"], params["h"], params["c"], lp)
                cell = ad.tsum(ad.add(ad.mul(h2, ph), ad.mul(ad.sigmoid(c2), pc)))
                probs = ad.softmax(params["logits"], axis=1)
                nll = ad.tmean(ad.cross_entropy(probs, targets))
                return ad.add(cell, ad.mul(nll, ad.exp(ad.tmean(h2))))

            assert ad.grad_check(fn, params) < 1e-3


class TestClipGradNorm:
    def test_clips_to_max(self):
        p = ad.Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
        p.grad = np.full(4, 3.0, dtype=np.float32)
        norm = ad.clip_grad_norm({"p": p}, 5.0)
        assert norm == pytest.approx(6.0)
        assert np.linalg.norm(p.grad) == pytest.approx(5.0)

    def test_small_gradients_untouched(self):
        p = ad.Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
        g = np.full(4, 0.1, dtype=np.float32)
        p.grad = g.copy()
        ad.clip_grad_norm({"p": p}, 5.0)
        assert np.array_equal(p.grad, g)
