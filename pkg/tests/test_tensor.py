"""Tensor core: op semantics, tape behaviour, finite-difference checks, IO."""

import numpy as np
import pytest

from avloc.tensor import (
    OPS,
    DomainError,
    NonFiniteError,
    OpDef,
    ShapeError,
    TapeError,
    Tensor,
    apply,
    backward,
    grad_check,
    gradcheck_suite,
)
from avloc.optim import AdamState, adam_step, init_adam
from avloc import tensorio


def t64(data, requires_grad=False):
    return Tensor(data, dtype=np.float64, requires_grad=requires_grad)


class TestElementwise:
    def test_add_sub_mul_div_values(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[4.0, 3.0], [2.0, 1.0]])
        np.testing.assert_array_equal(apply("add", a, b).numpy(), [[5, 5], [5, 5]])
        np.testing.assert_array_equal(apply("sub", a, b).numpy(), [[-3, -1], [1, 3]])
        np.testing.assert_array_equal(apply("mul", a, b).numpy(), [[4, 6], [6, 4]])
        np.testing.assert_array_equal(apply("div", a, b).numpy(), [[0.25, 2 / 3], [1.5, 4]])

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2, 2\).*\(3,\)"):
            apply("add", t64(np.zeros((2, 2))), t64(np.zeros(3)))

    def test_div_by_zero_rejected(self):
        with pytest.raises(DomainError, match="div"):
            apply("div", t64([1.0]), t64([0.0]))

    def test_log_non_positive_rejected(self):
        with pytest.raises(DomainError, match="log"):
            apply("log", t64([1.0, 0.0]))
        with pytest.raises(DomainError, match="log"):
            apply("log", t64([-0.5]))

    def test_exp_overflow_raises_instead_of_inf(self):
        with pytest.raises(NonFiniteError, match="exp"):
            apply("exp", Tensor([1000.0], dtype=np.float32))

    def test_sigmoid_is_stable_at_extremes(self):
        out = apply("sigmoid", t64([-800.0, 0.0, 800.0])).numpy()
        assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0

    def test_relu(self):
        out = apply("relu", t64([-2.0, 0.0, 3.0])).numpy()
        np.testing.assert_array_equal(out, [0.0, 0.0, 3.0])

    def test_scalar_mul(self):
        out = apply("scalar_mul", t64([1.0, -2.0]), value=2.5).numpy()
        np.testing.assert_array_equal(out, [2.5, -5.0])

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(TypeError, match="mixed"):
            apply("add", Tensor([1.0], dtype=np.float32), t64([1.0]))

    def test_unknown_op_and_attr_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            apply("transpose", t64([1.0]))
        with pytest.raises(ValueError, match="unknown attrs"):
            apply("relu", t64([1.0]), axis=0)


class TestReductions:
    def test_values_match_numpy(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4, 5))
        xt = t64(x)
        np.testing.assert_allclose(apply("sum", xt, axes=(0, 2)).numpy(), x.sum(axis=(0, 2)))
        np.testing.assert_allclose(apply("mean", xt, axes=1).numpy(), x.mean(axis=1))
        np.testing.assert_allclose(apply("max", xt, axes=(1,)).numpy(), x.max(axis=1))
        assert apply("sum", xt).shape == ()

    def test_max_tie_routes_gradient_to_lowest_flat_index(self):
        x = t64([[5.0, 5.0], [5.0, 5.0]], requires_grad=True)
        g = backward(apply("max", x))
        np.testing.assert_array_equal(g[x].numpy(), [[1.0, 0.0], [0.0, 0.0]])

    def test_max_tie_per_slice(self):
        # Ties within each reduced row resolve to the first (lowest index) entry.
        x = t64([[2.0, 2.0, 1.0], [0.0, 3.0, 3.0]], requires_grad=True)
        out = apply("max", x, axes=(1,))
        np.testing.assert_array_equal(out.numpy(), [2.0, 3.0])
        g = backward(out.sum())
        np.testing.assert_array_equal(g[x].numpy(), [[1, 0, 0], [0, 1, 0]])

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError, match="axis"):
            apply("sum", t64(np.zeros((2, 2))), axes=(2,))


class TestMatmul:
    def test_matches_numpy_all_transpose_flags(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        np.testing.assert_allclose(apply("matmul", t64(a), t64(b)).numpy(), a @ b)
        np.testing.assert_allclose(
            apply("matmul", t64(a.T), t64(b), transpose_a=True).numpy(), a @ b
        )
        np.testing.assert_allclose(
            apply("matmul", t64(a), t64(b.T), transpose_b=True).numpy(), a @ b
        )

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            apply("matmul", t64(np.zeros((3, 4))), t64(np.zeros((3, 5))))


def conv2d_loops(x, w, b=None, stride=(1, 1), pad=(0, 0)):
    """Nested-loop convolution oracle, deliberately naive."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * sh : yi * sh + kh, xi * sw : xi * sw + kw]
                    out[ni, oi, yi, xi] = (patch * w[oi]).sum() + (b[oi] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_kernel_reproduces_input(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = apply("conv2d", t64(x), t64(w), stride=1, pad=1).numpy()
        np.testing.assert_allclose(out, x, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((2, 1), (1, 2)), ((2, 2), (1, 1))])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = apply("conv2d", t64(x), t64(w), t64(b), stride=stride, pad=pad).numpy()
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-10)

    @pytest.mark.parametrize(
        "xs,ws,stride,pad",
        [
            ((2, 3, 7, 8), (4, 3, 3, 3), (2, 3), (1, 0)),  # stride remainder
            ((2, 1, 9, 4), (2, 1, 3, 3), (3, 2), (1, 1)),  # remainder + pad
            ((1, 2, 5, 5), (3, 2, 1, 7), (1, 1), (0, 3)),  # wide kernel
            ((1, 4, 4, 4), (2, 4, 3, 3), (1, 1), (2, 2)),  # pad > kernel-1
            ((1, 1, 1, 5), (2, 1, 3, 3), (4, 1), (2, 1)),  # single-row map
        ],
    )
    def test_gradient_odd_geometries(self, xs, ws, stride, pad):
        rng = np.random.default_rng(abs(hash((xs, ws))) % 2**31)
        x = t64(rng.standard_normal(xs), requires_grad=True)
        w = t64(rng.standard_normal(ws), requires_grad=True)
        weights = None

        def run(xt, wt):
            out = apply("conv2d", xt, wt, stride=stride, pad=pad)
            nonlocal weights
            if weights is None:
                weights = t64(np.random.default_rng(3).standard_normal(out.shape))
            return apply("inner", out, weights)

        assert grad_check(run, [x, w]) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            apply("conv2d", t64(np.zeros((1, 3, 5, 5))), t64(np.zeros((2, 4, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="conv2d"):
            apply("conv2d", t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))


class TestMaxPool:
    def test_known_grid(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = apply("maxpool2d", t64(x), kernel=2, stride=2).numpy()
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_tie_gradient_goes_to_lowest_flat_index(self):
        x = t64(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = apply("maxpool2d", x, kernel=2, stride=2)
        g = backward(out.sum())
        np.testing.assert_array_equal(g[x].numpy()[0, 0], [[1, 0], [0, 0]])

    def test_gradient_mass_is_conserved(self):
        rng = np.random.default_rng(2)
        x = t64(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        out = apply("maxpool2d", x, kernel=2, stride=2)
        weights = t64(rng.standard_normal(out.shape))
        g = backward(apply("inner", out, weights))
        gx = g[x].numpy()
        # One input position per output cell, so totals match exactly.
        assert np.count_nonzero(gx) == out.size
        np.testing.assert_allclose(gx.sum(), weights.numpy().sum(), rtol=1e-12)


class TestStructureOps:
    def test_reshape_concat_round_trip(self):
        x = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = apply("reshape", x, shape=(3, 2))
        assert y.shape == (3, 2)
        with pytest.raises(ShapeError, match="reshape"):
            apply("reshape", x, shape=(4, 2))
        z = apply("concat", x, x, axis=0)
        assert z.shape == (4, 3)
        g = backward(z.sum())
        np.testing.assert_array_equal(g[x].numpy(), 2 * np.ones((2, 3)))

    def test_concat_shape_check(self):
        with pytest.raises(ShapeError, match="concat"):
            apply("concat", t64(np.zeros((2, 3))), t64(np.zeros((2, 4))), axis=0)

    def test_normalize_unit_norm(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((8, 5, 5))
        out = apply("normalize", t64(x), axis=0).numpy()
        norms = np.sqrt((out**2).sum(axis=0))
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_normalize_guard_on_zero_vector(self):
        out = apply("normalize", t64(np.zeros(4)), axis=0).numpy()
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_inner_is_frobenius(self):
        a = np.arange(6.0).reshape(2, 3)
        assert apply("inner", t64(a), t64(a)).item() == (a * a).sum()


class TestTape:
    def test_fanout_gradients_accumulate(self):
        x = t64(2.0, requires_grad=True)
        y = apply("add", x, x)
        g = backward(y)
        assert g[x].item() == 2.0

    def test_diamond_graph(self):
        x = t64([1.0, 2.0], requires_grad=True)
        a = apply("scalar_mul", x, value=3.0)
        b = apply("scalar_mul", x, value=4.0)
        g = backward(apply("add", a, b).sum())
        np.testing.assert_array_equal(g[x].numpy(), [7.0, 7.0])

    def test_non_parameter_leaves_get_no_gradient(self):
        x = t64([1.0], requires_grad=True)
        c = t64([5.0])
        g = backward(apply("mul", x, c).sum())
        assert x in g and c not in g
        with pytest.raises(KeyError):
            g[c]

    def test_backward_requires_scalar(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(apply("relu", x))

    def test_backward_on_leaf_is_empty_tape(self):
        with pytest.raises(TapeError, match="empty tape"):
            backward(t64(1.0, requires_grad=True))

    def test_second_backward_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        loss = apply("relu", x).sum()
        backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            backward(loss)
        # Reusing part of the spent graph in a new loss is also rejected.
        y = apply("relu", x)
        loss2 = y.sum()
        backward(loss2)
        with pytest.raises(TapeError, match="consumed"):
            backward(apply("scalar_mul", y, value=2.0).sum())

    def test_tensors_are_immutable(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), dtype=np.float32)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), dtype=np.float32)
        a = apply("conv2d", x, w, stride=2, pad=1).numpy()
        b = apply("conv2d", x, w, stride=2, pad=1).numpy()
        assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_rejects_real32(self):
        x = Tensor([1.0], dtype=np.float32)
        with pytest.raises(TypeError, match="real64"):
            grad_check(lambda t: t.sum(), [x])

    def test_rejects_functions_off_the_tape(self):
        # A plain float (e.g. an evaluation metric) is not differentiable.
        with pytest.raises(ValueError, match="scalar Tensor"):
            grad_check(lambda t: float(t.numpy().sum()), [t64([1.0])])

    def test_rejects_constant_output(self):
        with pytest.raises(ValueError, match="tape"):
            grad_check(lambda t: t64(3.0), [t64([1.0])])

    def test_suite_passes_over_many_random_shapes(self):
        """Every op's backward agrees with central differences, many seeds."""
        total = 0
        for seed in range(6):
            for res in gradcheck_suite(tolerance=1e-5, seed=seed):
                assert res.passed, f"{res.op} failed at seed {seed}: {res.max_rel_err:.2e}"
                total += 1
        assert total >= 100

    def test_corrupted_backward_is_caught_and_named(self, monkeypatch):
        good = OPS["sigmoid"]
        bad = OpDef(
            good.name,
            good.forward,
            lambda ctx, g: [g * ctx * (1.0 - ctx) * 1.01],
            good.attrs,
            good.arity,
            good.example,
        )
        monkeypatch.setitem(OPS, "sigmoid", bad)
        failures = [r.op for r in gradcheck_suite(tolerance=1e-5) if not r.passed]
        assert failures == ["sigmoid"]

    def test_empty_registry_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            gradcheck_suite(ops={})


class TestAdam:
    def test_first_step_moves_by_lr(self):
        """With g=1 the bias-corrected first update is lr/(1+eps)."""
        p = {"w": t64(1.0, requires_grad=True)}
        g = {"w": t64(1.0)}
        new, state = adam_step(p, g, init_adam(p), lr=0.1)
        assert state.step == 1
        expected = 1.0 - 0.1 / (1.0 + 1e-8)
        assert abs(new["w"].item() - expected) < 1e-12

    def test_two_steps_constant_gradient(self):
        # Hand computation: with constant g=1 both bias-corrected moments stay
        # exactly 1, so each step subtracts lr/(1+eps).
        p = {"w": t64(1.0, requires_grad=True)}
        g = {"w": t64(1.0)}
        state = init_adam(p)
        p, state = adam_step(p, g, state, lr=0.1)
        p, state = adam_step(p, g, state, lr=0.1)
        assert state.step == 2
        expected = 1.0 - 2 * (0.1 / (1.0 + 1e-8))
        assert abs(p["w"].item() - expected) < 1e-12

    def test_defaults_and_state_isolation(self):
        rng = np.random.default_rng(1)
        p = {"w": Tensor(rng.standard_normal((3, 3)), dtype=np.float32, requires_grad=True)}
        g = {"w": Tensor(rng.standard_normal((3, 3)), dtype=np.float32)}
        s0 = init_adam(p)
        p1, s1 = adam_step(p, g, s0)
        assert s0.step == 0 and s1.step == 1
        assert (s0.m["w"] == 0).all()  # old state untouched
        assert (s1.v["w"] >= 0).all()
        assert p1["w"].dtype == np.float32

    def test_name_mismatch_rejected(self):
        p = {"w": t64(1.0, requires_grad=True)}
        with pytest.raises(KeyError, match="mismatch"):
            adam_step(p, {"b": t64(1.0)}, init_adam(p))

    def test_bad_hyperparams_rejected(self):
        p = {"w": t64(1.0, requires_grad=True)}
        g = {"w": t64(1.0)}
        with pytest.raises(ValueError):
            adam_step(p, g, init_adam(p), lr=-1.0)
        with pytest.raises(ValueError):
            adam_step(p, g, init_adam(p), beta1=1.0)


class TestTensorIO:
    def test_header_layout_frozen(self):
        import struct

        arr = np.ones((2, 3), dtype=np.float32)
        blob = tensorio.tensor_to_bytes(arr)
        expected = b"TSR1" + bytes([0, 2]) + struct.pack("<II", 2, 3) + arr.tobytes()
        assert blob == expected

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (2, 3, 4, 5)])
    def test_round_trip_bit_identical(self, dtype, shape):
        rng = np.random.default_rng(hash((str(dtype), shape)) % 2**32)
        arr = rng.standard_normal(shape).astype(dtype)
        back = tensorio.tensor_from_bytes(tensorio.tensor_to_bytes(arr))
        assert back.dtype == dtype and back.shape == shape
        assert back.tobytes() == arr.tobytes()

    def test_bad_magic_and_truncation(self):
        arr = np.zeros(3, dtype=np.float32)
        blob = tensorio.tensor_to_bytes(arr)
        with pytest.raises(tensorio.FormatError, match="magic"):
            tensorio.tensor_from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(tensorio.FormatError, match="size|truncated"):
            tensorio.tensor_from_bytes(blob[:-2])
        with pytest.raises(tensorio.FormatError):
            tensorio.tensor_from_bytes(blob + b"\x00")

    def test_int_tensors_rejected(self):
        with pytest.raises(TypeError, match="real32/real64"):
            tensorio.tensor_to_bytes(np.arange(3))

    def test_checkpoint_round_trip_and_order_independence(self, tmp_path):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((3, 2)).astype(np.float32)
        b = rng.standard_normal(5)
        blob1 = tensorio.checkpoint_to_bytes({"alpha": a, "beta": b})
        blob2 = tensorio.checkpoint_to_bytes({"beta": b, "alpha": a})
        assert blob1 == blob2  # sorted by name
        path = tmp_path / "model.ckpt"
        path.write_bytes(blob1)
        out = tensorio.load_checkpoint(path)
        assert sorted(out) == ["alpha", "beta"]
        assert out["alpha"].tobytes() == a.tobytes()
        assert out["beta"].dtype == np.float64
        with pytest.raises(tensorio.FormatError):
            tensorio.checkpoint_from_bytes(blob1[:-3])
