"""Numerics: op contracts, gradient checks against central differences,
optimizer behaviour, and checkpoint round-trips."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longner import tensor as T
from longner.optim import AdamW, finite_diff_check, load_params, save_params
from longner.tensor import ShapeError, Tensor

from conftest import rand_tensor


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_gradient_matches_finite_differences(rng):
    b0 = rng.standard_normal((4, 2))
    err_a = finite_diff_check(lambda x: T.tsum(T.matmul(x, Tensor(b0))),
                              rand_tensor(rng, (3, 4)))
    a0 = rng.standard_normal((3, 4))
    err_b = finite_diff_check(lambda x: T.tsum(T.matmul(Tensor(a0), x)),
                              rand_tensor(rng, (4, 2)))
    assert err_a < 1e-4 and err_b < 1e-4


def test_matmul_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
    with pytest.raises(ShapeError, match="batch"):
        T.matmul(Tensor(np.zeros((3, 2, 3))), Tensor(np.zeros((2, 3, 2))))


def test_matmul_batch_broadcast_from_one(rng):
    a = Tensor(rng.standard_normal((5, 2, 3)))
    b = Tensor(rng.standard_normal((3, 4)))
    out = T.matmul(a, b)
    assert out.shape == (5, 2, 4)
    np.testing.assert_allclose(out.data, a.data @ b.data)


# ---------------------------------------------------------------------------
# masked softmax


def test_masked_softmax_symmetric():
    out = T.masked_softmax(Tensor([0.0, 0.0]), np.array([True, True]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_masked_softmax_single_unmasked():
    out = T.masked_softmax(Tensor([5.0, -3.0]), np.array([True, False]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


def test_masked_softmax_matches_high_precision():
    # independent evaluation of exp/sum at 50 digits
    logits = [1.0, 2.0, 3.0]
    with mpmath.workdps(50):
        es = [mpmath.exp(x) for x in logits]
        total = sum(es)
        expected = [float(e / total) for e in es]
    out = T.masked_softmax(Tensor(logits), np.ones(3, dtype=bool))
    np.testing.assert_allclose(out.data, expected, rtol=1e-14)


def test_masked_softmax_fully_masked_row_error():
    with pytest.raises(ValueError, match="row at flat index 1"):
        T.masked_softmax(Tensor(np.zeros((3, 2))),
                         np.array([[True, True], [False, False], [True, False]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_masked_softmax_rows_sum_to_one(n, rows, seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((rows, n)) * 5)
    mask = rng.random((rows, n)) < 0.7
    mask[np.arange(rows), rng.integers(0, n, size=rows)] = True  # keep rows non-empty
    out = T.masked_softmax(logits, mask)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(out.data[~mask] == 0.0)
    assert np.all(out.data >= 0.0)


# ---------------------------------------------------------------------------
# conv2d


def naive_conv3x3(x, k, b):
    cin, h, w = x.shape
    cout = k.shape[0]
    out = np.zeros((cout, h, w))
    for co in range(cout):
        for y in range(h):
            for xx in range(w):
                acc = b[co]
                for ci in range(cin):
                    for dy in range(3):
                        for dx in range(3):
                            yy, xs = y + dy - 1, xx + dx - 1
                            if 0 <= yy < h and 0 <= xs < w:
                                acc += k[co, ci, dy, dx] * x[ci, yy, xs]
                out[co, y, xx] = acc
    return out


def test_conv_zero_input_zero_bias():
    out = T.conv2d_3x3(Tensor(np.zeros((2, 4, 5))), Tensor(np.ones((3, 2, 3, 3))),
                       Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 4, 5)))


def test_conv_identity_kernel():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d_3x3(x, Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_naive_loop(rng):
    x = rng.standard_normal((2, 5, 7))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d_3x3(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, naive_conv3x3(x, k, b), atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d_3x3(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))),
                     Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# bce with logits


def test_bce_analytic_ln2():
    out = T.bce_with_logits(Tensor([0.0]), np.array([1.0]), np.array([True]))
    assert abs(out.item() - math.log(2.0)) < 1e-12


def test_bce_saturation_no_overflow():
    out = T.bce_with_logits(Tensor([30.0]), np.array([1.0]), np.array([True]))
    assert 0.0 <= out.item() < 1e-12


def test_bce_matches_high_precision(rng):
    x = rng.standard_normal(20) * 3
    y = (rng.random(20) < 0.5).astype(float)
    with mpmath.workdps(50):
        terms = [-(yy * mpmath.log(mpmath.sigmoid(xx)) + (1 - yy) * mpmath.log(1 - mpmath.sigmoid(xx)))
                 for xx, yy in zip(x, y)]
        expected = float(sum(terms) / len(terms))
    out = T.bce_with_logits(Tensor(x), y, np.ones(20, dtype=bool))
    assert abs(out.item() - expected) < 1e-8


def test_bce_empty_mask_error():
    with pytest.raises(ValueError, match="empty valid mask"):
        T.bce_with_logits(Tensor([1.0]), np.array([1.0]), np.array([False]))


def test_bce_respects_mask(rng):
    x = rng.standard_normal(6)
    y = np.zeros(6)
    mask = np.array([True, True, False, False, True, False])
    out = T.bce_with_logits(Tensor(x), y, mask)
    only = T.bce_with_logits(Tensor(x[mask]), y[mask], np.ones(3, dtype=bool))
    assert abs(out.item() - only.item()) < 1e-12


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_zero_grad_no_decay_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adamw_decoupled_decay_only():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-1, weight_decay=1e-2)
    before = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, before * (1.0 - 1e-3), rtol=0, atol=0)


def test_adamw_three_steps_match_scripted_trace():
    # independent straight-line evaluation of the update recurrences
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    x_ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2.0 * x_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x_ref = x_ref - lr * (mhat / (math.sqrt(vhat) + eps) + wd * x_ref)

    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    for _ in range(3):
        out = T.tsum(T.mul(p, p))
        out.backward()
        opt.step()
        opt.zero_grad()
    assert abs(p.data[0] - x_ref) < 1e-10
    assert opt.step_count == 3


def test_adamw_deterministic_bitwise(rng):
    def run():
        p = Tensor(np.linspace(-1, 1, 7), requires_grad=True)
        opt = AdamW({"p": p}, lr=3e-3)
        g = np.sin(np.arange(7.0))
        for _ in range(5):
            p.grad = g.copy()
            opt.step()
        return p.data
    a, b = run(), run()
    assert np.array_equal(a, b)


def test_adamw_nonfinite_gradient_names_parameter():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"enc.w_q": p}, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(ValueError, match="enc.w_q"):
        opt.step()


def test_adamw_requires_positive_lr():
    with pytest.raises(ValueError, match="positive"):
        AdamW({}, lr=0.0)


def test_adamw_skips_frozen_parameters():
    frozen = Tensor(np.array([2.0]), requires_grad=False)
    live = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"a": frozen, "b": live}, lr=0.1, weight_decay=0.1)
    live.grad = np.array([1.0])
    opt.step()
    assert frozen.data[0] == 2.0 and live.data[0] != 2.0


# ---------------------------------------------------------------------------
# finite-difference checker


def test_fd_check_sum_is_exact():
    # dyadic values and a power-of-two step keep every difference exact
    x = Tensor(np.arange(8.0) / 8.0)
    err = finite_diff_check(lambda t: T.tsum(t), x, eps=2.0 ** -13)
    assert err == 0.0


def test_fd_check_sum_of_squares_analytic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = T.tsum(T.mul(x, x))
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)
    err = finite_diff_check(lambda t: T.tsum(T.mul(t, t)), Tensor(np.array([1.0, 2.0, 3.0])), eps=1e-4)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# gradient checks across every differentiable op


def _ln_params(width):
    g = Tensor(np.linspace(0.5, 1.5, width), requires_grad=True)
    b = Tensor(np.linspace(-0.1, 0.1, width), requires_grad=True)
    return g, b


OP_CASES = {
    "add": ((3, 4), lambda x, rng: T.tsum(T.mul(T.add(x, Tensor(rng.standard_normal((3, 4)))), x))),
    "sub": ((3, 4), lambda x, rng: T.tsum(T.mul(T.sub(x, Tensor(rng.standard_normal((3, 4)))), x))),
    "mul": ((2, 5), lambda x, rng: T.tsum(T.mul(x, Tensor(rng.standard_normal((2, 5)))))),
    "mul_scalar": ((4,), lambda x, rng: T.tsum(T.mul_scalar(x, -1.7))),
    "mul_const": ((3, 2), lambda x, rng: T.tsum(T.mul_const(x, rng.standard_normal((3, 2))))),
    "neg": ((4,), lambda x, rng: T.tsum(T.mul(T.neg(x), x))),
    "matmul": ((3, 4), lambda x, rng: T.tsum(T.mul(T.matmul(x, Tensor(rng.standard_normal((4, 2)))),
                                                   Tensor(rng.standard_normal((3, 2)))))),
    "matmul_batched": ((2, 3, 4), lambda x, rng: T.tsum(T.mul(
        T.matmul(x, Tensor(rng.standard_normal((2, 4, 2)))), Tensor(rng.standard_normal((2, 3, 2)))))),
    "transpose": ((2, 3, 4), lambda x, rng: T.tsum(T.mul(T.transpose(x, (1, 2, 0)),
                                                         Tensor(rng.standard_normal((3, 4, 2)))))),
    "reshape": ((3, 4), lambda x, rng: T.tsum(T.mul(T.reshape(x, (2, 6)),
                                                    Tensor(rng.standard_normal((2, 6)))))),
    "concat": ((2, 3), lambda x, rng: T.tsum(T.mul(T.concat([x, x], axis=-1),
                                                   Tensor(rng.standard_normal((2, 6)))))),
    "take_rows": ((5, 3), lambda x, rng: T.tsum(T.mul(T.take_rows(x, np.array([[0, 2], [4, 2]])),
                                                      Tensor(rng.standard_normal((2, 2, 3)))))),
    "broadcast_to": ((1, 3), lambda x, rng: T.tsum(T.mul(T.broadcast_to(x, (4, 3)),
                                                         Tensor(rng.standard_normal((4, 3)))))),
    "sum_axis": ((3, 4), lambda x, rng: T.tsum(T.mul(T.tsum(x, axis=1), Tensor(rng.standard_normal(3))))),
    "mean": ((3, 4), lambda x, rng: T.tsum(T.mul(T.tmean(x, axis=0), Tensor(rng.standard_normal(4))))),
    "gelu": ((3, 4), lambda x, rng: T.tsum(T.mul(T.gelu(x), Tensor(rng.standard_normal((3, 4)))))),
    "sigmoid": ((3, 4), lambda x, rng: T.tsum(T.mul(T.sigmoid(x), Tensor(rng.standard_normal((3, 4)))))),
    "layer_norm": ((4, 6), lambda x, rng: T.tsum(T.mul(T.layer_norm(x, *_ln_params(6)),
                                                       Tensor(rng.standard_normal((4, 6)))))),
    "masked_softmax": ((3, 5), lambda x, rng: T.tsum(T.mul(
        T.masked_softmax(x, np.array([[1, 1, 0, 1, 1], [1, 0, 1, 0, 1], [1, 1, 1, 1, 1]], dtype=bool)),
        Tensor(rng.standard_normal((3, 5)))))),
    "rope_rotate": ((5, 6), lambda x, rng: T.tsum(T.mul(
        T.rope_rotate(x, np.arange(5) * 3), Tensor(rng.standard_normal((5, 6)))))),
    "conv2d_3x3_input": ((2, 4, 5), lambda x, rng: T.tsum(T.mul(
        T.conv2d_3x3(x, Tensor(rng.standard_normal((3, 2, 3, 3))), Tensor(rng.standard_normal(3))),
        Tensor(rng.standard_normal((3, 4, 5)))))),
    "bce": ((7,), lambda x, rng: T.bce_with_logits(
        x, (rng.random(7) < 0.5).astype(float), rng.random(7) < 0.8)),
    "linear": ((3, 4), lambda x, rng: T.tsum(T.mul(
        T.linear(x, Tensor(rng.standard_normal((4, 2))), Tensor(rng.standard_normal(2))),
        Tensor(rng.standard_normal((3, 2)))))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_central_differences(name, rng):
    shape, build = OP_CASES[name]
    if name == "bce":  # this seed leaves the mask non-empty
        rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal(shape))
    # reseeding per call keeps the builder's random constants fixed, so f is
    # a deterministic function of t as finite_diff_check requires
    err = finite_diff_check(lambda t: build(t, np.random.default_rng(99)), x, eps=1e-4)
    assert err < 1e-4, f"{name}: rel err {err}"


def test_conv_kernel_and_bias_gradients(rng):
    x0 = rng.standard_normal((2, 4, 5))
    weight = Tensor(rng.standard_normal((3, 2, 3, 3)))
    mixer = Tensor(rng.standard_normal((3, 4, 5)))

    err_k = finite_diff_check(
        lambda k: T.tsum(T.mul(T.conv2d_3x3(Tensor(x0), k, Tensor(np.zeros(3))), mixer)),
        Tensor(rng.standard_normal((3, 2, 3, 3))), eps=1e-4)
    err_b = finite_diff_check(
        lambda b: T.tsum(T.mul(T.conv2d_3x3(Tensor(x0), weight, b), mixer)),
        Tensor(rng.standard_normal(3)), eps=1e-4)
    assert err_k < 1e-4 and err_b < 1e-4


def test_layer_norm_param_gradients(rng):
    x0 = Tensor(rng.standard_normal((3, 6)))
    mixer = Tensor(rng.standard_normal((3, 6)))
    beta = Tensor(np.zeros(6))
    err_g = finite_diff_check(
        lambda g: T.tsum(T.mul(T.layer_norm(x0, g, beta), mixer)),
        Tensor(rng.standard_normal(6)), eps=1e-4)
    gamma = Tensor(np.ones(6))
    err_b = finite_diff_check(
        lambda b: T.tsum(T.mul(T.layer_norm(x0, gamma, b), mixer)),
        Tensor(rng.standard_normal(6)), eps=1e-4)
    assert err_g < 1e-4 and err_b < 1e-4


# ---------------------------------------------------------------------------
# rope properties


def test_rope_position_zero_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 8)))
    out = T.rope_rotate(x, np.zeros(4, dtype=int))
    np.testing.assert_array_equal(out.data, x.data)


def test_rope_relative_shift(rng):
    q = rng.standard_normal(8)
    k = rng.standard_normal(8)

    def dot_at(pq, pk):
        rq = T.rope_rotate(Tensor(q[None, :]), np.array([pq])).data[0]
        rk = T.rope_rotate(Tensor(k[None, :]), np.array([pk])).data[0]
        return float(rq @ rk)

    assert abs(dot_at(5, 3) - dot_at(2, 0)) < 1e-10


def test_rope_preserves_norm(rng):
    x = rng.standard_normal((6, 10))
    out = T.rope_rotate(Tensor(x), np.arange(6) * 17)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1),
                               np.linalg.norm(x, axis=-1), atol=1e-10)


def test_rope_odd_channels_error():
    with pytest.raises(ShapeError, match="even"):
        T.rope_rotate(Tensor(np.zeros((2, 3))), np.zeros(2, dtype=int))


# ---------------------------------------------------------------------------
# strict shapes


def test_elementwise_ops_reject_mismatched_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))
    for op in (T.add, T.mul):
        with pytest.raises(ShapeError):
            op(a, b)


def test_concat_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=-1)


# ---------------------------------------------------------------------------
# dtype modes and no_grad


def test_float32_mode_produces_float32():
    T.set_default_dtype("float32")
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32
    out = T.gelu(t)
    assert out.data.dtype == np.float32


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with T.no_grad():
        out = T.tsum(T.mul(x, x))
    assert not out.requires_grad


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    params = {
        "a.w": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
        "b.bias": Tensor(rng.standard_normal(7), requires_grad=True),
        "c.scalarish": Tensor(np.array([math.pi]), requires_grad=True),
    }
    save_params(str(tmp_path), params)
    loaded = load_params(str(tmp_path))
    assert set(loaded) == set(params)
    for name, p in params.items():
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name], p.data)
        assert loaded[name].tobytes() == p.data.tobytes()
