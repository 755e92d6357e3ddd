import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omcl import autodiff as ad
from omcl.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# --- forward examples -------------------------------------------------------


def test_relu_values():
    assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)


def test_matmul_identity():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)


def test_softmax_with_extra_logit_appends_channel():
    out = ad.softmax_with_extra_logit(Tensor([[0.9, 0.1]]), 0.1).data
    e = np.exp([0.9, 0.1, 0.1])
    np.testing.assert_allclose(out[0], e / e.sum(), rtol=1e-15)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 4, 2))
    for n in range(2):
        for i in range(5):
            for j in range(4):
                patch = padded[n, i:i + 3, j:j + 3, :]
                ref[n, i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_takes_block_max():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out = ad.maxpool2d(Tensor(x)).data[0, :, :, 0]
    assert out.tolist() == [[5.0, 7.0], [13.0, 15.0]]


@pytest.mark.parametrize("op, shapes", [
    (ad.add, ((2, 3), (4, 3))),
    (ad.matmul, ((2, 3), (2, 3))),
    (ad.mul, ((2, 3), (3, 2))),
])
def test_shape_mismatch_names_op(op, shapes):
    with pytest.raises(ad.ShapeError) as info:
        op(Tensor(np.zeros(shapes[0])), Tensor(np.zeros(shapes[1])))
    assert info.value.op in str(info.value)
    assert str(shapes[0]) in str(info.value)


# --- backward ---------------------------------------------------------------


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum(x * x))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_nonscalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_unreachable_param_gets_zero_grad():
    x, y = leaf([1.0]), leaf([5.0])
    ad.zero_grad([x, y])
    ad.backward(ad.sum(x * 3.0))
    assert y.grad.tolist() == [0.0]


def test_l2_normalize_chain_gradcheck():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((4, 2)))
    report = ad.gradcheck(lambda a: ad.sum(ad.exp(ad.l2_normalize(a) @ w)), [x], step=1e-3)
    assert report.max_rel_error < 1e-4


def test_strict_normalize_rejects_zero_row():
    with pytest.raises(ad.DegenerateInputError):
        ad.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]), strict=True)


def test_training_normalize_clamps_zero_row():
    out = ad.l2_normalize(Tensor([[0.0, 0.0]])).data
    assert np.isfinite(out).all()


# --- gradcheck harness ------------------------------------------------------


def test_gradcheck_of_sum_is_exact():
    # integer point and a power-of-two step keep the differences exact
    report = ad.gradcheck(lambda a: ad.sum(a), [leaf([1.0, -2.0, 3.0, 0.0])], step=2.0 ** -10)
    assert report.max_rel_error == 0.0
    # at an arbitrary point only rounding remains
    report = ad.gradcheck(lambda a: ad.sum(a), [leaf(np.random.default_rng(2).standard_normal(5))])
    assert report.max_rel_error < 1e-10


def test_exp_finite_difference_at_zero():
    x = leaf([0.0])
    report = ad.gradcheck(lambda a: ad.sum(ad.exp(a)), [x], step=1e-3)
    assert report.numeric[0][0] == pytest.approx(1.00000017, abs=1e-8)
    assert report.analytic[0][0] == 1.0
    assert report.max_rel_error < 1e-6


def test_gradcheck_reports_nan_coordinate():
    x = leaf([1.0, 1e-4])
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match=r"coordinate \(1,\)"):
        ad.gradcheck(lambda a: ad.sum(ad.log(a)), [x], step=1e-3)


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    img = rng.standard_normal((1, 4, 4, 2))
    kern = rng.standard_normal((3, 3, 2, 2))
    # relu and maxpool are checked away from their kinks
    away = a + np.sign(a) * 0.1
    return {
        "add": (lambda x, y: ad.sum(ad.add(x, y) * ad.add(x, y)), [a, b]),
        "mul": (lambda x, y: ad.sum(x * y * x), [a, b]),
        "matmul": (lambda x, y: ad.sum(ad.exp((x @ y) * 0.3)), [a, w]),
        "exp": (lambda x: ad.sum(ad.exp(x)), [a]),
        "log": (lambda x: ad.sum(ad.log(x)), [pos]),
        "relu": (lambda x: ad.sum(ad.relu(x) * ad.relu(x)), [away]),
        "mean": (lambda x: ad.sum(ad.mean(ad.exp(x), axis=0) * Tensor(np.arange(4.0))), [a]),
        "l2_normalize": (lambda x: ad.sum(ad.l2_normalize(x) * Tensor(b)), [a]),
        "concat_rows": (lambda x, y: ad.sum(ad.exp(ad.concat_rows([x, y]) * 0.5)), [a, b]),
        "logsumexp": (lambda x: ad.sum(ad.logsumexp(x * 3.0)), [a]),
        "softmax_extra": (lambda x: ad.sum(ad.log(ad.softmax_with_extra_logit(x, 0.2)) * Tensor(
            np.linspace(0, 1, 15).reshape(3, 5))), [a]),
        "conv2d": (lambda x, k: ad.sum(ad.conv2d(x, k) * ad.conv2d(x, k)), [img, kern]),
        "maxpool": (lambda x: ad.sum(ad.maxpool2d(x) * ad.maxpool2d(x)),
                    [np.arange(32, dtype=float).reshape(1, 4, 4, 2) / 7 + rng.uniform(0, .01, (1, 4, 4, 2))]),
    }


@pytest.mark.parametrize("name", list(_op_cases(np.random.default_rng(0))))
def test_every_op_passes_gradcheck_over_seeds(name):
    for seed in range(20):
        f, values = _op_cases(np.random.default_rng(seed))[name]
        report = ad.gradcheck(f, [leaf(v) for v in values], step=1e-3, tolerance=1e-4)
        assert report.passed, (name, seed, report.max_rel_error)


# --- properties -------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(x):
    norms = np.linalg.norm(x, axis=1)
    rows = x[norms > 1e-6]
    if len(rows):
        out = ad.l2_normalize(Tensor(rows)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4))
    w = Tensor(rng.standard_normal((4, 2)))

    def f1(x):
        return ad.sum(ad.exp(x @ w * 0.5))

    def f2(x):
        return ad.sum(ad.l2_normalize(x) * ad.l2_normalize(x) * 3.0) + ad.sum(x)

    grads = []
    for f in (f1, f2, lambda x: f1(x) + f2(x)):
        x = leaf(x0.copy())
        ad.backward(f(x))
        grads.append(x.grad)
    np.testing.assert_allclose(grads[0] + grads[1], grads[2], rtol=1e-12, atol=1e-12)


def test_graph_evaluation_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = leaf(rng.standard_normal((1, 6, 6, 1)))
        k = leaf(rng.standard_normal((3, 3, 1, 2)))
        loss = ad.sum(ad.maxpool2d(ad.relu(ad.conv2d(x, k))))
        ad.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


# --- Adam -------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = np.array([0.5])
    state = ad.AdamState.zeros_like(p)
    ad.adam_step(p, np.array([1.0]), state, lr=1e-3)
    assert p[0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1


def test_adam_zero_grad_leaves_params():
    p = np.array([0.5, -2.0])
    state = ad.AdamState.zeros_like(p)
    ad.adam_step(p, np.zeros(2), state, lr=1e-3)
    assert p.tolist() == [0.5, -2.0]
    assert state.step == 1


def test_adam_decreases_quadratic():
    x = leaf([3.0, -1.5])
    opt = ad.Adam([([x], 1.0)], lr=0.1)
    values = []
    for _ in range(3):
        opt.zero_grad()
        loss = ad.sum(x * x)
        values.append(float(loss.data))
        ad.backward(loss)
        opt.step()
    assert values[0] > values[1] > values[2]


def test_adam_group_scale():
    a, b = leaf([1.0]), leaf([1.0])
    opt = ad.Adam([([a], 1.0), ([b], 0.1)], lr=1e-2)
    opt.zero_grad()
    ad.backward(ad.sum(a) + ad.sum(b))
    opt.step()
    assert 1.0 - a.data[0] == pytest.approx(1e-2, rel=1e-6)
    assert 1.0 - b.data[0] == pytest.approx(1e-3, rel=1e-6)


def test_adam_step_counter_strictly_increases():
    p = np.zeros(3)
    state = ad.AdamState.zeros_like(p)
    for i in range(1, 6):
        ad.adam_step(p, np.ones(3), state, lr=1e-3)
        assert state.step == i
