import numpy as np
import pytest

from taskdet import autodiff as ad
from taskdet.autodiff import (Tape, ShapeError, NonFiniteError, backward,
                              finite_difference_check)


def make_tape64():
    return Tape(np.float64)


def test_matmul_identity():
    t = make_tape64()
    a = t.tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = t.tensor(np.eye(2))
    out = ad.matmul(a, eye)
    assert np.allclose(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetry():
    t = make_tape64()
    out = ad.softmax(t.tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3)


def test_sigmoid_zero():
    t = make_tape64()
    assert ad.sigmoid(t.tensor([0.0])).data[0] == pytest.approx(0.5)


def test_backward_sum_of_squares():
    t = make_tape64()
    x = t.tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ad.sum_(ad.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    t = make_tape64()
    x = t.tensor([1.0, 5.0, -2.0, 0.5], requires_grad=True)
    backward(ad.mean_(x))
    assert np.allclose(x.grad, [0.25] * 4)


def test_layer_norm_grad_matches_fd():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal(8)
    rep = finite_difference_check(
        lambda p: ad.sum_(ad.layer_norm(p["x"])), {"x": x0},
        step=1e-5, tol=1e-5)
    assert rep.passed, str(rep)


def test_backward_requires_scalar_root():
    t = make_tape64()
    x = t.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.mul(x, x))


def test_detached_tensor_gets_no_grad():
    t = make_tape64()
    x = t.tensor([1.0, 2.0], requires_grad=True)
    c = t.constant([3.0, 4.0])
    backward(ad.sum_(ad.mul(x, c)))
    assert np.allclose(x.grad, [3.0, 4.0])
    assert c.grad is None or np.allclose(c.grad, 0)


def test_repeated_backward_accumulates():
    t = make_tape64()
    x = t.tensor([2.0], requires_grad=True)
    root = ad.sum_(ad.mul(x, x))
    backward(root)
    backward(root)
    assert np.allclose(x.grad, [8.0])  # 2 * (2x)


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(5)

    t = make_tape64()
    x = t.tensor(x0, requires_grad=True)
    a = ad.sum_(ad.mul(x, x))
    b = ad.sum_(ad.exp(x))
    backward(ad.add(a, b))
    combined = x.grad.copy()

    t2 = make_tape64()
    x2 = t2.tensor(x0, requires_grad=True)
    backward(ad.sum_(ad.mul(x2, x2)))
    backward(ad.sum_(ad.exp(x2)))
    assert np.allclose(combined, x2.grad)


def test_reshape_transpose_roundtrip_bitexact():
    rng = np.random.default_rng(11)
    t = make_tape64()
    x = t.tensor(rng.standard_normal((3, 4, 5)))
    back = ad.reshape(ad.reshape(x, (12, 5)), (3, 4, 5))
    assert np.array_equal(back.data, x.data)
    tr = ad.transpose(ad.transpose(x, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(tr.data, x.data)


def test_shape_mismatch_errors_name_op():
    t = make_tape64()
    a = t.tensor(np.ones((2, 3)))
    b = t.tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([a, b], axis=0)


def test_debug_mode_flags_nonfinite():
    t = make_tape64()
    x = t.tensor([800.0])
    ad.CHECK_FINITE = True
    try:
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            ad.exp(x)
    finally:
        ad.CHECK_FINITE = False


def test_fd_check_constant_function():
    rep = finite_difference_check(
        lambda p: ad.sum_(ad.scale(p["x"], 0.0)), {"x": np.ones(3)})
    assert rep.passed and rep.max_rel_err == 0.0


def test_fd_check_reports_nonfinite_instead_of_raising():
    def f(p):
        return ad.sum_(ad.log(p["x"]))  # log of negative -> nan
    with np.errstate(invalid="ignore"):
        rep = finite_difference_check(f, {"x": np.array([-1.0])})
    assert not rep.passed


# ---------------------------------------------------------------------------
# per-op gradient property: analytic vs central differences, 100 random
# shapes/inputs each, 64-bit, rel err <= 1e-4. Inputs are sampled away from
# kinks (relu/abs/max/min/clamp) and away from domain edges (log/sqrt).
# ---------------------------------------------------------------------------

def _rand_shape(rng, max_rank=3, max_dim=4):
    rank = int(rng.integers(1, max_rank + 1))
    return tuple(int(rng.integers(1, max_dim + 1)) for _ in range(rank))


def _away_from(x, bad, margin=0.05):
    return x + np.where(np.abs(x - bad) < margin, margin * 2, 0.0)


def _probe(rng, out):
    # random linear functional to get a scalar root
    w = out.tape.constant(rng.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, w))


OP_CASES = {
    "add": lambda t, p: ad.add(p["a"], p["b"]),
    "sub": lambda t, p: ad.sub(p["a"], p["b"]),
    "mul": lambda t, p: ad.mul(p["a"], p["b"]),
    "div": lambda t, p: ad.div(p["a"], p["b"]),
    "maximum": lambda t, p: ad.maximum(p["a"], p["b"]),
    "minimum": lambda t, p: ad.minimum(p["a"], p["b"]),
    "log": lambda t, p: ad.log(p["a"]),
    "exp": lambda t, p: ad.exp(p["a"]),
    "sqrt": lambda t, p: ad.sqrt(p["a"]),
    "abs": lambda t, p: ad.abs_(p["a"]),
    "pow_const": lambda t, p: ad.pow_const(p["a"], 2.0),
    "relu": lambda t, p: ad.relu(p["a"]),
    "tanh": lambda t, p: ad.tanh(p["a"]),
    "sigmoid": lambda t, p: ad.sigmoid(p["a"]),
    "softplus": lambda t, p: ad.softplus(p["a"]),
    "clamp": lambda t, p: ad.clamp(p["a"], -0.5, 0.5),
    "scale": lambda t, p: ad.scale(p["a"], -1.7),
    "softmax": lambda t, p: ad.softmax(p["a"], axis=-1),
    "log_softmax": lambda t, p: ad.log_softmax(p["a"], axis=-1),
    "layer_norm": lambda t, p: ad.layer_norm(p["a"]),
    "sum": lambda t, p: ad.sum_(p["a"], axis=0, keepdims=False),
    "mean": lambda t, p: ad.mean_(p["a"], axis=-1, keepdims=True),
    "reshape": lambda t, p: ad.reshape(p["a"], (p["a"].data.size,)),
    "transpose": lambda t, p: ad.transpose(p["a"]),
    "broadcast": lambda t, p: ad.broadcast_to(p["a"], (3,) + p["a"].shape),
    "slice": lambda t, p: ad.slice_(p["a"], (slice(0, 1),)),
    "concat": lambda t, p: ad.concat([p["a"], p["b"]], axis=0),
}

POSITIVE_OPS = {"log", "sqrt"}
KINKY_OPS = {"relu", "abs", "maximum", "minimum"}
SAME_SHAPE_OPS = {"add", "sub", "mul", "div", "maximum", "minimum", "concat"}


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % (2 ** 32))
    build = OP_CASES[op_name]
    for trial in range(100):
        shape = _rand_shape(rng)
        if op_name == "layer_norm" and shape[-1] == 1:
            shape = shape[:-1] + (3,)
        a = rng.standard_normal(shape)
        if op_name in POSITIVE_OPS:
            a = np.abs(a) + 0.2
        if op_name in KINKY_OPS:
            a = _away_from(a, 0.0)
        if op_name == "clamp":
            a = _away_from(_away_from(a, -0.5), 0.5)
        params = {"a": a}
        if op_name in SAME_SHAPE_OPS:
            b = rng.standard_normal(shape)
            if op_name == "div":
                b = np.sign(b) * (np.abs(b) + 0.3)
            if op_name in KINKY_OPS:
                b = _away_from(b, 0.0)
                # keep the two operands separated so the max/min branch is stable
                b = b + np.where(np.abs(a - b) < 0.05, 0.2, 0.0)
            params["b"] = b

        def f(p, _build=build, _seed=trial + 1):
            out = _build(None, p)
            w = out.tape.constant(
                np.random.default_rng(_seed).standard_normal(out.shape))
            return ad.sum_(ad.mul(out, w))

        rep = finite_difference_check(f, params, step=1e-6, tol=1e-4)
        assert rep.passed, f"{op_name} trial {trial}: {rep}"


def test_matmul_gradients_2d_and_batched():
    rng = np.random.default_rng(20)
    for trial in range(50):
        n, k, m = (int(rng.integers(1, 5)) for _ in range(3))
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        w = rng.standard_normal((n, m))
        rep = finite_difference_check(
            lambda p: ad.sum_(ad.mul(ad.matmul(p["a"], p["b"]),
                                     p["a"].tape.constant(w))),
            {"a": a, "b": b}, step=1e-6, tol=1e-4)
        assert rep.passed, f"2d trial {trial}: {rep}"
    for trial in range(50):
        h, n, k, m = (int(rng.integers(1, 4)) for _ in range(4))
        a = rng.standard_normal((h, n, k))
        b = rng.standard_normal((h, k, m))
        w = rng.standard_normal((h, n, m))
        rep = finite_difference_check(
            lambda p: ad.sum_(ad.mul(ad.matmul(p["a"], p["b"]),
                                     p["a"].tape.constant(w))),
            {"a": a, "b": b}, step=1e-6, tol=1e-4)
        assert rep.passed, f"3d trial {trial}: {rep}"


def test_take_rows_gradient_accumulates_repeats():
    t = make_tape64()
    table = t.tensor(np.arange(6, dtype=np.float64).reshape(3, 2),
                     requires_grad=True)
    out = ad.take_rows(table, [0, 0, 2])
    backward(ad.sum_(out))
    assert np.allclose(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_take_rows_bounds_check():
    t = make_tape64()
    table = t.tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        ad.take_rows(table, [3])
