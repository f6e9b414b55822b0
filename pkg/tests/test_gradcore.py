import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmt import gradcore as gc


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def check_op(build, *arrays, tol=1e-7):
    """build(tape, *nodes) -> scalar node; compare every input gradient to finite differences."""
    def value():
        t = gc.Tape()
        nodes = [t.param(f"x{i}", a) for i, a in enumerate(arrays)]
        return float(build(t, *nodes).value)

    t = gc.Tape()
    nodes = [t.param(f"x{i}", a) for i, a in enumerate(arrays)]
    grads = t.backward(build(t, *nodes))
    for i, a in enumerate(arrays):
        num = numeric_grad(value, a)
        assert rel_err(grads.get(f"x{i}", np.zeros_like(a)), num) < tol


rng = np.random.default_rng(0)


def test_sigmoid_examples():
    assert gc.sigmoid_array(np.array(0.0)) == 0.5
    x = np.linspace(-30, 30, 601)
    assert np.max(np.abs(gc.sigmoid_array(-x) - (1 - gc.sigmoid_array(x)))) < 1e-12
    # large magnitudes stay finite
    assert np.all(np.isfinite(gc.sigmoid_array(np.array([-1e4, 1e4]))))


def test_sigmoid_derivative_at_zero():
    t = gc.Tape()
    x = t.param("x", np.array([0.0]))
    g = t.backward(gc.total(gc.sigmoid(x)))
    assert g["x"][0] == pytest.approx(0.25, abs=1e-15)


def test_linear_gradient():
    t = gc.Tape()
    w = t.param("w", np.array([[2.0]]))
    x = t.constant(np.array([[3.0]]))
    g = t.backward(gc.total(gc.matmul(x, w)))
    assert g["w"][0, 0] == 3.0


def test_matmul_identity():
    t = gc.Tape()
    v = rng.standard_normal((4, 3))
    out = gc.matmul(t.constant(np.eye(4)), t.constant(v))
    np.testing.assert_array_equal(out.value, v)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda t, a, b: gc.total(gc.square(gc.add(a, b))), [(3, 2), (3, 2)]),
    ("bias", lambda t, a, b: gc.total(gc.square(gc.add(a, b))), [(3, 2), (2,)]),
    ("sub", lambda t, a, b: gc.total(gc.square(gc.sub(a, b))), [(4,), (4,)]),
    ("mul", lambda t, a, b: gc.total(gc.mul(a, b)), [(3, 2), (3, 2)]),
    ("div", lambda t, a, b: gc.total(gc.div(a, gc.add(gc.square(b), 1.0))), [(5,), (5,)]),
    ("matmul", lambda t, a, b: gc.total(gc.square(gc.matmul(a, b))), [(3, 4), (4, 2)]),
    ("sigmoid", lambda t, a: gc.total(gc.sigmoid(a)), [(6,)]),
    ("softplus", lambda t, a: gc.total(gc.softplus(a)), [(6,)]),
    ("log", lambda t, a: gc.total(gc.log(gc.add(gc.square(a), 0.5))), [(6,)]),
    ("rsub", lambda t, a: gc.total(gc.square(gc.rsub(1.0, a))), [(6,)]),
    ("scale", lambda t, a: gc.total(gc.scale(gc.square(a), -2.5)), [(2, 3)]),
    ("concat", lambda t, a, b: gc.total(gc.square(gc.concat([a, b]))), [(2, 3), (2, 1)]),
    ("reshape", lambda t, a: gc.total(gc.mul(gc.reshape(a, (6,)), np.arange(6.0))), [(2, 3)]),
])
def test_op_gradients(name, build, shapes):
    arrays = [rng.standard_normal(s) for s in shapes]
    check_op(build, *arrays)


def test_relu_and_abs_gradients_away_from_kinks():
    a = np.array([-1.5, -0.3, 0.4, 2.0])
    check_op(lambda t, x: gc.total(gc.mul(gc.relu(x), np.arange(1.0, 5.0))), a)
    check_op(lambda t, x: gc.total(gc.mul(gc.absolute(x), np.arange(1.0, 5.0))), a.copy())


def test_clip_gradient_is_zero_outside():
    t = gc.Tape()
    x = t.param("x", np.array([-1.0, 0.5, 2.0]))
    g = t.backward(gc.total(gc.clip(x, 0.0, 1.0)))
    np.testing.assert_array_equal(g["x"], [0.0, 1.0, 0.0])


def test_detach_blocks_gradient():
    t = gc.Tape()
    x = t.param("x", np.array([1.0, 2.0]))
    y = gc.add(gc.mul(gc.detach(x), x), 0.0)
    g = t.backward(gc.total(y))
    np.testing.assert_array_equal(g["x"], [1.0, 2.0])


def test_take_rows_accumulates_duplicates():
    table = rng.standard_normal((5, 3))
    ids = np.array([1, 3, 1, 1])
    check_op(lambda t, w: gc.total(gc.square(gc.take_rows(w, ids))), table)
    t = gc.Tape()
    w = t.param("w", table)
    g = t.backward(gc.total(gc.take_rows(w, ids)))
    np.testing.assert_array_equal(g["w"][:, 0], [0, 3, 0, 1, 0])
    with pytest.raises(IndexError):
        gc.take_rows(w, np.array([5]))


def test_weighted_mean_rows_matches_loop_and_gradient():
    table = rng.standard_normal((6, 2))
    ids = np.array([0, 2, 5, 1])
    weights = np.array([0.5, 1.5, 2.0, -1.0])
    offsets = np.array([0, 2, 3, 4])
    t = gc.Tape()
    out = gc.weighted_mean_rows(t.constant(table), ids, weights, offsets).value
    for s in range(3):
        sl = slice(offsets[s], offsets[s + 1])
        expect = sum(w * table[i] for i, w in zip(ids[sl], weights[sl])) / (offsets[s + 1] - offsets[s])
        np.testing.assert_allclose(out[s], expect, rtol=0, atol=1e-15)
    check_op(lambda t, w: gc.total(gc.square(gc.weighted_mean_rows(w, ids, weights, offsets))), table)
    with pytest.raises(ValueError):
        gc.weighted_mean_rows(t.constant(table), ids, weights, np.array([0, 2, 2, 4]))


def test_mlp_gradient_against_finite_differences():
    x = rng.standard_normal((7, 4))
    params = {"W0": rng.standard_normal((4, 8)), "b0": rng.standard_normal(8),
              "W1": rng.standard_normal((8, 1)), "b1": rng.standard_normal(1)}
    y = rng.integers(0, 2, 7).astype(float)

    def build(t):
        p = {k: t.param(k, v) for k, v in params.items()}
        h = gc.relu(gc.add(gc.matmul(t.constant(x), p["W0"]), p["b0"]))
        out = gc.sigmoid(gc.reshape(gc.add(gc.matmul(h, p["W1"]), p["b1"]), (7,)))
        ll = gc.add(gc.mul(gc.log(out), y), gc.mul(gc.log(gc.rsub(1.0, out)), 1.0 - y))
        return gc.scale(gc.total(ll), -1.0 / 7)

    t = gc.Tape()
    grads = t.backward(build(t))
    for name, arr in params.items():
        num = numeric_grad(lambda: float(build(gc.Tape()).value), arr, h=1e-4)
        assert rel_err(grads[name], num) < 1e-5, name


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 8), min_size=3, max_size=3), st.integers(0, 10_000))
def test_random_small_graph_gradients(depth, widths, seed):
    r = np.random.default_rng(seed)
    dims = [widths[0]] + widths[1:depth] + [1]
    if len(dims) < depth + 1:
        dims = dims + [1] * (depth + 1 - len(dims))
    params = {}
    for i in range(depth):
        params[f"W{i}"] = r.standard_normal((dims[i], dims[i + 1]))
        params[f"b{i}"] = r.standard_normal(dims[i + 1])
    x = r.standard_normal((5, dims[0]))

    def build(t):
        h = t.constant(x)
        for i in range(depth):
            h = gc.add(gc.matmul(h, t.param(f"W{i}", params[f"W{i}"])), t.param(f"b{i}", params[f"b{i}"]))
            h = gc.sigmoid(h) if i < depth - 1 else h
        return gc.total(gc.square(h))

    t = gc.Tape()
    grads = t.backward(build(t))
    for name, arr in params.items():
        num = numeric_grad(lambda: float(build(gc.Tape()).value), arr, h=1e-5)
        assert rel_err(grads[name], num) < 1e-5


def test_backward_errors():
    t = gc.Tape()
    x = t.param("x", np.ones(3))
    with pytest.raises(gc.ShapeError):
        t.backward(gc.square(x))
    other = gc.Tape()
    with pytest.raises(ValueError):
        other.backward(gc.total(x))


def test_shape_mismatch_raises():
    t = gc.Tape()
    with pytest.raises(gc.ShapeError):
        gc.add(t.constant(np.ones((2, 3))), t.constant(np.ones(4)))
    with pytest.raises(gc.ShapeError):
        gc.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_total_is_sequential_left_to_right():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    t = gc.Tape()
    assert float(gc.total(t.constant(x)).value) == ((1e16 + 1.0) - 1e16) + 1.0


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_minus_lr_sign():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    opt = gc.Adam(lr=0.001)
    opt.step(p, {"w": np.array([1.0, -3.0, 1e-3])})
    # bias-corrected first moments equal g and second moments g^2
    np.testing.assert_allclose(p["w"] - 1.0, [-0.001, 0.001, -0.001], rtol=1e-4)


def test_adam_zero_gradient_and_zero_lr_leave_params():
    p = {"w": np.array([0.3, -0.2])}
    before = p["w"].copy()
    gc.Adam().step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], before)
    gc.Adam(lr=0.0).step(p, {"w": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(p["w"], before)


def test_adam_matches_hand_recurrence():
    r = np.random.default_rng(5)
    w = r.standard_normal(4)
    p = {"w": w.copy()}
    opt = gc.Adam(lr=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    for k in range(1, 6):
        g = r.standard_normal(4)
        opt.step(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-13, atol=1e-15)
    assert opt.t == 5


def test_adam_rejects_nan_and_shape():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="non-finite"):
        gc.Adam().step(p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(gc.ShapeError):
        gc.Adam().step(p, {"w": np.zeros(3)})


def test_adam_determinism_and_convergence():
    def run():
        p = {"w": np.array([3.0, -2.0])}
        opt = gc.Adam(lr=0.05)
        for _ in range(400):
            t = gc.Tape()
            w = t.param("w", p["w"])
            opt.step(p, t.backward(gc.total(gc.square(gc.sub(w, np.array([1.0, 0.5]))))))
        return p["w"]

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, [1.0, 0.5], atol=1e-2)


def test_squared_norm():
    assert gc.squared_norm({"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])}) == 14.0
    assert gc.squared_norm({"a": np.zeros(3)}) == 0.0
