import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import jointrep.diffgraph as dg
from jointrep.diffgraph.check import check_param_gradients
from jointrep.errors import NumericError, ShapeError, UsageError


def test_eval_forward_examples():
    x, y = dg.leaf(2.0), dg.leaf(3.0)
    assert dg.eval_forward(x + y) == 5.0
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(dg.eval_forward(dg.matmul(np.eye(3), dg.leaf(v))), v)
    # closed form: logsumexp of n equal zeros is log n
    assert abs(dg.eval_forward(dg.logsumexp(dg.leaf(np.zeros(4)))) - math.log(4)) < 1e-12
    assert abs(math.log(4) - 1.386294) < 1e-6


def test_backward_examples():
    x = dg.leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0

    v = dg.leaf(np.array([0.3, -1.2, 2.0]))
    dg.softmax(v).sum().backward()
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-15)

    x = dg.leaf(-1.0)
    dg.elu(x).backward()
    assert abs(x.grad - math.exp(-1.0)) < 1e-15
    assert abs(x.grad - 0.367879) < 1e-6


def test_fan_out_accumulates_exactly():
    x = dg.leaf(1.7)
    (x + x).backward()
    assert x.grad == 2.0


def test_grad_shape_matches_value_after_broadcast():
    w = dg.leaf(np.ones((3, 4)))
    b = dg.leaf(np.zeros(4))
    x = dg.constant(np.arange(6.0).reshape(2, 3))
    out = (x @ w + b).sum()
    out.backward()
    assert w.grad.shape == w.value.shape
    assert b.grad.shape == b.value.shape
    np.testing.assert_array_equal(b.grad, [2.0] * 4)


def test_backward_twice_is_usage_error():
    x = dg.leaf(2.0)
    y = x * x
    y.backward()
    with pytest.raises(UsageError):
        y.backward()


def test_unbound_leaf_is_usage_error():
    p = dg.placeholder("p")
    with pytest.raises(UsageError):
        dg.eval_forward(p)
    with pytest.raises(UsageError):
        dg.add(p, 1.0)
    p.bind(4.0)
    assert dg.eval_forward(p * 2.0) == 8.0


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        dg.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        dg.add(np.ones(3), np.ones(4))


def test_constant_inputs_build_no_graph():
    out = dg.tanh(dg.constant(np.ones(3)) * 2.0)
    assert not out.requires_grad and out.parents == ()


def test_frozen_store_still_passes_gradient_through():
    store = dg.ParamStore(0)
    lin = dg.Linear(store, "lin", 3, 2)
    x = dg.leaf(np.ones((1, 3)))
    with store.frozen():
        out = lin(x).sum()
    out.backward()
    assert lin.w.grad is None
    np.testing.assert_allclose(x.grad, lin.w.value.sum(axis=1, keepdims=True).T)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def test_check_gradients_examples():
    assert dg.check_gradients(lambda p: dg.square(p["x"]).sum(), {"x": np.array(1.0)}) < 1e-6
    a = np.array([1.5, -2.0, 0.25])
    err = dg.check_gradients(lambda p: (p["x"] * a).sum(), {"x": np.array([0.1, 0.2, 0.3])})
    assert err < 1e-9


@pytest.mark.filterwarnings("ignore:invalid value")
def test_check_gradients_rejects_nonfinite():
    with pytest.raises(NumericError):
        dg.check_gradients(lambda p: dg.log(p["x"]).sum(), {"x": np.array([-1.0])})


def _unary_cases():
    return {
        "exp": dg.exp,
        "tanh": dg.tanh,
        "sigmoid": dg.sigmoid,
        "softplus": dg.softplus,
        "elu": dg.elu,
        "square": dg.square,
        "neg": dg.neg,
        "log": lambda x: dg.log(dg.add(dg.square(x), 0.5)),
        "sqrt": lambda x: dg.sqrt(dg.add(dg.square(x), 0.5)),
        "power": lambda x: dg.power(dg.add(dg.square(x), 0.5), 1.5),
        "logsumexp": lambda x: dg.logsumexp(x, axis=-1),
        "softmax": lambda x: dg.softmax(x, axis=0),
        "transpose": dg.transpose,
        "mean": lambda x: dg.mean(x, axis=0),
        "getitem": lambda x: x[1:, ::2],
        "getitem_fancy": lambda x: x[np.array([0, 0, 2])],
        "reshape": lambda x: dg.reshape(x, (-1,)),
        "maximum": lambda x: dg.maximum(x, 0.1),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_primitive_gradients(name):
    fn = _unary_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    weights = rng.normal(size=(3, 4))
    for _ in range(100):
        x = rng.normal(size=(3, 4))
        if name in ("elu", "maximum"):
            x = np.where(np.abs(x - (0.1 if name == "maximum" else 0.0)) < 1e-3, 0.5, x)

        def f(p):
            out = fn(p["x"])
            return dg.sum_(dg.mul(out, np.resize(weights, out.shape)))

        assert dg.check_gradients(f, {"x": x}) < 1e-4


BINARY = {
    "add": dg.add,
    "sub": dg.sub,
    "mul": dg.mul,
    "div": lambda a, b: dg.div(a, dg.add(dg.square(b), 0.5)),
    "minimum": dg.minimum,
    "matmul": lambda a, b: dg.matmul(a, dg.transpose(b)),
    "concat": lambda a, b: dg.concat([a, b], axis=1),
    "stack": lambda a, b: dg.reshape(dg.stack([a, b], axis=0), (6, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    fn = BINARY[name]
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        w = rng.normal(size=fn(dg.constant(a), dg.constant(b)).shape)
        err = dg.check_gradients(lambda p: dg.sum_(dg.mul(fn(p["a"], p["b"]), w)), {"a": a, "b": b})
        assert err < 1e-4


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, b = rng.normal(size=(5, 3)), rng.normal(size=3)
        w = rng.normal(size=(5, 3))
        assert dg.check_gradients(lambda p: dg.sum_(dg.mul(dg.tanh(p["x"] + p["b"]), w)), {"x": x, "b": b}) < 1e-4


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    for _ in range(100):
        pt = {"x": rng.normal(size=(4, 6)), "g": rng.normal(size=6), "b": rng.normal(size=6)}
        w = rng.normal(size=(4, 6))
        err = dg.check_gradients(lambda p: dg.sum_(dg.mul(dg.layer_norm(p["x"], p["g"], p["b"]), w)), pt)
        assert err < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(5 + stride)
    for _ in range(100):
        pt = {"x": rng.normal(size=(2, 7, 7, 2)), "w": rng.normal(size=(3, 3, 2, 3)), "b": rng.normal(size=3)}
        out_shape = dg.conv2d(pt["x"], pt["w"], pt["b"], stride).shape
        w = rng.normal(size=out_shape)
        err = dg.check_gradients(lambda p: dg.sum_(dg.mul(dg.conv2d(p["x"], p["w"], p["b"], stride), w)), pt)
        assert err < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_transpose_gradients(stride):
    rng = np.random.default_rng(9 + stride)
    for _ in range(100):
        pt = {"x": rng.normal(size=(2, 3, 3, 2)), "w": rng.normal(size=(2, 3, 3, 3)), "b": rng.normal(size=3)}
        out_shape = dg.conv_transpose2d(pt["x"], pt["w"], pt["b"], stride).shape
        w = rng.normal(size=out_shape)
        err = dg.check_gradients(
            lambda p: dg.sum_(dg.mul(dg.conv_transpose2d(p["x"], p["w"], p["b"], stride), w)), pt
        )
        assert err < 1e-4


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 6, 5, 2)), rng.normal(size=(3, 2, 2, 4)), rng.normal(size=4)
    out = dg.conv2d(x, w, b, 2).value
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = x[0, 2 * i:2 * i + 3, 2 * j:2 * j + 2, :]
            np.testing.assert_allclose(out[0, i, j], np.einsum("hwc,hwco->o", patch, w) + b, rtol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 10, 10, 3))
    k = rng.normal(size=(4, 4, 3, 5))
    y = rng.normal(size=dg.conv2d(x, k, np.zeros(5), 2).shape)
    lhs = np.sum(dg.conv2d(x, k, np.zeros(5), 2).value * y)
    kt = np.transpose(k, (3, 0, 1, 2))  # (cout, kh, kw, cin): maps conv outputs back to inputs
    rhs = np.sum(x * dg.conv_transpose2d(y, kt, np.zeros(3), 2).value)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_logsumexp_shift_invariance(values, c):
    v = np.array(values)
    a = dg.logsumexp(dg.constant(v + c)).value
    b = dg.logsumexp(dg.constant(v)).value + c
    assert abs(a - b) <= 1e-12 * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# GRU and MLP
# ---------------------------------------------------------------------------

def _gru(d_in, d_h, seed=0):
    store = dg.ParamStore(seed)
    return store, dg.GruParams(store, "gru", d_in, d_h)


def test_gru_zero_params_halves_hidden():
    store, p = _gru(1, 1)
    store.fill_(0.0)
    out = dg.gru_cell(np.zeros((1, 1)), np.ones((1, 1)), p)
    # u = sigmoid(0) = 0.5, c = tanh(0) = 0  ->  h' = 0.5 * h
    assert out.value[0, 0] == 0.5
    assert dg.gru_cell(np.zeros((1, 1)), np.zeros((1, 1)), p).value[0, 0] == 0.0


def test_gru_matches_reference_equations():
    store, p = _gru(3, 4, seed=2)
    rng = np.random.default_rng(2)
    for n in store:
        store[n].value = rng.normal(size=store[n].value.shape)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    xh = np.concatenate([x, h], axis=1)
    u = sig(xh @ p.w_u.value + p.b_u.value)
    r = sig(xh @ p.w_r.value + p.b_r.value)
    c = np.tanh(np.concatenate([x, r * h], axis=1) @ p.w_c.value + p.b_c.value)
    np.testing.assert_allclose(dg.gru_cell(x, h, p).value, (1 - u) * h + u * c, rtol=1e-12)


def test_gru_gradient_wrt_input():
    store, p = _gru(3, 4, seed=3)
    rng = np.random.default_rng(3)
    h = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))
    for _ in range(20):
        x = rng.normal(size=(2, 3))
        with store.frozen():
            err = dg.check_gradients(lambda q: dg.sum_(dg.mul(dg.gru_cell(q["x"], h, p), w)), {"x": x})
        assert err < 1e-4


def test_gru_width_mismatch():
    _, p = _gru(3, 4)
    with pytest.raises(ShapeError):
        dg.gru_cell(np.zeros((1, 2)), np.zeros((1, 4)), p)


def test_mlp_examples():
    store = dg.ParamStore(0)
    mlp = dg.Mlp(store, "m", 3, dg.MlpSpec.make([5, 5], "elu", {"out": 2}))
    store.fill_(0.0)
    np.testing.assert_array_equal(mlp(np.ones((4, 3)))["out"].value, 0.0)

    store = dg.ParamStore(0)
    ident = dg.Mlp(store, "i", 3, dg.MlpSpec.make([3], "identity"))
    store["i.l0.w"].value = np.eye(3)
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(ident(x).value, x)

    with pytest.raises(ShapeError):
        ident(np.ones((1, 4)))


def test_mlp_gradient_check():
    rng = np.random.default_rng(11)
    spec = dg.MlpSpec.make([6, 6], "elu", {"out": 2})
    for seed in range(20):
        store = dg.ParamStore(seed)
        mlp = dg.Mlp(store, "m", 3, spec)
        x = rng.normal(size=(4, 3))
        assert check_param_gradients(lambda: dg.sum_(dg.square(mlp(x)["out"])), [store]) < 1e-4


def test_mlp_spec_validation():
    from jointrep.errors import ConfigError

    with pytest.raises(ConfigError):
        dg.MlpSpec.make([])
    with pytest.raises(ConfigError):
        dg.MlpSpec.make([3, 0])


def test_serialization_roundtrip(tmp_path):
    from jointrep.errors import FormatError

    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    dg.save_arrays(tmp_path / "ck", arrays, meta={"k": 1})
    back, meta = dg.load_arrays(tmp_path / "ck", expected={"a": (2, 3), "b": (1,)})
    np.testing.assert_array_equal(back["a"], arrays["a"])
    assert meta == {"k": 1}
    with pytest.raises(FormatError, match="'a'"):
        dg.load_arrays(tmp_path / "ck", expected={"a": (3, 2), "b": (1,)})
