import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shan import numkit as nk
from shan.errors import ContractError, DimensionError, EvaluationError, ParameterError

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(a):
    return nk.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grads_of(fn, *arrays):
    leaves = [leaf(a) for a in arrays]
    with nk.Tape() as tape:
        loss = fn(*leaves)
    g = nk.backward(tape, loss, leaves)
    return [g[x] for x in leaves]


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity_left():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nk.matmul(np.eye(2), X).data, X)


def test_matmul_scalar_case():
    assert nk.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_hand_expanded():
    out = nk.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        nk.matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetric_rows():
    out = nk.softmax_rows([[0.0, 0.0], [1.0, 1.0]], temperature=15).data
    np.testing.assert_array_equal(out[0], [0.5, 0.5])
    np.testing.assert_array_equal(out[1], [0.5, 0.5])
    np.testing.assert_allclose(nk.softmax_rows([[1.0, 1.0, 1.0]], 3.7).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_matches_direct_formula():
    e = [math.exp(15 * 0.2), math.exp(15 * 0.1)]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(nk.softmax_rows([[0.2, 0.1]], 15).data[0], expected, rtol=1e-14)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(temperature):
    with pytest.raises(ParameterError):
        nk.softmax_rows([[1.0, 2.0]], temperature)


def test_softmax_does_not_overflow():
    out = nk.softmax_rows([[1000.0, 999.0, -1000.0]], 15).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)


def test_softmax_mask_zeroes_invalid_entries():
    out = nk.softmax(np.array([[3.0, 1.0, 2.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([3.0, 2.0]) / np.exp([3.0, 2.0]).sum())


def test_softmax_rows_sum_to_one_1000_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r, c = rng.integers(1, 8, size=2)
        x = rng.normal(scale=5, size=(r, c))
        lam = rng.uniform(0.1, 30)
        np.testing.assert_allclose(nk.softmax_rows(x, lam).data.sum(axis=1), 1.0, atol=1e-12)
        out32 = nk.softmax_rows(x.astype(np.float32), lam).data
        assert out32.dtype == np.float32
        np.testing.assert_allclose(out32.sum(axis=1), 1.0, atol=1e-5)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite), finite,
       st.floats(0.1, 20))
def test_softmax_shift_invariance(x, shift, lam):
    a = nk.softmax_rows(x, lam).data
    b = nk.softmax_rows(x + shift, lam).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# cosine


def test_cosine_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert nk.cosine(u, u)[0].item() == pytest.approx(1.0, abs=1e-15)
    assert nk.cosine([1.0, 0.0], [0.0, 1.0])[0].item() == 0.0
    assert nk.cosine([1.0, 2.0], [3.0, 4.0])[0].item() == pytest.approx(11 / (math.sqrt(5) * 5), rel=1e-15)
    assert nk.cosine([1.0, 2.0], [3.0, 4.0])[0].item() == pytest.approx(0.98387, abs=1e-5)


def test_cosine_zero_vector_flags_degenerate():
    p = leaf([0.0, 0.0])
    with nk.Tape() as tape:
        value, bad = nk.cosine(p, [1.0, 2.0])
    assert value.item() == 0.0 and bool(bad)
    assert np.all(nk.backward(tape, value, [p])[p] == 0.0)
    assert not nk.cosine([1.0, 2.0], [3.0, 4.0])[1]


@given(hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)), hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(u, v, a, b):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c1 = nk.cosine(u, v)[0].item()
    c2 = nk.cosine(a * u, b * v)[0].item()
    assert abs(c1 - c2) < 1e-12
    assert -1.0 - 1e-15 <= c1 <= 1.0 + 1e-15


# ---------------------------------------------------------------------------
# elementwise dispatch


def test_elementwise_examples():
    assert nk.elementwise("sigmoid", np.array(0.0)).item() == 0.5
    x = np.array([1.5, -2.0])
    np.testing.assert_array_equal(nk.elementwise("add", x, 0.0).data, x)
    assert nk.elementwise("tanh", np.array(1.0)).item() == pytest.approx(0.76159, abs=1e-5)
    assert nk.elementwise("tanh", np.array(1.0)).item() == pytest.approx(math.tanh(1.0), rel=1e-15)
    np.testing.assert_array_equal(nk.elementwise("mean_rows", np.array([[1.0, 2.0], [3.0, 6.0]])).data, [2.0, 4.0])
    np.testing.assert_array_equal(nk.elementwise("sum_rows", np.array([[1.0, 2.0], [3.0, 6.0]])).data, [4.0, 8.0])
    assert nk.elementwise("concat", np.ones(2), np.zeros(3)).shape == (5,)
    np.testing.assert_array_equal(nk.elementwise("scale", x, 2.0).data, 2 * x)
    np.testing.assert_array_equal(nk.elementwise("mul", x, x).data, x * x)


def test_elementwise_errors():
    with pytest.raises(DimensionError):
        nk.elementwise("add", np.ones(3), np.ones(4))
    with pytest.raises(DimensionError):
        nk.elementwise("concat", np.ones((2, 2)), np.ones((3, 3)), axis=0)
    with pytest.raises(ParameterError):
        nk.elementwise("softplus", np.ones(3))


# ---------------------------------------------------------------------------
# backward


def test_backward_constant_loss_gives_zero_gradients():
    p = leaf([1.0, 2.0])
    with nk.Tape() as tape:
        loss = nk.Tensor(3.0) + nk.scale(nk.sum(p), 0.0) * 0.0
    assert np.all(nk.backward(tape, loss, [p])[p] == 0.0)


def test_backward_sum_gives_ones():
    (g,) = grads_of(nk.sum, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_backward_unreachable_leaf_is_zero():
    p, q = leaf([1.0]), leaf([[2.0, 3.0]])
    with nk.Tape() as tape:
        loss = nk.sum(nk.scale(p, 4.0))
    g = nk.backward(tape, loss, [p, q])
    assert g[p].tolist() == [4.0]
    assert g[q].shape == (1, 2) and not g[q].any()


def test_backward_rejects_nonscalar_loss():
    p = leaf([1.0, 2.0])
    with nk.Tape() as tape:
        out = nk.scale(p, 2.0)
    with pytest.raises(ContractError):
        nk.backward(tape, out, [p])


def test_backward_cosine_matches_central_differences():
    def f(p):
        return nk.cosine(p["p"], p["q"])[0]

    report = nk.finite_diff_check(f, {"p": np.array([1.0, 2.0]), "q": np.array([3.0, 4.0])})
    assert report.max_rel_error < 1e-6


def test_tape_is_topologically_ordered():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones((3, 2)))
    with nk.Tape() as tape:
        c = nk.tanh(nk.matmul(a, b))
        nk.sum(nk.softmax(c) * c)
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp is not a and inp is not b:
                assert id(inp) in produced
        produced.add(id(node.out))


def test_independent_tapes_on_threads():
    results = {}

    def work(tag, scale_by):
        p = leaf(np.arange(1.0, 4.0))
        for _ in range(50):
            with nk.Tape() as tape:
                loss = nk.sum(nk.scale(nk.mul(p, p), scale_by))
            g = nk.backward(tape, loss, [p])[p]
        results[tag] = g

    threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        np.testing.assert_array_equal(results[i], 2 * (i + 1) * np.arange(1.0, 4.0))


# ---------------------------------------------------------------------------
# every differentiable op against central differences


def _weighted(out, w):
    return nk.sum(nk.mul(out, w))


def _instance(name, rng):
    """(function of a params dict, params) for one random instance of ``name``."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    if name == "add":
        return lambda p: _weighted(nk.add(p["a"], p["b"][:1]), w), {"a": a, "b": b}
    if name == "sub":
        return lambda p: _weighted(nk.sub(p["a"], p["b"]), w), {"a": a, "b": b}
    if name == "mul":
        return lambda p: _weighted(nk.mul(p["a"], p["b"]), w), {"a": a, "b": b}
    if name == "scale":
        return lambda p: _weighted(nk.scale(p["a"], -1.7), w), {"a": a}
    if name == "matmul":
        c = rng.normal(size=(2, 4, 5))
        wm = rng.normal(size=(2, 3, 5))
        return lambda p: _weighted(nk.matmul(p["a"], p["c"]), wm), {"a": a, "c": c}
    if name == "sigmoid":
        return lambda p: _weighted(nk.sigmoid(p["a"]), w), {"a": 2 * a}
    if name == "tanh":
        return lambda p: _weighted(nk.tanh(p["a"]), w), {"a": a}
    if name == "relu":
        away = np.where(np.abs(a) < 0.05, 0.5, a)
        return lambda p: _weighted(nk.relu(p["a"]), w), {"a": away}
    if name == "softmax":
        lam = rng.uniform(0.5, 3.0)
        return lambda p: _weighted(nk.softmax(p["a"], axis=-1, temperature=lam, mask=mask), w), {"a": a}
    if name == "softmax_axis0":
        return lambda p: _weighted(nk.softmax(p["a"], axis=0, temperature=2.0), w), {"a": a}
    if name == "cosine":
        return lambda p: nk.sum(nk.mul(nk.cosine(p["a"], p["b"])[0], w[:, 0])), {"a": a, "b": b}
    if name == "l2_normalize":
        return lambda p: _weighted(nk.l2_normalize(p["a"]), w), {"a": a}
    if name == "sum":
        return lambda p: nk.sum(nk.mul(nk.sum(p["a"], axis=1), w[:, 0])), {"a": a}
    if name == "mean":
        return lambda p: nk.sum(nk.mul(nk.mean(p["a"], axis=0, keepdims=True), w[:1])), {"a": a}
    if name == "masked_mean":
        return lambda p: nk.sum(nk.mul(nk.masked_mean(p["a"], mask, axis=1), w[:, 0])), {"a": a}
    if name == "max":
        return lambda p: nk.sum(nk.mul(nk.max(p["a"], axis=1, mask=mask), w[:, 0])), {"a": a}
    if name == "reshape":
        return lambda p: _weighted(nk.reshape(nk.reshape(p["a"], (2, 6)) * 2.0, (3, 4)), w), {"a": a}
    if name == "swapaxes":
        return lambda p: _weighted(nk.swapaxes(p["a"], 0, 1), w.T), {"a": a}
    if name == "expand_dims":
        return lambda p: _weighted(nk.expand_dims(p["a"], 1), w[:, None, :]), {"a": a}
    if name == "concat":
        wc = rng.normal(size=(3, 8))
        return lambda p: _weighted(nk.concat([p["a"], p["b"]], axis=1), wc), {"a": a, "b": b}
    if name == "stack":
        ws = rng.normal(size=(3, 2, 4))
        return lambda p: _weighted(nk.stack([p["a"], p["b"]], axis=1), ws), {"a": a, "b": b}
    if name == "getitem":
        idx = np.array([2, 0, 2])
        return lambda p: _weighted(p["a"][idx] * p["a"][1:2, :], w), {"a": a}
    if name == "take_rows":
        ids = np.array([[0, 2, 2], [1, 0, 2]])
        wt = rng.normal(size=(2, 3, 4))
        return lambda p: _weighted(nk.take_rows(p["a"], ids), wt), {"a": a}
    raise AssertionError(name)


OPS = [
    "add", "sub", "mul", "scale", "matmul", "sigmoid", "tanh", "relu", "softmax", "softmax_axis0",
    "cosine", "l2_normalize", "sum", "mean", "masked_mean", "max", "reshape", "swapaxes",
    "expand_dims", "concat", "stack", "getitem", "take_rows",
]


@pytest.mark.parametrize("name", OPS)
def test_op_gradient_matches_finite_differences(name):
    # perturbed evaluations in extended precision: a 64-bit difference quotient
    # carries ~1e-10 absolute noise, which is 1e-6 relative on 1e-4 gradients
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(100):
        f, params = _instance(name, rng)
        report = nk.finite_diff_check(f, params, eps=1e-6, oracle_dtype=np.longdouble)
        worst = max(worst, report.max_rel_error)
    assert worst < 1e-6, f"{name}: max rel err {worst:.2e}"


# ---------------------------------------------------------------------------
# finite_diff_check itself


def test_finite_diff_quadratic():
    report = nk.finite_diff_check(lambda p: nk.sum(nk.mul(p["x"], p["x"])), {"x": np.array([3.0])})
    assert report.max_rel_error < 1e-9


def test_finite_diff_linear():
    # a power-of-two step keeps x +- eps exact, so only the quotient can err
    c = np.array([[1.5, -2.0], [0.25, 4.0]])
    report = nk.finite_diff_check(lambda p: nk.sum(nk.mul(p["x"], c)), {"x": np.ones((2, 2))}, eps=2.0**-20)
    assert report.max_rel_error < 1e-10
    assert report.coordinates == 4


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(EvaluationError):
        nk.finite_diff_check(lambda p: nk.scale(nk.sum(p["x"]), np.inf), {"x": np.ones(2)})
    with pytest.raises(ParameterError):
        nk.finite_diff_check(lambda p: nk.sum(p["x"]), {"x": np.ones(2)}, eps=0.0)


def test_finite_diff_detects_a_wrong_adjoint():
    def bad_square(x):
        x = nk.as_tensor(x)
        return nk._emit(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = nk.finite_diff_check(lambda p: nk.sum(bad_square(p["x"])), {"x": np.array([1.0, 2.0])})
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_noop():
    params = {"w": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
    new, state = nk.adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, nk.AdamState())
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])
    assert state.t == 1


@given(hnp.arrays(np.float64, st.integers(1, 5), elements=finite), st.integers(1, 5))
def test_adam_zero_gradient_is_noop_property(values, steps):
    params, state = {"p": values}, nk.AdamState(lr=0.1)
    for _ in range(steps):
        params, state = nk.adam_step(params, {"p": np.zeros_like(values)}, state)
    np.testing.assert_array_equal(params["p"], values)


def test_adam_first_step_hand_evaluated():
    new, state = nk.adam_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, nk.AdamState(lr=0.001))
    # t=1: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    assert float(new["p"]) == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)
    assert float(new["p"]) == pytest.approx(0.999, abs=1e-10)


def test_adam_identical_params_stay_identical():
    rng = np.random.default_rng(3)
    params = {"a": np.full(3, 0.7), "b": np.full(3, 0.7)}
    state = nk.AdamState(lr=0.01)
    for _ in range(25):
        g = rng.normal(size=3)
        params, state = nk.adam_step(params, {"a": g, "b": g.copy()}, state)
        np.testing.assert_array_equal(params["a"], params["b"])
    assert state.t == 25
    assert state.m["a"].shape == params["a"].shape


def test_adam_defaults_and_shape_check():
    s = nk.AdamState()
    assert (s.lr, s.beta1, s.beta2, s.epsilon, s.t) == (2e-4, 0.9, 0.999, 1e-8, 0)
    with pytest.raises(DimensionError):
        nk.adam_step({"p": np.ones(3)}, {"p": np.ones(4)}, nk.AdamState())


def test_precision_selection():
    assert nk.resolve_dtype("float32") == np.float32
    assert nk.resolve_dtype("float64") == np.float64
    with pytest.raises(ParameterError):
        nk.resolve_dtype("float16")
    x = nk.Tensor(np.ones((2, 2), dtype=np.float32))
    assert nk.softmax(nk.tanh(x @ x)).dtype == np.float32
