import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfact_lab.numeric import (
    GradCheckError,
    ParamStore,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    apply_primitive,
    backward,
    concat,
    const,
    exp,
    glorot_init,
    grad_check,
    log,
    matmul,
    sigmoid,
    slice_,
    softmax,
    sum_,
    tanh,
)
from lfact_lab.numeric.rng import splitmix64


# -- primitives ---------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = apply_primitive("matmul", Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_values():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_sigmoid_zero():
    assert sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)|\(2, 2\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        apply_primitive("add", Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        apply_primitive("conv", Tensor([1.0]))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        log(Tensor([1.0, 0.0]))


def test_tensor_is_immutable_and_fp64():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_concat_and_slice_round_trip():
    a, b = Tensor(np.arange(4.0).reshape(2, 2)), Tensor(np.arange(6.0).reshape(2, 3))
    c = concat([a, b], axis=1)
    assert c.shape == (2, 5)
    np.testing.assert_array_equal(slice_(c, np.s_[:, 2:]).data, b.data)


# -- softmax ------------------------------------------------------------------


def test_softmax_singleton():
    assert softmax(Tensor([7.3])).data.tolist() == [1.0]


def test_softmax_symmetric():
    assert softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_hand_value():
    out = softmax(Tensor([math.log(1.0), math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros(0)))


def test_softmax_mask_gives_exact_zeros():
    out = softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
    assert out[0, 2] == 0.0
    np.testing.assert_allclose(out[0, :2].sum(), 1.0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 64), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_normalised_and_shift_invariant(v, c):
    p = softmax(Tensor(v)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(Tensor(v + c)).data, p, rtol=0, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


# -- backward -----------------------------------------------------------------


def test_backward_square():
    x = Tensor(3.0)
    with Tape() as tape:
        y = x * x
    assert backward(tape, y)[x].item() == 6.0


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0)
    with Tape() as tape:
        y = sigmoid(x)
    assert backward(tape, y)[x].item() == 0.25


def test_backward_unreached_leaf_is_zero():
    x, w = Tensor([1.0, 2.0]), Tensor([[1.0, 2.0], [3.0, 4.0]])
    with Tape() as tape:
        unused = matmul(w, x)
        loss = sum_(x * x)
    g = backward(tape, loss)
    np.testing.assert_array_equal(g[w].data, np.zeros((2, 2)))
    np.testing.assert_array_equal(g[x].data, [2.0, 4.0])
    assert unused.shape == (2,)


def test_backward_rejects_foreign_loss():
    x = Tensor(2.0)
    loss = x * x
    with Tape() as tape:
        _ = x * 3.0
    with pytest.raises(ValueError, match="not produced on this tape"):
        backward(tape, loss)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = x * x
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_constants_get_no_gradient():
    x, c = Tensor([1.0, 2.0]), const([3.0, 4.0])
    with Tape() as tape:
        loss = sum_(x * c)
    g = backward(tape, loss)
    assert c not in g
    np.testing.assert_array_equal(g[x].data, [3.0, 4.0])


def _composite(params):
    a, b, v = params["a"], params["b"], params["v"]
    h = tanh(a @ b + 0.5) * sigmoid(a)
    s = softmax(h @ v)
    return sum_(log(s) * const(np.linspace(0.1, 1.0, s.shape[-1])))


@pytest.mark.parametrize("n", [1, 3, 16])
def test_composition_matches_central_differences(n):
    rng = Rng(n)
    params = ParamStore(
        {
            "a": Tensor(rng.normal(size=(n, n))),
            "b": Tensor(rng.normal(size=(n, n))),
            "v": Tensor(rng.normal(size=(n, 4))),
        }
    )
    assert grad_check(_composite, params, 1e-5) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_random_compositions_match_central_differences(seed, r, c):
    rng = Rng(seed)
    params = ParamStore({"x": Tensor(rng.normal(size=(r, c))), "w": Tensor(rng.normal(size=(c, r)))})

    def f(p):
        y = concat([tanh(p["x"] @ p["w"]), sigmoid(p["x"] @ p["w"] * 0.5)], axis=1)
        return sum_(slice_(y, np.s_[:, : r + 1]) * y[:, : r + 1])

    assert grad_check(f, params, 1e-5) < 1e-4


def test_replay_is_bitwise_and_gradients_repeat():
    rng = Rng(5)
    params = ParamStore({k: Tensor(rng.normal(size=s)) for k, s in [("a", (4, 4)), ("b", (4, 4)), ("v", (4, 3))]})
    runs = []
    for _ in range(2):
        with Tape() as tape:
            loss = _composite(params)
        g = backward(tape, loss)
        recorded = [n.output.data for n in tape.nodes]
        for r, again in zip(recorded, tape.replay()):
            assert np.array_equal(r, again)
        runs.append((loss.data.tobytes(), [g[params[k]].data.tobytes() for k in params]))
    assert runs[0] == runs[1]


def test_tape_nodes_are_topologically_ordered():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = sum_(tanh(x) * sigmoid(x))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen or not t.requires_grad or t in tape.leaves() for t in node.inputs)
        seen.add(id(node.output))
    assert tape.nodes[-1].output is y


# -- grad_check ---------------------------------------------------------------


def test_grad_check_quadratic():
    params = ParamStore({"x": Tensor([1.5, -2.0, 0.25])})
    assert grad_check(lambda p: sum_(p["x"] * p["x"] * 3.0), params, 1e-5) < 1e-8


def test_grad_check_constant_function():
    params = ParamStore({"x": Tensor([1.0, 2.0])})
    assert grad_check(lambda p: sum_(const([1.0, 1.0])) + 0.0 * sum_(p["x"]), params, 1e-5) == 0.0


def test_grad_check_step_bounds():
    params = ParamStore({"x": Tensor([1.0])})
    for step in (1e-8, 1e-2):
        with pytest.raises(ValueError):
            grad_check(lambda p: sum_(p["x"]), params, step)


def test_grad_check_reports_non_finite_coordinate():
    # exp overflows once x[1] moves up by the step
    params = ParamStore({"x": Tensor([0.0, 0.70978])})
    with pytest.raises(GradCheckError, match=r"x\[1\]"), np.errstate(over="ignore"):
        grad_check(lambda p: sum_(exp(p["x"] * 1000.0)), params, 1e-5)


def test_grad_check_detects_corruption():
    params = ParamStore({"x": Tensor([1.0, 2.0])})

    def hook(g):
        return {"x": g["x"] + 0.01}

    assert grad_check(lambda p: sum_(p["x"] * p["x"]), params, 1e-5, analytic_hook=hook) > 1e-4


# -- rng and init -------------------------------------------------------------


def test_splitmix64_reference_output():
    assert splitmix64(1234567)[1] == 6457827717110365317


def test_xoshiro256starstar_reference_stream():
    r = Rng.from_state((1, 2, 3, 4))
    assert [r.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_rng_determinism_and_independence():
    a, b = Rng(42), Rng(42)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_rng_samplers():
    r = Rng(0)
    u = r.uniform(size=10_000)
    assert u.min() >= 0.0 and u.max() < 1.0 and abs(u.mean() - 0.5) < 0.02
    n = r.normal(size=20_000)
    assert abs(n.mean()) < 0.03 and abs(n.std() - 1.0) < 0.03
    assert sorted(r.permutation(10).tolist()) == list(range(10))
    s = r.sample(100, 30)
    assert len(set(s.tolist())) == 30 and s.max() < 100
    counts = np.bincount(r.integers_array(3, 3000), minlength=3)
    assert counts.min() > 900


def test_glorot_deterministic_and_bounded():
    a = glorot_init(Rng(7), 30, 20).data
    b = glorot_init(Rng(7), 30, 20).data
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= math.sqrt(6.0 / 50)


def test_glorot_mean_near_zero():
    w = glorot_init(Rng(11), 128, 128).data
    assert abs(w.mean()) < 0.01


def test_glorot_rejects_empty():
    with pytest.raises(ValueError):
        glorot_init(Rng(0), 0, 3)
