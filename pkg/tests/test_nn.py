"""Autodiff primitives, the finite-difference oracle, Adam and checkpoints."""

from __future__ import annotations

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masd.nn import (
    AdamState, CheckpointError, NumericError, ParameterSet, ShapeError, Tensor, adam_step, checkpoint,
    clip_global_norm, evaluate_with_gradients, finite_diff_check, init_mlp, mlp, mlp_numpy, stop_gradient,
)
from masd.nn import ops as T


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        g[i] = (f(hi) - f(lo)) / (2 * eps)
    return g


def test_linear_form_value_and_gradient():
    vals, grads = evaluate_with_gradients(
        {"w": np.array([1.0, 2.0])}, lambda p: T.sum_(T.mul(p["w"], Tensor([3.0, 4.0])))
    )
    assert vals[0] == pytest.approx(11.0)
    np.testing.assert_array_equal(grads["w"], [3.0, 4.0])


def test_squared_norm_at_zero_is_stationary():
    vals, grads = evaluate_with_gradients({"w": np.zeros(3)}, lambda p: T.sqnorm(p["w"], axis=None))
    assert vals[0] == 0.0
    np.testing.assert_array_equal(grads["w"], np.zeros(3))


def test_two_layer_tanh_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = init_mlp(rng, "net/", [4, 6, 3])
    x = rng.normal(size=(5, 4))
    err = finite_diff_check(params, lambda p: T.sum_(T.mul(mlp(p, "net/", Tensor(x)), mlp(p, "net/", Tensor(x)))))
    assert err < 1e-6


@pytest.mark.parametrize("stencil,eps", [(2, 1e-6), (4, 1e-3)])
def test_oracle_stencils_on_a_quartic(stencil, eps):
    w = np.array([0.7, -1.3])
    graph = lambda p: T.sum_(T.mul(T.mul(p["w"], p["w"]), T.mul(p["w"], p["w"])))  # noqa: E731
    assert finite_diff_check({"w": w}, graph, eps=eps, stencil=stencil) < 1e-8
    with pytest.raises(ValueError):
        finite_diff_check({"w": w}, graph, stencil=3)


def test_oracle_ignores_unused_parameters():
    params = {"w": np.array([1.0, 2.0]), "unused": np.ones(3)}
    graph = lambda p: T.sum_(T.tanh(p["w"]))  # noqa: E731
    assert finite_diff_check(params, graph, eps=1e-3, stencil=4) < 1e-10


def test_linear_loss_oracle_error_is_tiny():
    w = np.array([0.3, -1.2, 2.0])
    assert finite_diff_check({"w": w}, lambda p: T.sum_(T.mul(p["w"], Tensor([1.0, 2.0, 3.0])))) < 1e-10


UNARY = {
    "tanh": T.tanh,
    "relu": T.relu,
    "exp": T.exp,
    "softmax": T.softmax,
    "log_softmax": T.log_softmax,
    "clip": lambda a: T.clip(a, -0.5, 0.5),
    "scale": lambda a: T.scale(a, -2.5),
    "sum_axis1": lambda a: T.sum_(a, axis=1),
    "mean": lambda a: T.mean(a, axis=0),
    "sqnorm": lambda a: T.sqnorm(a, axis=1),
    "reshape": lambda a: T.reshape(a, (a.shape[0] * a.shape[1],)),
    "gather_rows": lambda a: T.gather_rows(a, np.array([2, 0, 2, 1])),
    "pick": lambda a: T.pick(a, np.array([0, 3, 1])),
    "concat": lambda a: T.concat([a, T.scale(a, 3.0)], axis=1),
    "masked_log_softmax": lambda a: T.log_softmax(a, MASK),
}
MASK = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], bool)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.05] += 0.2  # keep away from relu/clip kinks
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.2
    weights = rng.normal(size=UNARY[name](Tensor(x)).shape)
    if name == "masked_log_softmax":
        weights = np.where(MASK, weights, 0.0)  # masked outputs are a -1e30 sentinel

    def f(v):
        return float((UNARY[name](Tensor(v)).data * weights).sum())

    def graph(p):
        return T.sum_(T.mul(UNARY[name](p["x"]), Tensor(weights)))

    _, grads = evaluate_with_gradients({"x": x}, graph)
    np.testing.assert_allclose(grads["x"], numeric_grad(f, x), rtol=1e-6, atol=1e-8)


def test_binary_and_affine_gradients():
    rng = np.random.default_rng(2)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "c": rng.normal(size=2)}

    def graph(p):
        h = T.sub(T.mul(p["a"], p["b"]), T.minimum(p["a"], p["b"]))
        return T.sum_(T.tanh(T.affine(T.add(h, p["a"]), p["w"], p["c"])))

    assert finite_diff_check(params, graph) < 1e-7


def test_masked_attention_gradient():
    rng = np.random.default_rng(3)
    params = {"q": rng.normal(size=4), "k": rng.normal(size=(2, 3, 4)), "v": rng.normal(size=(2, 3, 4))}
    mask = np.array([[True, True, False], [True, True, True]])
    weights = rng.normal(size=(2, 4))

    def graph(p):
        return T.sum_(T.mul(T.masked_attention(p["q"], p["k"], p["v"], mask, 2), Tensor(weights)))

    assert finite_diff_check(params, graph) < 1e-7


def test_broadcast_rows_gradient():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 2))
    assert finite_diff_check({"v": rng.normal(size=2)}, lambda p: T.sum_(T.mul(T.broadcast_rows(p["v"], 3), Tensor(w)))) < 1e-8


def test_stop_gradient_blocks_flow_and_oracle_respects_it():
    x = np.array([1.0, -2.0])

    def graph(p):
        return T.sum_(T.mul(p["x"], stop_gradient(p["x"])))

    _, grads = evaluate_with_gradients({"x": x}, graph)
    np.testing.assert_array_equal(grads["x"], x)
    assert finite_diff_check({"x": x}, graph) < 1e-8


def test_straight_through_value_is_exact_and_routes_gradient_to_input():
    x = np.array([[0.1, 0.7], [-0.3, 2.0]])
    v = np.array([[1.0 / 3.0, -5.0], [1e-17, 4.0]])
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    out, grads = evaluate_with_gradients({"x": x, "v": v}, lambda p: T.sum_(T.mul(T.straight_through_value(p["x"], p["v"]), Tensor(w))))
    assert out[0] == float((v * w).sum())
    np.testing.assert_array_equal(grads["x"], w)
    assert not grads["v"].any()
    graph = lambda p: T.sum_(T.tanh(T.straight_through_value(p["x"], Tensor(v))))  # noqa: E731
    assert finite_diff_check({"x": x}, graph) < 1e-8  # the oracle differentiates the same identity surrogate
    with pytest.raises(ShapeError):
        T.straight_through_value(Tensor(x), Tensor(v[0]))


def test_shape_mismatch_and_non_finite_raise():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.exp(Tensor(np.array([1e4])))
    with pytest.raises(ShapeError):
        evaluate_with_gradients({"x": np.ones(2)}, lambda p: p["x"])


def test_mlp_numpy_matches_tensor_mlp():
    rng = np.random.default_rng(5)
    params = init_mlp(rng, "m/", [3, 7, 7, 2], out_bias=False)
    assert "m/b2" not in params
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(mlp_numpy(params, "m/", x), mlp({k: Tensor(v) for k, v in params.items()}, "m/", Tensor(x)).data)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params_and_decays_moments():
    params = ParameterSet({"w": np.array([1.0, -1.0])})
    state = AdamState(lr=0.1, m={"w": np.array([1.0, 1.0])}, v={"w": np.array([1.0, 1.0])}, step=3)
    new, st_ = adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * (0.9 / (1 - 0.9**4)) / (np.sqrt(0.999 / (1 - 0.999**4)) + 1e-8))
    np.testing.assert_allclose(st_.m["w"], 0.9)
    np.testing.assert_allclose(st_.v["w"], 0.999)
    fresh, _ = adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(fresh["w"], params["w"])


@given(g=st.floats(min_value=1e-3, max_value=1e3) | st.floats(min_value=-1e3, max_value=-1e-3),
       lr=st.floats(min_value=1e-5, max_value=1e-1))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_has_magnitude_lr(g, lr):
    params = ParameterSet({"w": np.array([0.5])})
    new, _ = adam_step(params, {"w": np.array([g])}, AdamState(lr=lr))
    assert abs(new["w"][0] - 0.5) == pytest.approx(lr, rel=1e-4)
    assert np.sign(0.5 - new["w"][0]) == np.sign(g)


def test_adam_trajectories_are_deterministic():
    def run():
        rng = np.random.default_rng(7)
        params = ParameterSet({"w": rng.normal(size=(3, 3))})
        state = AdamState(lr=0.01)
        for _ in range(20):
            params, state = adam_step(params, {"w": rng.normal(size=(3, 3))}, state)
        return params["w"]

    assert run().tobytes() == run().tobytes()


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        adam_step(ParameterSet({"w": np.zeros(1)}), {"w": np.array([np.nan])}, AdamState())


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_global_norm(grads, 1.0)
    assert np.sqrt(clipped["a"] ** 2 + clipped["b"] ** 2)[0] == pytest.approx(1.0)
    assert clip_global_norm(grads, 10.0)["a"][0] == 3.0


# ---------------------------------------------------------------- checkpoints

@given(st.lists(st.floats(allow_nan=False, allow_infinity=True, width=64), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_checkpoint_round_trip_is_bit_exact(values):
    arr = np.array(values)
    tensors, meta = checkpoint.loads(checkpoint.dumps({"x": arr, "y": arr.reshape(1, -1)}, {"k": 1}))
    assert tensors["x"].tobytes() == arr.tobytes()
    assert tensors["y"].shape == (1, len(values))
    assert meta == {"k": 1}


def test_checkpoint_bytes_independent_of_insertion_order():
    a, b = np.arange(3.0), np.ones((2, 2))
    assert checkpoint.dumps({"a": a, "b": b}) == checkpoint.dumps({"b": b, "a": a})


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        checkpoint.loads("not json")
    with pytest.raises(CheckpointError):
        checkpoint.loads('{"format": "other"}')
