import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psec.numcore import (
    AdamState,
    LowRankTerm,
    Mlp,
    MlpSpec,
    NonFiniteError,
    SeededRng,
    ShapeError,
    adam_step,
    finite_diff_grad,
    init_params,
    max_rel_error,
    mlp_backward,
    mlp_forward,
)


def _oracle_forward(spec, params, x):
    h = x
    for i in range(spec.n_layers):
        z = np.einsum("nd,de->ne", h, params[f"W{i}"]) + params[f"b{i}"]
        h = np.where(z > 0, z, 0.0) if i < spec.n_layers - 1 else z
    return h


def test_zero_weights_output_is_bias():
    spec = MlpSpec((3, 4, 2))
    params = {k: np.zeros(s) for k, s in spec.param_shapes().items()}
    params["b1"] = np.array([0.5, -1.5])
    out, _ = mlp_forward(spec, params, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, [0.5, -1.5])


def test_affine_one_by_one():
    spec = MlpSpec((1, 1))
    out, _ = mlp_forward(spec, {"W0": np.array([[2.0]]), "b0": np.array([1.0])}, np.array([3.0]))
    assert out[0] == 7.0


def test_forward_matches_matrix_oracle():
    rng = SeededRng(3)
    spec = MlpSpec((4, 3, 2))
    params = init_params(spec, rng)
    params["b0"] = rng.normal(3)
    x = rng.normal((10, 4))
    out, _ = mlp_forward(spec, params, x)
    np.testing.assert_allclose(out, _oracle_forward(spec, params, x), rtol=0, atol=1e-12)


def test_forward_is_pure():
    rng = SeededRng(1)
    net = Mlp.create((5, 8, 3), rng)
    x = rng.normal((6, 5))
    assert np.array_equal(net(x), net(x))


def test_backward_linear_chain_rule():
    spec = MlpSpec((1, 1))
    params = {"W0": np.array([[2.0]]), "b0": np.array([1.0])}
    _, cache = mlp_forward(spec, params, np.array([3.0]))
    grads, gin, _ = mlp_backward(spec, params, cache, np.array([1.0]))
    assert grads["W0"][0, 0] == 3.0 and grads["b0"][0] == 1.0
    assert gin[0] == 2.0


def test_relu_subgradient_at_zero():
    spec = MlpSpec((1, 1, 1))
    params = {"W0": np.array([[1.0]]), "b0": np.array([0.0]), "W1": np.array([[1.0]]), "b1": np.array([0.0])}
    _, cache = mlp_forward(spec, params, np.array([0.0]))
    grads, gin, _ = mlp_backward(spec, params, cache, np.array([1.0]))
    assert grads["W0"][0, 0] == 0.0 and grads["b0"][0] == 0.0 and gin[0] == 0.0


def _fd_check(spec, rng, n=5, with_terms=False):
    params = init_params(spec, rng)
    for k in params:
        if k.startswith("b"):
            params[k] = 0.1 * rng.normal(params[k].shape)
    x = rng.normal((n, spec.in_dim))
    direction = rng.normal((n, spec.out_dim))
    terms = None
    if with_terms:
        terms = [
            [LowRankTerm(rng.normal((spec.layer_dims[i], 2)), rng.normal((2, spec.layer_dims[i + 1])), rng.normal(n))]
            for i in range(spec.n_layers)
        ]

    def f():
        return float(np.sum(mlp_forward(spec, params, x, terms)[0] * direction))

    _, cache = mlp_forward(spec, params, x, terms)
    grads, gin, tgrads = mlp_backward(spec, params, cache, direction)
    fd = finite_diff_grad(f, params)
    err = max_rel_error(grads, fd)
    xs = {"x": x}
    fd_in = finite_diff_grad(f, xs)["x"]
    err = max(err, max_rel_error(gin, fd_in))
    if with_terms:
        for i, layer in enumerate(terms):
            t = layer[0]
            fac = {"B": t.B, "A": t.A, "c": t.coef}
            fd_t = finite_diff_grad(f, fac)
            err = max(err, max_rel_error(tgrads[i][0].B, fd_t["B"]))
            err = max(err, max_rel_error(tgrads[i][0].A, fd_t["A"]))
            err = max(err, max_rel_error(tgrads[i][0].coef, fd_t["c"]))
    return err


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), dims=st.lists(st.integers(1, 6), min_size=2, max_size=4))
def test_backward_matches_finite_differences(seed, dims):
    assert _fd_check(MlpSpec(tuple(dims)), SeededRng(seed)) < 1e-5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_low_rank_term_grads_match_finite_differences(seed):
    assert _fd_check(MlpSpec((4, 5, 3)), SeededRng(seed), with_terms=True) < 1e-5


def test_backward_rejects_foreign_cache():
    rng = SeededRng(0)
    a, b = Mlp.create((2, 3, 1), rng), Mlp.create((2, 3, 1), rng)
    _, cache = a.forward(np.ones(2))
    with pytest.raises(ShapeError):
        b.backward(cache, np.ones(1))


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        Mlp.create((3, 2), SeededRng(0))(np.ones(4))


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.ones(3)}, state, 3e-4)
    np.testing.assert_allclose(params["w"], [1.0 - 3e-4, -2.0 - 3e-4, 0.5 - 3e-4], atol=1e-10)


def test_adam_zero_grad_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    assert np.array_equal(params["w"], [1.0, -2.0])


def test_adam_quadratic_descends():
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    for _ in range(100):
        adam_step(params, {"w": 2.0 * params["w"]}, state, 1e-2)
    # same recurrence written out by hand
    w, m, v = 1.0, 0.0, 0.0
    for k in range(1, 101):
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 1e-2 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    assert abs(params["w"][0]) < 0.5
    assert params["w"][0] == pytest.approx(w, abs=1e-12)


def test_adam_rejects_nonfinite():
    params = {"w": np.zeros(1)}
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([np.nan])}, AdamState.for_params(params), 0.1)


def test_finite_diff_square_and_constant():
    p = {"w": np.array([3.0])}
    assert finite_diff_grad(lambda: float(p["w"][0] ** 2), p)["w"][0] == pytest.approx(6.0, abs=1e-6)
    assert np.all(np.abs(finite_diff_grad(lambda: 4.0, p)["w"]) < 1e-8)
    assert p["w"][0] == 3.0


def test_rng_reproducible_and_split_independent():
    a, b = SeededRng(42), SeededRng(42)
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))
    assert np.array_equal(a.uniform(size=5), b.uniform(size=5))
    assert not np.array_equal(SeededRng(42).split(0).normal(4), SeededRng(42).split(1).normal(4))
    assert np.array_equal(SeededRng(42).split(3).normal(4), SeededRng(42).split(3).normal(4))


def test_box_muller_moments():
    z = SeededRng(0).normal(200_000)
    assert abs(z.mean()) < 0.01 and abs(z.var() - 1.0) < 0.01


def test_spec_validation():
    with pytest.raises(ShapeError):
        MlpSpec((3,))
    with pytest.raises(ShapeError):
        MlpSpec((3, 0, 1))
