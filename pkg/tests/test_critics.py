import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psec.critics import (
    CriticSet,
    ExpectileConfig,
    expectile_loss,
    feasibility_target,
    reversed_expectile_loss,
    reward_weight,
    safety_weight,
    soft_update,
    _expectile_grad,
    train_critics,
    update_feasibility_critics,
)
from psec.diffusion import WEIGHT_FLOOR
from psec.numcore import Mlp, SeededRng, ShapeError, finite_diff_grad, max_rel_error

GAMMA = 0.9
TAU = 0.9
CHAIN_H = np.array([0.0, 0.0, 0.0, 0.0, 1.0])


def expectile_oracle(values, probs, tau, reverse=False):
    """Root of the expectile first-order condition by bisection."""
    values, probs = np.asarray(values, float), np.asarray(probs, float)

    def grad(v):
        u = values - v
        ind = (u > 0) if reverse else (u < 0)
        return np.sum(probs * np.abs(tau - ind) * u)

    lo, hi = values.min(), values.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if grad(mid) > 0 else (lo, mid)
    return 0.5 * (lo + hi)


def chain_next(i: int, a: int) -> int:
    return 4 if i == 4 else min(max(i + a, 0), 4)


def chain_value_iteration(gamma=GAMMA, tau=TAU, sweeps=500):
    V = np.zeros(5)
    for _ in range(sweeps):
        Q = [[(1 - gamma) * CHAIN_H[i] + gamma * max(CHAIN_H[i], V[chain_next(i, a)]) for a in (-1, 1)] for i in range(5)]
        V = np.array([expectile_oracle(q, [0.5, 0.5], tau, reverse=True) for q in Q])
    return V


def train_chain(seed=0, steps=3000):
    rng = SeededRng(seed)
    n = 2000
    si = rng.integers(0, 5, n)
    ai = np.where(rng.uniform(size=n) < 0.5, -1, 1)
    sn = np.array([chain_next(i, a) for i, a in zip(si, ai)])
    eye = np.eye(5)
    cr = CriticSet.create(5, 1, (32, 32), rng.split(1))
    cfg = ExpectileConfig(TAU, GAMMA, 0.05)
    train_critics(cr, "feasibility", eye[si], ai[:, None].astype(float), CHAIN_H[si], eye[sn], cfg, steps, 1e-3, 256,
                  rng.split(2))
    return cr.v_feasibility(eye)


def _bandit(p_high, tau, seed=0, steps=3000):
    rng = SeededRng(seed)
    n = 4000
    a = (rng.uniform(size=n) < p_high).astype(float)[:, None]
    s = np.zeros((n, 1))
    cr = CriticSet.create(1, 1, (32, 32), rng.split(1))
    train_critics(cr, "reward", s, a, a[:, 0], s, ExpectileConfig(tau, 0.0, 0.05), steps, 1e-3, 256, rng.split(2))
    return cr


def test_expectile_loss_values():
    assert expectile_loss(1.0, 0.9) == pytest.approx(0.9)
    assert expectile_loss(-1.0, 0.9) == pytest.approx(0.1)
    assert reversed_expectile_loss(1.0, 0.9) == pytest.approx(0.1)
    assert reversed_expectile_loss(-1.0, 0.9) == pytest.approx(0.9)
    assert reversed_expectile_loss(0.0, 0.9) == 0.0


@given(u=st.floats(-1e3, 1e3))
def test_half_expectile_is_symmetric(u):
    assert expectile_loss(u, 0.5) == pytest.approx(0.5 * u * u)
    assert expectile_loss(u, 0.5) == reversed_expectile_loss(u, 0.5)


def test_feasibility_target_cases():
    assert np.allclose(feasibility_target(np.ones(3), np.array([0.0, 0.4, 1.0]), 0.99), 1.0)
    assert np.all(feasibility_target(np.zeros(2), np.zeros(2), 0.99) == 0.0)
    t = feasibility_target(np.array([0.0, 1.0, 0.0]), np.array([5.0, -3.0, 0.5]), 0.9)
    assert np.all((t >= 0) & (t <= 1))


def test_feasibility_rejects_nonbinary_labels():
    cr = CriticSet.create(2, 1, (4,), SeededRng(0))
    with pytest.raises(ValueError):
        update_feasibility_critics(cr, np.zeros((2, 2)), np.zeros((2, 1)), np.array([0.0, 0.5]), np.zeros((2, 2)),
                                   ExpectileConfig())


def test_config_validation():
    for kw in ({"tau": 1.0}, {"tau": 0.3}, {"gamma": 1.0}, {"target_rate": 0.0}):
        with pytest.raises(ValueError):
            ExpectileConfig(**kw)


def test_reward_q_converges_to_reward():
    rng = SeededRng(3)
    s = np.repeat(np.eye(2), 500, axis=0)
    a = rng.uniform(-1, 1, (1000, 1))
    cr = CriticSet.create(2, 1, (32, 32), rng.split(0))
    train_critics(cr, "reward", s, a, np.ones(1000), s, ExpectileConfig(0.9, 0.0, 0.05), 2000, 1e-3, 128, rng.split(1))
    q = cr.q_reward(s, a, target=False)
    assert np.max(np.abs(q - 1.0)) <= 0.02


def test_bandit_mean_at_half():
    cr = _bandit(0.5, 0.5)
    assert cr.v_reward(np.zeros((1, 1)))[0] == pytest.approx(0.5, abs=0.05)


def test_bandit_matches_expectile_oracle():
    p = 0.3
    want = expectile_oracle([0.0, 1.0], [1 - p, p], 0.9)
    assert want == pytest.approx(0.9 * p / (0.9 * p + 0.1 * (1 - p)), abs=1e-9)
    cr = _bandit(p, 0.9)
    assert cr.v_reward(np.zeros((1, 1)))[0] == pytest.approx(want, abs=0.05)


def test_chain_matches_value_iteration():
    oracle = chain_value_iteration()
    learned = train_chain()
    assert oracle[4] == pytest.approx(1.0)
    assert np.max(np.abs(learned - oracle)) < 0.05
    assert np.all((learned > -0.1) & (learned < 1.1))


class _Stub:
    """Critic stand-in with fixed Q and V."""

    def __init__(self, q, v):
        self._q, self._v = np.asarray(q, float), np.asarray(v, float)

    def q_reward(self, s, a):
        return self._q

    def v_reward(self, s):
        return self._v

    q_feasibility = q_reward
    v_feasibility = v_reward


def test_reward_weight_values():
    z = np.zeros((3, 1))
    w = reward_weight(_Stub([0.0, math.log(2), 20.0], [0.0, 0.0, 0.0]), z, z, clip=100)
    np.testing.assert_allclose(w, [1.0, 2.0, 100.0])
    assert reward_weight(_Stub([-30.0], [0.0]), z[:1], z[:1])[0] == WEIGHT_FLOOR


def test_safety_weight_values():
    z = np.zeros((3, 1))
    w = safety_weight(_Stub([0.0, 0.5, -math.log(3)], [0.0, 0.0, 0.0]), z, z)
    assert w[0] == pytest.approx(1.0) and w[1] < 1.0 and w[2] == pytest.approx(3.0)


@given(adv=st.floats(-1e4, 1e4), temp=st.floats(0.01, 100))
def test_weights_positive_and_bounded(adv, temp):
    z = np.zeros((1, 1))
    for fn in (reward_weight, safety_weight):
        w = fn(_Stub([adv], [0.0]), z, z, clip=100, temperature=temp)[0]
        assert WEIGHT_FLOOR <= w <= 100


def test_soft_update():
    rng = SeededRng(0)
    online = Mlp.create((2, 3, 1), rng.split(0))
    tgt = Mlp.create((2, 3, 1), rng.split(1))
    soft_update(tgt, online, 1.0)
    assert all(np.array_equal(tgt.params[k], online.params[k]) for k in online.params)
    before = {k: v.copy() for k, v in tgt.params.items()}
    soft_update(tgt, Mlp.create((2, 3, 1), rng.split(2)), 0.0)
    assert all(np.array_equal(tgt.params[k], before[k]) for k in before)
    for k in tgt.params:
        tgt.params[k][...] = 0.0
        online.params[k][...] = 2.0
    soft_update(tgt, online, 0.5)
    assert all(np.all(v == 1.0) for v in tgt.params.values())
    with pytest.raises(ShapeError):
        soft_update(tgt, Mlp.create((2, 4, 1), rng), 0.5)


@pytest.mark.parametrize("seed", range(20))
def test_critic_gradients_match_finite_differences(seed):
    rng = SeededRng(seed)
    v = Mlp.create((3, 5, 4, 1), rng.split(0))
    for k in v.params:
        if k.startswith("b"):
            # keep pre-activations off the rectifier kink
            v.params[k] = 0.1 * rng.normal(v.params[k].shape)
    x = rng.normal((8, 3))
    q = rng.normal(8)
    for reverse in (False, True):
        loss_fn = reversed_expectile_loss if reverse else expectile_loss

        def f():
            return float(np.mean(loss_fn(q - v(x)[:, 0], TAU)))

        pred, cache = v.forward(x)
        u = q - pred[:, 0]
        grads, _, _ = v.backward(cache, (-_expectile_grad(u, TAU, reverse) / len(u))[:, None])
        # entries near 1e-7 carry central-difference roundoff of ~1e-12, hence the floor
        assert max_rel_error(grads, finite_diff_grad(f, v.params), floor=1e-6) < 1e-5
