"""Expectile-regression critics for reward and feasibility, and the
advantage weights they induce for skill training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import WEIGHT_FLOOR
from .numcore import Mlp, NonFiniteError, SeededRng, ShapeError


@dataclass(frozen=True)
class ExpectileConfig:
    tau: float = 0.9
    gamma: float = 0.99
    target_rate: float = 1e-3

    def __post_init__(self) -> None:
        # tau = 0.5 (plain mean regression) is accepted as a diagnostic setting
        if not 0.5 <= self.tau < 1.0:
            raise ValueError(f"expectile tau must lie in [0.5, 1), got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError(f"target rate must lie in (0, 1], got {self.target_rate}")


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0.0)) * u * u


def reversed_expectile_loss(u, tau: float):
    """|tau - 1(u > 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u > 0.0)) * u * u


def _expectile_grad(u: np.ndarray, tau: float, reverse: bool) -> np.ndarray:
    ind = (u > 0.0) if reverse else (u < 0.0)
    return 2.0 * np.abs(tau - ind) * u


def soft_update(target: Mlp, online: Mlp, rate: float) -> Mlp:
    """target <- (1 - rate) * target + rate * online, in place."""
    if target.spec != online.spec:
        raise ShapeError(f"target {target.spec.layer_dims} vs online {online.spec.layer_dims}")
    for k, p in target.params.items():
        if p.shape != online.params[k].shape:
            raise ShapeError(f"tensor {k!r}: {p.shape} vs {online.params[k].shape}")
        p *= 1.0 - rate
        p += rate * online.params[k]
    return target


@dataclass
class CriticPair:
    """Two Q networks with targets plus a state-value network."""

    q: list[Mlp]
    q_target: list[Mlp]
    v: Mlp

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, rng: SeededRng) -> "CriticPair":
        q = [Mlp.create((state_dim + action_dim, *hidden, 1), rng.split(i)) for i in range(2)]
        return cls(q=q, q_target=[n.clone() for n in q], v=Mlp.create((state_dim, *hidden, 1), rng.split(2)))


@dataclass
class CriticSet:
    state_dim: int
    action_dim: int
    reward: CriticPair
    feasibility: CriticPair
    state_mean: np.ndarray
    state_std: np.ndarray
    steps: dict[str, int] = field(default_factory=lambda: {"reward": 0, "feasibility": 0})

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        hidden=(256, 256),
        rng: SeededRng | None = None,
        state_mean=None,
        state_std=None,
    ) -> "CriticSet":
        rng = rng or SeededRng(0)
        return cls(
            state_dim=state_dim,
            action_dim=action_dim,
            reward=CriticPair.create(state_dim, action_dim, hidden, rng.split(0)),
            feasibility=CriticPair.create(state_dim, action_dim, hidden, rng.split(1)),
            state_mean=np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, float),
            state_std=np.ones(state_dim) if state_std is None else np.asarray(state_std, float),
        )

    def norm(self, s: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(s) - self.state_mean) / self.state_std

    def sa(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([self.norm(s), np.atleast_2d(a)], axis=1)

    # Reward critics are pessimistic with the min over Q, feasibility critics
    # (higher = more violation) with the max.
    def q_reward(self, s, a, target: bool = True) -> np.ndarray:
        nets = self.reward.q_target if target else self.reward.q
        x = self.sa(s, a)
        return np.minimum(nets[0](x)[:, 0], nets[1](x)[:, 0])

    def q_feasibility(self, s, a, target: bool = True) -> np.ndarray:
        nets = self.feasibility.q_target if target else self.feasibility.q
        x = self.sa(s, a)
        return np.maximum(nets[0](x)[:, 0], nets[1](x)[:, 0])

    def v_reward(self, s) -> np.ndarray:
        return self.reward.v(self.norm(s))[:, 0]

    def v_feasibility(self, s) -> np.ndarray:
        return self.feasibility.v(self.norm(s))[:, 0]


def _fit_v(v: Mlp, x_s: np.ndarray, q: np.ndarray, tau: float, reverse: bool, lr: float) -> float:
    pred, cache = v.forward(x_s)
    u = q - pred[:, 0]
    loss_fn = reversed_expectile_loss if reverse else expectile_loss
    loss = float(np.mean(loss_fn(u, tau)))
    dpred = (-_expectile_grad(u, tau, reverse) / len(u))[:, None]
    grads, _, _ = v.backward(cache, dpred)
    v.step(grads, lr)
    return loss


def _fit_q(qs: list[Mlp], x_sa: np.ndarray, target: np.ndarray, lr: float) -> float:
    total = 0.0
    for q in qs:
        pred, cache = q.forward(x_sa)
        diff = pred[:, 0] - target
        total += float(np.mean(diff * diff))
        grads, _, _ = q.backward(cache, (2.0 * diff / len(diff))[:, None])
        q.step(grads, lr)
    return total / len(qs)


def update_reward_critics(critics: CriticSet, s, a, r, s_next, cfg: ExpectileConfig, lr: float = 3e-4) -> dict:
    """One gradient step on the reward value (expectile) and Q (TD) losses."""
    r = np.asarray(r, dtype=np.float64)
    pair = critics.reward
    x_s = critics.norm(s)
    x_sa = critics.sa(s, a)
    q_t = critics.q_reward(s, a, target=True)
    loss_v = _fit_v(pair.v, x_s, q_t, cfg.tau, reverse=False, lr=lr)
    target = r + cfg.gamma * critics.v_reward(s_next)
    if not np.all(np.isfinite(target)):
        raise NonFiniteError("reward Q targets are not finite")
    loss_q = _fit_q(pair.q, x_sa, target, lr)
    for tq, q in zip(pair.q_target, pair.q):
        soft_update(tq, q, cfg.target_rate)
    critics.steps["reward"] += 1
    return {"v": loss_v, "q": loss_q}


def feasibility_target(h: np.ndarray, v_next: np.ndarray, gamma: float) -> np.ndarray:
    """(1 - gamma) h + gamma max(h, clip(V_h(s'), 0, 1))."""
    v_next = np.clip(v_next, 0.0, 1.0)
    return (1.0 - gamma) * h + gamma * np.maximum(h, v_next)


def update_feasibility_critics(critics: CriticSet, s, a, h, s_next, cfg: ExpectileConfig, lr: float = 3e-4) -> dict:
    """One gradient step on the feasibility value (reversed expectile) and Q losses."""
    h = np.asarray(h, dtype=np.float64)
    if not np.all((h == 0.0) | (h == 1.0)):
        raise ValueError("feasibility labels must be 0 or 1")
    pair = critics.feasibility
    q_t = critics.q_feasibility(s, a, target=True)
    loss_v = _fit_v(pair.v, critics.norm(s), q_t, cfg.tau, reverse=True, lr=lr)
    target = feasibility_target(h, critics.v_feasibility(s_next), cfg.gamma)
    if not np.all(np.isfinite(target)):
        raise NonFiniteError("feasibility Q targets are not finite")
    loss_q = _fit_q(pair.q, critics.sa(s, a), target, lr)
    for tq, q in zip(pair.q_target, pair.q):
        soft_update(tq, q, cfg.target_rate)
    critics.steps["feasibility"] += 1
    return {"v": loss_v, "q": loss_q}


def reward_advantage(critics: CriticSet, s, a) -> np.ndarray:
    return critics.q_reward(s, a) - critics.v_reward(s)


def feasibility_advantage(critics: CriticSet, s, a) -> np.ndarray:
    return critics.q_feasibility(s, a) - critics.v_feasibility(s)


def _exp_weight(adv: np.ndarray, temperature: float, clip: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"advantage temperature must be positive, got {temperature}")
    return np.clip(np.exp(np.minimum(temperature * adv, 50.0)), WEIGHT_FLOOR, clip)


def reward_weight(critics: CriticSet, s, a, clip: float = 100.0, temperature: float = 1.0) -> np.ndarray:
    """exp(beta A_r) clipped to [e^-10, clip]; beta = 1 is the plain form."""
    return _exp_weight(reward_advantage(critics, s, a), temperature, clip)


def safety_weight(critics: CriticSet, s, a, clip: float = 100.0, temperature: float = 1.0) -> np.ndarray:
    """exp(-beta A_h) clipped to [e^-10, clip]."""
    return _exp_weight(-feasibility_advantage(critics, s, a), temperature, clip)


def train_critics(
    critics: CriticSet,
    kind: str,
    s: np.ndarray,
    a: np.ndarray,
    label: np.ndarray,
    s_next: np.ndarray,
    cfg: ExpectileConfig,
    steps: int,
    lr: float,
    batch: int,
    rng: SeededRng,
) -> list[dict]:
    """Run ``steps`` minibatch updates of the reward or feasibility critics."""
    update = {"reward": update_reward_critics, "feasibility": update_feasibility_critics}[kind]
    n = len(s)
    if n == 0:
        raise ValueError("empty dataset")
    curve = []
    for _ in range(steps):
        idx = rng.choice(n, batch)
        curve.append(update(critics, s[idx], a[idx], label[idx], s_next[idx], cfg, lr))
    return curve
