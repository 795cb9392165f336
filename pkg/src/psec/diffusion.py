"""Denoising-diffusion policy: schedule, forward noising, weighted loss, sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .numcore import (
    AdamState,
    LowRankTerm,
    MlpSpec,
    NonFiniteError,
    ParamStore,
    SeededRng,
    ShapeError,
    adam_step,
    init_params,
    mlp_backward,
    mlp_forward,
)

TIME_EMBED_DIM = 16
WEIGHT_FLOOR = math.exp(-10.0)


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    rho: np.ndarray
    rho_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    # 1-based accessors so call sites read like the math
    def b(self, t: int) -> float:
        return float(self.beta[t - 1])

    def r(self, t: int) -> float:
        return float(self.rho[t - 1])

    def rb(self, t: int) -> float:
        return float(self.rho_bar[t - 1])


def build_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine variance-preserving schedule with ``T`` steps."""
    if T < 1:
        raise ValueError(f"diffusion needs T >= 1, got {T}")

    def f(t: float) -> float:
        return math.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0.0)
    target = [f(t) / f0 for t in range(T + 1)]
    beta = np.array([min(1.0 - target[t] / target[t - 1], max_beta) for t in range(1, T + 1)])
    rho = 1.0 - beta
    return DiffusionSchedule(beta=beta, rho=rho, rho_bar=np.cumprod(rho))


def _check_t(sched: DiffusionSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"diffusion step out of range 1..{sched.T}: {t}")
    return t


def forward_noise(sched: DiffusionSchedule, a0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Closed-form q(a_t | a_0). ``t`` may be a scalar or one step per row."""
    t = _check_t(sched, t)
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ShapeError(f"action {a0.shape} and noise {eps.shape} differ in shape")
    rb = sched.rho_bar[t - 1]
    if np.ndim(rb):
        rb = rb[:, None]
    return np.sqrt(rb) * a0 + np.sqrt(1.0 - rb) * eps


def time_embedding(t, T: int) -> np.ndarray:
    """Sinusoidal features of t/T, shape (n, 16)."""
    x = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(TIME_EMBED_DIM // 2)
    ang = x[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class NoisePredictor:
    """Conditional noise network eps(a_t, t, s) on concat(norm(s), a_t, emb(t))."""

    state_dim: int
    action_dim: int
    T: int
    spec: MlpSpec
    params: ParamStore
    state_mean: np.ndarray
    state_std: np.ndarray

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        T: int,
        hidden: Sequence[int],
        rng: SeededRng,
        state_mean: np.ndarray | None = None,
        state_std: np.ndarray | None = None,
    ) -> "NoisePredictor":
        spec = MlpSpec((state_dim + action_dim + TIME_EMBED_DIM, *hidden, action_dim))
        return cls(
            state_dim=state_dim,
            action_dim=action_dim,
            T=T,
            spec=spec,
            params=init_params(spec, rng),
            state_mean=np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, float),
            state_std=np.ones(state_dim) if state_std is None else np.asarray(state_std, float),
        )

    def inputs(self, a_t: np.ndarray, t, s: np.ndarray) -> np.ndarray:
        a_t = np.atleast_2d(a_t)
        s = np.atleast_2d(s)
        n = a_t.shape[0]
        if s.shape != (n, self.state_dim) or a_t.shape[1] != self.action_dim:
            raise ShapeError(
                f"states {s.shape} / noisy actions {a_t.shape} do not match "
                f"state_dim={self.state_dim}, action_dim={self.action_dim}"
            )
        t = np.broadcast_to(np.asarray(t), (n,))
        sn = (s - self.state_mean) / self.state_std
        return np.concatenate([sn, a_t, time_embedding(t, self.T)], axis=1)

    def forward(self, a_t, t, s, terms: Sequence[Sequence[LowRankTerm]] | None = None):
        return mlp_forward(self.spec, self.params, self.inputs(a_t, t, s), terms)

    def __call__(self, a_t, t, s) -> np.ndarray:
        return self.forward(a_t, t, s)[0]


EpsFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class WeightKind(str, Enum):
    UNIT = "unit"
    REWARD = "reward"
    SAFETY = "safety"


def clip_weights(w: np.ndarray, clip: float = 100.0) -> np.ndarray:
    return np.clip(w, WEIGHT_FLOOR, clip)


@dataclass
class NoiseBatch:
    t: np.ndarray
    eps: np.ndarray
    a_t: np.ndarray


def draw_noise_batch(sched: DiffusionSchedule, actions: np.ndarray, rng: SeededRng) -> NoiseBatch:
    n, d = actions.shape
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.normal((n, d))
    return NoiseBatch(t=t, eps=eps, a_t=forward_noise(sched, actions, t, eps))


def weighted_noise_error(eps: np.ndarray, pred: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """mean_i w_i ||eps_i - pred_i||^2 and its gradient w.r.t. ``pred``."""
    n = eps.shape[0]
    diff = pred - eps
    loss = float(np.mean(weights * np.sum(diff * diff, axis=1)))
    if not math.isfinite(loss):
        raise NonFiniteError(f"denoising loss is not finite ({loss})")
    return loss, (2.0 / n) * weights[:, None] * diff


def diffusion_loss(
    predictor: NoisePredictor,
    sched: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
    rng: SeededRng,
    noise: NoiseBatch | None = None,
) -> tuple[float, ParamStore]:
    """Weighted denoising loss and gradients for the predictor's params."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("denoising weights must be non-negative")
    nb = noise if noise is not None else draw_noise_batch(sched, actions, rng)
    pred, cache = predictor.forward(nb.a_t, nb.t, states)
    loss, dpred = weighted_noise_error(nb.eps, pred, weights)
    grads, _, _ = mlp_backward(predictor.spec, predictor.params, cache, dpred)
    return loss, grads


def _eps_fn(predictor) -> EpsFn:
    if isinstance(predictor, NoisePredictor):
        return predictor.__call__
    return predictor


def sample_action(predictor, s: np.ndarray, sched: DiffusionSchedule, rng, clamp: bool = True) -> np.ndarray:
    """Reverse process from a_T ~ N(0, I); deterministic final step.

    ``predictor`` is a NoisePredictor or any ``eps(a_t, t, s)`` callable;
    ``rng`` only needs a ``normal(size)`` method.
    """
    eps_fn = _eps_fn(predictor)
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    n = s2.shape[0]
    action_dim = predictor.action_dim if isinstance(predictor, NoisePredictor) else getattr(predictor, "action_dim")
    a = rng.normal((n, action_dim))
    for t in range(sched.T, 0, -1):
        eps = eps_fn(a, np.full(n, t), s2)
        coef = sched.b(t) / math.sqrt(1.0 - sched.rb(t))
        mean = (a - coef * eps) / math.sqrt(sched.r(t))
        if t > 1:
            a = mean + math.sqrt(sched.b(t)) * rng.normal((n, action_dim))
        else:
            a = mean
    if clamp:
        a = np.clip(a, -1.0, 1.0)
    return a[0] if single else a


@dataclass
class TrainCurve:
    losses: list[float]

    def moving_average(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x.copy()
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def train_predictor(
    predictor: NoisePredictor,
    sched: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray | None,
    steps: int,
    lr: float,
    batch: int,
    rng: SeededRng,
    log_every: int = 1,
) -> TrainCurve:
    """Full-parameter training of the predictor on the weighted denoising loss."""
    n = len(states)
    if n == 0:
        raise ValueError("empty dataset")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    opt = AdamState.for_params(predictor.params)
    curve: list[float] = []
    for step in range(steps):
        idx = rng.choice(n, batch)
        loss, grads = diffusion_loss(predictor, sched, states[idx], actions[idx], w[idx], rng)
        adam_step(predictor.params, grads, opt, lr)
        if step % log_every == 0:
            curve.append(loss)
    return TrainCurve(curve)
