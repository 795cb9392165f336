"""Skill composition: state-conditioned weights over a library of adapters,
blended in parameter space, noise space or action space."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    NoiseBatch,
    NoisePredictor,
    TrainCurve,
    draw_noise_batch,
    sample_action,
    weighted_noise_error,
)
from .envs import TrajectoryDataset
from .lora import LoraAdapter, adapter_terms, merge_static, skill_predictor
from .numcore import Mlp, SeededRng, ShapeError, mlp_backward, params_digest


class Mode(str, Enum):
    PARAMETER = "parameter"
    NOISE = "noise"
    ACTION = "action"
    FIXED = "fixed"


@dataclass
class CompositionNet:
    """alpha(s) in R^k from normalized states; zero head so training starts at the base."""

    net: Mlp
    state_mean: np.ndarray
    state_std: np.ndarray

    @classmethod
    def create(cls, state_dim: int, k: int, rng: SeededRng, hidden=(256, 256), state_mean=None, state_std=None):
        if k < 1:
            raise ValueError("composition needs at least one skill")
        return cls(
            net=Mlp.create((state_dim, *hidden, k), rng, zero_head=True),
            state_mean=np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, float),
            state_std=np.ones(state_dim) if state_std is None else np.asarray(state_std, float),
        )

    @property
    def k(self) -> int:
        return self.net.spec.out_dim

    def norm(self, s) -> np.ndarray:
        return (np.atleast_2d(np.asarray(s, float)) - self.state_mean) / self.state_std

    def forward(self, s):
        return self.net.forward(self.norm(s))


def alpha_forward(net: CompositionNet, s) -> np.ndarray:
    out = net.forward(s)[0]
    return out[0] if np.ndim(s) == 1 else out


def _alpha_matrix(alphas, n: int, k: int) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim == 1:
        a = np.broadcast_to(a, (n, a.shape[0]))
    if a.shape != (n, k):
        raise ShapeError(f"alphas have shape {a.shape}, expected ({n}, {k})")
    return a


def _parameter_terms(base: NoisePredictor, skills: Sequence[LoraAdapter], alphas: np.ndarray, raw: bool):
    coefs = [alphas[:, i] * (1.0 if raw else sk.scale) for i, sk in enumerate(skills)]
    return adapter_terms(base.spec, skills, coefs)


def composed_noise_parameter(base, skills, alphas, a_t, t, s, raw_delta: bool = False) -> np.ndarray:
    """eps through per-row weights W0 + sum_i alpha_i * scale_i * B_i A_i."""
    a_t2 = np.atleast_2d(a_t)
    n = a_t2.shape[0]
    al = _alpha_matrix(alphas, n, len(skills))
    out = base.forward(a_t2, t, s, _parameter_terms(base, skills, al, raw_delta))[0]
    return out[0] if np.ndim(a_t) == 1 else out


def composed_noise_noise_level(base, skills, alphas, a_t, t, s) -> np.ndarray:
    """eps_0 + sum_i alpha_i * eps_i with eps_i from each fully adapted skill network."""
    a_t2 = np.atleast_2d(a_t)
    n = a_t2.shape[0]
    al = _alpha_matrix(alphas, n, len(skills))
    out = base(a_t2, t, s)
    for i, sk in enumerate(skills):
        out = out + al[:, i : i + 1] * skill_predictor(base, sk)(a_t2, t, s)
    return out[0] if np.ndim(a_t) == 1 else out


def composed_action_action_level(base, skills, alphas, sched: DiffusionSchedule, s, rng, clamp: bool = True) -> np.ndarray:
    """a_0 + sum_i alpha_i a_i; each a_j sampled in turn from the same stream."""
    s2 = np.atleast_2d(s)
    al = _alpha_matrix(alphas, s2.shape[0], len(skills))
    a = sample_action(base, s2, sched, rng, clamp=False)
    for i, sk in enumerate(skills):
        a = a + al[:, i : i + 1] * sample_action(skill_predictor(base, sk), s2, sched, rng, clamp=False)
    if clamp:
        a = np.clip(a, -1.0, 1.0)
    return a[0] if np.ndim(s) == 1 else a


@dataclass
class ComposedPolicy:
    base: NoisePredictor
    skills: list[LoraAdapter]
    mode: Mode
    composer: CompositionNet | None = None
    fixed_alphas: np.ndarray | None = None
    raw_delta: bool = False

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.mode is Mode.FIXED:
            if self.fixed_alphas is None:
                self.fixed_alphas = np.zeros(len(self.skills))
            self.fixed_alphas = np.asarray(self.fixed_alphas, dtype=np.float64)
            if self.fixed_alphas.shape != (len(self.skills),):
                raise ShapeError(f"need {len(self.skills)} fixed alphas, got {self.fixed_alphas.shape}")
        elif self.composer is None:
            raise ValueError(f"mode {self.mode.value} needs a composition network")
        elif self.composer.k != len(self.skills):
            raise ShapeError(f"composer emits {self.composer.k} weights for {len(self.skills)} skills")

    @property
    def action_dim(self) -> int:
        return self.base.action_dim

    def alphas(self, s) -> np.ndarray:
        s2 = np.atleast_2d(s)
        if self.mode is Mode.FIXED:
            return np.broadcast_to(self.fixed_alphas, (s2.shape[0], len(self.skills))).copy()
        return self.composer.forward(s2)[0]

    def library_digest(self) -> str:
        h = hashlib.sha256(params_digest(self.base.params).encode())
        for sk in self.skills:
            h.update(params_digest(sk.params()).encode())
        return h.hexdigest()

    def sample(self, s, sched: DiffusionSchedule, rng, clamp: bool = True) -> np.ndarray:
        s2 = np.atleast_2d(s)
        al = self.alphas(s2)
        if self.mode is Mode.ACTION:
            out = composed_action_action_level(self.base, self.skills, al, sched, s2, rng, clamp)
        elif self.mode is Mode.NOISE:
            eps_fn = _EpsFn(lambda a, t, st: composed_noise_noise_level(self.base, self.skills, al, a, t, st), self.action_dim)
            out = sample_action(eps_fn, s2, sched, rng, clamp)
        else:
            if self.mode is Mode.FIXED:
                coefs = al[0] / np.array([sk.scale for sk in self.skills]) if self.raw_delta else al[0]
                net = merge_static(self.base, self.skills, coefs)
                out = sample_action(net, s2, sched, rng, clamp)
            else:
                eps_fn = _EpsFn(
                    lambda a, t, st: composed_noise_parameter(self.base, self.skills, al, a, t, st, self.raw_delta),
                    self.action_dim,
                )
                out = sample_action(eps_fn, s2, sched, rng, clamp)
        return out[0] if np.ndim(s) == 1 else out


@dataclass
class _EpsFn:
    fn: object
    action_dim: int

    def __call__(self, a_t, t, s):
        return self.fn(a_t, t, s)


def composer_loss_and_grads(
    policy: ComposedPolicy,
    sched: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    noise: NoiseBatch,
    sampled: list[np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Unit-weight denoising loss under the policy's composition; grads for the composer only.

    For action-level composition ``sampled`` holds the per-predictor actions
    [a_0, a_1, ..., a_k] (treated as constants) and the composed action is
    scored through its implied noise (a_t - sqrt(rho_bar) a) / sqrt(1 - rho_bar).
    """
    if policy.mode is Mode.FIXED:
        raise ValueError("fixed-weight composition has nothing to train")
    comp = policy.composer
    base, skills = policy.base, policy.skills
    n = len(states)
    al, ccache = comp.forward(states)
    weights = np.ones(n)
    if policy.mode is Mode.PARAMETER:
        terms = _parameter_terms(base, skills, al, policy.raw_delta)
        pred, cache = base.forward(noise.a_t, noise.t, states, terms)
        loss, dpred = weighted_noise_error(noise.eps, pred, weights)
        _, _, tgrads = base_backward(base, cache, dpred)
        dal = np.zeros_like(al)
        for layer in tgrads:
            for i, g in enumerate(layer):
                dal[:, i] += g.coef * (1.0 if policy.raw_delta else skills[i].scale)
    elif policy.mode is Mode.NOISE:
        eps_i = [skill_predictor(base, sk)(noise.a_t, noise.t, states) for sk in skills]
        pred = base(noise.a_t, noise.t, states)
        for i, e in enumerate(eps_i):
            pred = pred + al[:, i : i + 1] * e
        loss, dpred = weighted_noise_error(noise.eps, pred, weights)
        dal = np.stack([np.sum(dpred * e, axis=1) for e in eps_i], axis=1)
    else:
        if sampled is None or len(sampled) != len(skills) + 1:
            raise ValueError("action-level training needs one sampled action per predictor")
        rb = sched.rho_bar[noise.t - 1][:, None]
        a_hat = sampled[0] + sum(al[:, i : i + 1] * sampled[i + 1] for i in range(len(skills)))
        pred = (noise.a_t - np.sqrt(rb) * a_hat) / np.sqrt(1.0 - rb)
        loss, dpred = weighted_noise_error(noise.eps, pred, weights)
        da_hat = -np.sqrt(rb) / np.sqrt(1.0 - rb) * dpred
        dal = np.stack([np.sum(da_hat * sampled[i + 1], axis=1) for i in range(len(skills))], axis=1)
    grads, _, _ = comp.net.backward(ccache, dal)
    return loss, grads


def base_backward(base: NoisePredictor, cache, dpred):
    return mlp_backward(base.spec, base.params, cache, dpred, param_grads=False)


def sample_skill_actions(policy: ComposedPolicy, sched: DiffusionSchedule, states: np.ndarray, rng) -> list[np.ndarray]:
    out = [sample_action(policy.base, states, sched, rng, clamp=False)]
    for sk in policy.skills:
        out.append(sample_action(skill_predictor(policy.base, sk), states, sched, rng, clamp=False))
    return out


def train_composer(
    policy: ComposedPolicy,
    sched: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    steps: int,
    lr: float,
    batch: int,
    rng: SeededRng,
) -> TrainCurve:
    """Fit the composer in place; base and skills stay frozen."""
    if policy.mode is Mode.FIXED:
        raise ValueError("fixed-weight composition has nothing to train")
    n = len(states)
    if n == 0:
        raise ValueError("empty dataset")
    digest = policy.library_digest()
    curve = []
    for _ in range(steps):
        idx = rng.choice(n, batch)
        noise = draw_noise_batch(sched, actions[idx], rng)
        sampled = sample_skill_actions(policy, sched, states[idx], rng) if policy.mode is Mode.ACTION else None
        loss, grads = composer_loss_and_grads(policy, sched, states[idx], actions[idx], noise, sampled)
        policy.composer.net.step(grads, lr)
        curve.append(loss)
    if policy.library_digest() != digest:
        raise RuntimeError("composition training modified the frozen library")
    return TrainCurve(curve)


def composer_eval_loss(policy: ComposedPolicy, sched, states, actions, rng: SeededRng, batch: int = 4096) -> float:
    """Denoising loss on a fixed noise draw; comparable across composer states for the same rng seed."""
    idx = np.arange(len(states)) if len(states) <= batch else rng.choice(len(states), batch)
    noise = draw_noise_batch(sched, actions[idx], rng)
    sampled = sample_skill_actions(policy, sched, states[idx], rng) if policy.mode is Mode.ACTION else None
    return composer_loss_and_grads(policy, sched, states[idx], actions[idx], noise, sampled)[0]


@dataclass
class FilterResult:
    dataset: TrajectoryDataset
    episodes: list[int]
    warnings: list[str] = field(default_factory=list)


def filter_top_trajectories(dataset: TrajectoryDataset, K: int = 30, cost_ceiling: float = 5.0) -> FilterResult:
    """Keep episodes with total cost below the ceiling, then the K highest returns."""
    returns = dataset.episode_returns()
    costs = dataset.episode_costs()
    qualifying = [ep for ep in sorted(returns) if costs[ep] < cost_ceiling]
    # stable sort keeps earlier episodes first among ties
    ranked = sorted(qualifying, key=lambda ep: -returns[ep])
    keep = ranked[:K]
    warnings = []
    if len(qualifying) < K:
        warnings.append(f"only {len(qualifying)} episodes have cost < {cost_ceiling}; wanted {K}")
    return FilterResult(dataset.select_episodes(keep), keep, warnings)


def alpha_trace_rows(policy: ComposedPolicy, states: np.ndarray) -> list[list[float]]:
    """Rows of (step, state..., alpha_1..alpha_k) for alpha-trace CSVs."""
    al = policy.alphas(states)
    return [[i, *map(float, s), *map(float, a)] for i, (s, a) in enumerate(zip(states, al))]
