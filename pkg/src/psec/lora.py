"""Low-rank adapters over a frozen noise predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import (
    DiffusionSchedule,
    NoisePredictor,
    TrainCurve,
    draw_noise_batch,
    weighted_noise_error,
)
from .numcore import (
    AdamState,
    LowRankTerm,
    MlpSpec,
    NonFiniteError,
    SeededRng,
    ShapeError,
    adam_step,
    mlp_backward,
    params_digest,
)

DEFAULT_RANK = 8
DEFAULT_SCALE = 16.0


@dataclass
class LoraAdapter:
    """Per-layer factors; layer i contributes ``h @ B[i] @ A[i]``."""

    B: list[np.ndarray]
    A: list[np.ndarray]
    rank: int
    scale: float = DEFAULT_SCALE

    def layer_ranks(self) -> list[int]:
        return [b.shape[1] for b in self.B]

    def delta(self, i: int) -> np.ndarray:
        return self.B[i] @ self.A[i]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (b, a) in enumerate(zip(self.B, self.A)):
            out[f"B{i}"] = b
            out[f"A{i}"] = a
        return out

    def copy(self) -> "LoraAdapter":
        return LoraAdapter([b.copy() for b in self.B], [a.copy() for a in self.A], self.rank, self.scale)

    def check_fits(self, spec: MlpSpec) -> None:
        if len(self.B) != spec.n_layers:
            raise ShapeError(f"adapter has {len(self.B)} layers, network has {spec.n_layers}")
        for i, (b, a) in enumerate(zip(self.B, self.A)):
            d_in, d_out = spec.layer_shape(i)
            if b.shape[0] != d_in or a.shape[1] != d_out or b.shape[1] != a.shape[0]:
                raise ShapeError(
                    f"adapter layer {i} factors {b.shape} x {a.shape} do not fit ({d_in}, {d_out})"
                )


def init_adapter(spec: MlpSpec, rank: int, rng: SeededRng, scale: float = DEFAULT_SCALE) -> LoraAdapter:
    """Zero B, Gaussian A with std 1/sqrt(rank); every linear layer adapted.

    Layers narrower than ``rank`` get rank ``min(d_in, d_out)``.
    """
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    widest = max(min(spec.layer_shape(i)) for i in range(spec.n_layers))
    if rank > widest:
        raise ValueError(f"LoRA rank {rank} exceeds every layer's min dimension (max {widest})")
    Bs, As = [], []
    for i in range(spec.n_layers):
        d_in, d_out = spec.layer_shape(i)
        r = min(rank, d_in, d_out)
        Bs.append(np.zeros((d_in, r)))
        As.append(rng.normal((r, d_out)) / math.sqrt(r))
    return LoraAdapter(Bs, As, rank, float(scale))


def lora_forward(W0: np.ndarray, B: np.ndarray, A: np.ndarray, alpha: float, h_in: np.ndarray) -> np.ndarray:
    """``h_in @ W0 + alpha * (h_in @ B) @ A`` without forming ``B @ A``."""
    if W0.shape != (B.shape[0], A.shape[1]) or B.shape[1] != A.shape[0]:
        raise ShapeError(f"W0 {W0.shape} incompatible with B {B.shape} and A {A.shape}")
    if np.shape(h_in)[-1] != W0.shape[0]:
        raise ShapeError(f"input width {np.shape(h_in)[-1]} != {W0.shape[0]}")
    return h_in @ W0 + alpha * ((h_in @ B) @ A)


def adapter_terms(
    spec: MlpSpec,
    adapters: Sequence[LoraAdapter],
    coefs: Sequence[float | np.ndarray],
) -> list[list[LowRankTerm]]:
    """Per-layer low-rank terms for ``W0 + sum_i coef_i B_i A_i``."""
    if len(adapters) != len(coefs):
        raise ShapeError(f"{len(adapters)} adapters but {len(coefs)} coefficients")
    for ad in adapters:
        ad.check_fits(spec)
    return [
        [LowRankTerm(ad.B[i], ad.A[i], c) for ad, c in zip(adapters, coefs)]
        for i in range(spec.n_layers)
    ]


@dataclass
class AdaptedPredictor:
    """Frozen base plus (adapter, blend) pairs evaluated low-rank-first."""

    base: NoisePredictor
    adapters: list[tuple[LoraAdapter, float]] = field(default_factory=list)

    @property
    def action_dim(self) -> int:
        return self.base.action_dim

    def terms(self):
        return adapter_terms(self.base.spec, [a for a, _ in self.adapters], [c for _, c in self.adapters])

    def forward(self, a_t, t, s):
        return self.base.forward(a_t, t, s, self.terms())

    def __call__(self, a_t, t, s) -> np.ndarray:
        return self.forward(a_t, t, s)[0]


def skill_predictor(base: NoisePredictor, adapter: LoraAdapter) -> AdaptedPredictor:
    """The skill's own policy network, W0 + scale * B A."""
    return AdaptedPredictor(base, [(adapter, adapter.scale)])


def merge_static(base: NoisePredictor, adapters: Sequence[LoraAdapter], alphas: Sequence[float]) -> NoisePredictor:
    """Materialize ``W0 + sum_i alphas[i] * scale_i * B_i A_i`` into a standalone predictor."""
    if len(adapters) != len(alphas):
        raise ShapeError(f"{len(adapters)} adapters but {len(alphas)} alphas")
    params = {k: v.copy() for k, v in base.params.items()}
    for ad in adapters:
        ad.check_fits(base.spec)
    for i in range(base.spec.n_layers):
        for ad, alpha in zip(adapters, alphas):
            if alpha != 0.0:
                params[f"W{i}"] += (alpha * ad.scale) * ad.delta(i)
    return NoisePredictor(
        state_dim=base.state_dim,
        action_dim=base.action_dim,
        T=base.T,
        spec=base.spec,
        params=params,
        state_mean=base.state_mean.copy(),
        state_std=base.state_std.copy(),
    )


def adapter_loss_and_grads(
    base: NoisePredictor,
    adapter: LoraAdapter,
    states: np.ndarray,
    noise,
    weights: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted denoising loss through ``W0 + scale * B A``; grads for B, A only."""
    terms = adapter_terms(base.spec, [adapter], [adapter.scale])
    pred, cache = base.forward(noise.a_t, noise.t, states, terms)
    loss, dpred = weighted_noise_error(noise.eps, pred, weights)
    _, _, tgrads = mlp_backward(base.spec, base.params, cache, dpred, param_grads=False)
    grads = {}
    for i, layer in enumerate(tgrads):
        grads[f"B{i}"] = layer[0].B
        grads[f"A{i}"] = layer[0].A
    return loss, grads


def train_skill(
    base: NoisePredictor,
    adapter: LoraAdapter,
    sched: DiffusionSchedule,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray | None,
    steps: int,
    lr: float,
    batch: int,
    rng: SeededRng,
) -> tuple[LoraAdapter, TrainCurve]:
    """Fit a copy of ``adapter`` on the weighted denoising loss; the base stays frozen."""
    n = len(states)
    if n == 0:
        raise ValueError("empty dataset")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    adapter = adapter.copy()
    params = adapter.params()
    opt = AdamState.for_params(params)
    base_hash = params_digest(base.params)
    curve = []
    for step in range(steps):
        idx = rng.choice(n, batch)
        noise = draw_noise_batch(sched, actions[idx], rng)
        loss, grads = adapter_loss_and_grads(base, adapter, states[idx], noise, w[idx])
        if not math.isfinite(loss):
            raise NonFiniteError(f"skill training diverged at step {step}: loss={loss}")
        adam_step(params, grads, opt, lr)
        curve.append(loss)
    if params_digest(base.params) != base_hash:
        raise RuntimeError("base predictor was modified during adapter training")
    return adapter, TrainCurve(curve)
