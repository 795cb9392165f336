"""Small deterministic numeric substrate: MLPs with hand-written backprop,
low-rank additive weight terms, Adam, finite differences and seeded RNG.

Tensors are float64 numpy arrays. Networks use the row-vector convention
``z = h @ W + b`` so a weight matrix has shape ``(d_in, d_out)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ParamStore = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ShapeError(f"MlpSpec needs at least 2 dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ShapeError(f"MlpSpec dims must be >= 1, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def layer_shape(self, i: int) -> tuple[int, int]:
        return self.layer_dims[i], self.layer_dims[i + 1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.n_layers):
            shapes[f"W{i}"] = self.layer_shape(i)
            shapes[f"b{i}"] = (self.layer_dims[i + 1],)
        return shapes


def init_params(spec: MlpSpec, rng: "SeededRng") -> ParamStore:
    """Glorot-uniform weights, zero biases."""
    params: ParamStore = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_shape(i)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-limit, limit, (fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def check_params(spec: MlpSpec, params: ParamStore) -> None:
    for name, shape in spec.param_shapes().items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


@dataclass
class LowRankTerm:
    """Additive ``coef * (h @ B) @ A`` contribution to one linear layer.

    ``coef`` is a scalar or a per-row vector of length batch.
    """

    B: np.ndarray
    A: np.ndarray
    coef: float | np.ndarray = 1.0


@dataclass
class TermGrad:
    B: np.ndarray
    A: np.ndarray
    coef: np.ndarray


@dataclass
class ForwardCache:
    spec: MlpSpec
    param_ids: tuple[int, ...]
    squeeze: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    projected: list[list[np.ndarray]] = field(default_factory=list)
    terms: list[list[LowRankTerm]] = field(default_factory=list)


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"input has shape {x.shape}, expected (*, {dim})")
    return x, squeeze


def _coef_column(coef: float | np.ndarray, n: int) -> float | np.ndarray:
    if np.ndim(coef) == 0:
        return float(coef)
    c = np.asarray(coef, dtype=np.float64)
    if c.shape != (n,):
        raise ShapeError(f"per-row coefficient has shape {c.shape}, expected ({n},)")
    return c[:, None]


def mlp_forward(
    spec: MlpSpec,
    params: ParamStore,
    x: np.ndarray,
    terms: Sequence[Sequence[LowRankTerm]] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """ReLU hidden layers, identity output. ``terms[i]`` augments layer i."""
    check_params(spec, params)
    h, squeeze = _as_batch(x, spec.in_dim)
    if terms is not None and len(terms) != spec.n_layers:
        raise ShapeError(f"got low-rank terms for {len(terms)} layers, net has {spec.n_layers}")
    cache = ForwardCache(
        spec=spec,
        param_ids=tuple(id(params[k]) for k in spec.param_shapes()),
        squeeze=squeeze,
    )
    n = h.shape[0]
    for i in range(spec.n_layers):
        layer_terms = list(terms[i]) if terms is not None else []
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        projected = []
        for term in layer_terms:
            d_in, d_out = spec.layer_shape(i)
            if term.B.shape[0] != d_in or term.A.shape[1] != d_out or term.B.shape[1] != term.A.shape[0]:
                raise ShapeError(
                    f"layer {i}: low-rank factors {term.B.shape} x {term.A.shape} "
                    f"do not fit a ({d_in}, {d_out}) weight"
                )
            hb = h @ term.B
            projected.append(hb)
            z = z + _coef_column(term.coef, n) * (hb @ term.A)
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.projected.append(projected)
        cache.terms.append(layer_terms)
        h = np.maximum(z, 0.0) if i < spec.n_layers - 1 else z
    return (h[0] if squeeze else h), cache


def mlp_backward(
    spec: MlpSpec,
    params: ParamStore,
    cache: ForwardCache,
    output_grad: np.ndarray,
    param_grads: bool = True,
) -> tuple[ParamStore, np.ndarray, list[list[TermGrad]]]:
    """Backprop ``output_grad`` through the cached forward pass.

    Returns parameter grads (empty when ``param_grads`` is False), the input
    grad, and per-layer grads of the low-rank terms.
    """
    if cache.spec != spec or cache.param_ids != tuple(id(params[k]) for k in spec.param_shapes()):
        raise ShapeError("forward cache does not belong to these parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"output grad has shape {g.shape}, expected {cache.pre[-1].shape}")
    grads: ParamStore = {}
    term_grads: list[list[TermGrad]] = [[] for _ in range(spec.n_layers)]
    n = g.shape[0]
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            # subgradient 0 at z == 0
            g = g * (cache.pre[i] > 0.0)
        h = cache.inputs[i]
        W = params[f"W{i}"]
        if param_grads:
            grads[f"W{i}"] = h.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        dh = g @ W.T
        for term, hb in zip(cache.terms[i], cache.projected[i]):
            c = _coef_column(term.coef, n)
            cg = c * g
            u = hb @ term.A
            if np.ndim(term.coef) == 0:
                dcoef = np.asarray(np.sum(g * u))
            else:
                dcoef = np.sum(g * u, axis=1)
            gA = cg @ term.A.T
            term_grads[i].append(TermGrad(B=h.T @ gA, A=(hb.T @ cg), coef=dcoef))
            dh = dh + gA @ term.B.T
        g = dh
    if param_grads:
        grads = {k: grads[k] for k in spec.param_shapes()}
    return grads, (g[0] if cache.squeeze else g), term_grads


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_grad(f: Callable[[], float], params: ParamStore, step: float = 1e-5) -> ParamStore:
    """Central differences of ``f`` w.r.t. every entry of ``params`` (mutated and restored)."""
    out: ParamStore = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f()
            flat[j] = orig - step
            fm = f()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def max_rel_error(a: ParamStore | np.ndarray, b: ParamStore | np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    if isinstance(a, dict):
        return max((max_rel_error(a[k], b[k], floor) for k in a), default=0.0)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


class SeededRng:
    """Counter-based (Philox) stream; ``split`` derives reproducible substreams."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + (int(index),))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def normal(self, size) -> np.ndarray:
        """Standard normals by Box-Muller."""
        count = int(np.prod(size)) if np.ndim(size) else int(size)
        pairs = (count + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return z.reshape(size)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Indices drawn with replacement."""
        return self._gen.integers(0, n, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def copy_params(params: ParamStore) -> ParamStore:
    return {k: v.copy() for k, v in params.items()}


def params_digest(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Mlp:
    """A network bundled with its parameters and (lazily) an optimizer state."""

    spec: MlpSpec
    params: ParamStore
    opt: AdamState | None = None

    @classmethod
    def create(cls, dims: Sequence[int], rng: SeededRng, zero_head: bool = False) -> "Mlp":
        spec = MlpSpec(tuple(dims))
        params = init_params(spec, rng)
        if zero_head:
            last = spec.n_layers - 1
            params[f"W{last}"][:] = 0.0
        return cls(spec, params)

    def forward(self, x, terms=None):
        return mlp_forward(self.spec, self.params, x, terms)

    def backward(self, cache: ForwardCache, output_grad, param_grads: bool = True):
        return mlp_backward(self.spec, self.params, cache, output_grad, param_grads)

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.params, x)[0]

    def step(self, grads: ParamStore, lr: float) -> None:
        if self.opt is None:
            self.opt = AdamState.for_params(self.params)
        adam_step(self.params, grads, self.opt, lr)

    def clone(self) -> "Mlp":
        return Mlp(self.spec, copy_params(self.params))
