"""Pipelines behind the CLI verbs.

Every ``cmd_*`` takes a resolved RunConfig, reads and writes files named
there, and returns a RunReport that it has also written under ``cfg.out``.
"""

from __future__ import annotations

import hashlib
import time
import zlib
from pathlib import Path

import numpy as np

from ..compose import ComposedPolicy, CompositionNet, Mode, alpha_trace_rows, filter_top_trajectories, train_composer
from ..critics import CriticPair, CriticSet, ExpectileConfig, reward_weight, safety_weight, train_critics
from ..diffusion import NoisePredictor, build_schedule, forward_noise, sample_action, train_predictor
from ..envs import ACTION_DIM, STATE_DIM, TrajectoryDataset, evaluate_policy, generate_dataset, get_task
from ..lora import init_adapter, skill_predictor, train_skill
from ..numcore import Mlp, MlpSpec, SeededRng
from ..skills import (
    Artifact,
    SkillEntry,
    SkillLibrary,
    add_skill,
    library_hashes,
    load_library,
    save_library,
)
from .config import RunConfig
from .report import RunReport, write_csv

# rng substreams per phase
_PRETRAIN, _SKILL, _CRITIC, _COMPOSER, _FEATURES = 1, 2, 3, 4, 6
EVAL_SEED_OFFSET = 1000


class PipelineError(RuntimeError):
    pass


def _rng(cfg: RunConfig, phase: int, *more: int) -> SeededRng:
    r = SeededRng(cfg.seed).split(phase)
    for i in more:
        r = r.split(i)
    return r


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def _tail(losses, n: int = 50):
    return float(np.mean(losses[-n:])) if len(losses) else None


def _head(losses, n: int = 20):
    return float(np.mean(losses[:n])) if len(losses) else None


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(path: str | Path) -> TrajectoryDataset:
    p = Path(path)
    if not p.exists():
        raise PipelineError(f"dataset {p} does not exist")
    ds = TrajectoryDataset.load(p)
    if len(ds) == 0:
        raise PipelineError(f"dataset {p} is empty")
    if ds.state_mean is None:
        ds.compute_stats()
    return ds


def _finish(cfg: RunConfig, command: str, t0: float, **kw) -> RunReport:
    lib = Path(cfg.library)
    hashes = library_hashes(lib) if (lib / "manifest.json").exists() else {}
    rep = RunReport(command=command, config=cfg.to_dict(), library=hashes, wall_time=round(time.time() - t0, 3), **kw)
    rep.write(Path(cfg.out) / f"{command}.json")
    return rep


# --- artifact conversion -------------------------------------------------------


def _mlp_tensors(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in net.params.items()}


def _mlp_from(prefix: str, t: dict, dims) -> Mlp:
    spec = MlpSpec(tuple(dims))
    return Mlp(spec, {k: t[f"{prefix}.{k}"].copy() for k in spec.param_shapes()})


def critics_artifact(name: str, cr: CriticSet, meta: dict) -> Artifact:
    t = {"state_mean": cr.state_mean, "state_std": cr.state_std}
    for kind in ("reward", "feasibility"):
        pair = getattr(cr, kind)
        for i in range(2):
            t.update(_mlp_tensors(f"{kind}.q{i}", pair.q[i]))
            t.update(_mlp_tensors(f"{kind}.qt{i}", pair.q_target[i]))
        t.update(_mlp_tensors(f"{kind}.v", pair.v))
    meta = {**meta, "q_dims": list(cr.reward.q[0].spec.layer_dims), "v_dims": list(cr.reward.v.spec.layer_dims)}
    return Artifact(name, "critic", t, meta)


def critics_from_artifact(art: Artifact) -> CriticSet:
    t, m = art.tensors, art.meta
    pairs = {}
    for kind in ("reward", "feasibility"):
        pairs[kind] = CriticPair(
            q=[_mlp_from(f"{kind}.q{i}", t, m["q_dims"]) for i in range(2)],
            q_target=[_mlp_from(f"{kind}.qt{i}", t, m["q_dims"]) for i in range(2)],
            v=_mlp_from(f"{kind}.v", t, m["v_dims"]),
        )
    return CriticSet(STATE_DIM, ACTION_DIM, pairs["reward"], pairs["feasibility"], t["state_mean"].copy(), t["state_std"].copy())


def composer_artifact(name: str, comp: CompositionNet, skills, mode: str) -> Artifact:
    t = {"state_mean": comp.state_mean, "state_std": comp.state_std, **_mlp_tensors("net", comp.net)}
    return Artifact(name, "composer", t, {"skills": list(skills), "mode": mode, "layer_dims": list(comp.net.spec.layer_dims)})


def composer_from_artifact(art: Artifact) -> CompositionNet:
    t = art.tensors
    return CompositionNet(_mlp_from("net", t, art.meta["layer_dims"]), t["state_mean"].copy(), t["state_std"].copy())


# --- shared building blocks ----------------------------------------------------


def skill_weights(cfg: RunConfig, cr: CriticSet | None, weighting: str, data: TrajectoryDataset) -> np.ndarray | None:
    if weighting == "bc":
        return None
    fn = reward_weight if weighting == "reward" else safety_weight
    return fn(cr, data.s, data.a, clip=cfg.clip, temperature=cfg.adv_temperature)


def fit_critics(cfg: RunConfig, data: TrajectoryDataset, weighting: str, key: int) -> tuple[CriticSet, list[dict]]:
    s, a, r, _, s_next, h = data.transitions()
    if len(s) == 0:
        raise PipelineError("dataset has no transitions with a recorded successor")
    rng = _rng(cfg, _CRITIC, key)
    cr = CriticSet.create(STATE_DIM, ACTION_DIM, cfg.critic_hidden, rng.split(0), data.state_mean, data.state_std)
    ecfg = ExpectileConfig(cfg.tau, cfg.gamma, cfg.target_rate)
    kind, label = ("reward", r) if weighting == "reward" else ("feasibility", h)
    curve = train_critics(cr, kind, s, a, label, s_next, ecfg, cfg.critic_steps, cfg.critic_lr, cfg.batch, rng.split(1))
    return cr, curve


def fit_skill(cfg: RunConfig, lib: SkillLibrary, data: TrajectoryDataset, name: str, weighting: str, rank: int, critics=None):
    """Train (critics if needed and) one adapter. Returns (entry, critics, phases)."""
    key = _name_key(name)
    phases: dict[str, list[float]] = {}
    if weighting != "bc" and critics is None:
        critics, curve = fit_critics(cfg, data, weighting, key)
        phases["critic_v"] = [c["v"] for c in curve]
        phases["critic_q"] = [c["q"] for c in curve]
    w = skill_weights(cfg, critics, weighting, data)
    sched = build_schedule(cfg.T)
    rng = _rng(cfg, _SKILL, key, rank)
    ad = init_adapter(lib.base.spec, rank, rng.split(0), cfg.scale)
    ad, curve = train_skill(lib.base, ad, sched, data.s, data.a, w, cfg.skill_steps, cfg.skill_lr, cfg.batch, rng.split(1))
    phases["skill"] = list(curve.losses)
    provenance = {
        "dataset": str(cfg.dataset),
        "dataset_sha256": file_sha256(cfg.dataset),
        "weighting": weighting,
        "steps": cfg.skill_steps,
        "seed": cfg.seed,
        "final_loss": _tail(curve.losses),
        "rank": rank,
        "lr": cfg.skill_lr,
        "adv_temperature": cfg.adv_temperature,
    }
    return SkillEntry(name, ad, provenance), critics, phases


def resolve_skills(cfg: RunConfig, lib: SkillLibrary) -> list[str]:
    names = list(cfg.skills) if cfg.skills else lib.names()
    for n in names:
        if n not in lib.names():
            raise PipelineError(f"unknown skill {n!r}; library has {lib.names()}")
    return names


def composer_data(cfg: RunConfig, data: TrajectoryDataset) -> tuple[TrajectoryDataset, list[str]]:
    if cfg.filter_top <= 0:
        return data, []
    res = filter_top_trajectories(data, cfg.filter_top, cfg.cost_ceiling)
    if len(res.dataset) == 0:
        raise PipelineError(f"no episode has cost below {cfg.cost_ceiling}")
    return res.dataset, res.warnings


def fit_composer(cfg: RunConfig, base: NoisePredictor, adapters, mode: str, data: TrajectoryDataset, key: int = 0):
    if not adapters:
        raise PipelineError("composition needs at least one skill")
    if Mode(mode) is Mode.FIXED:
        raise PipelineError("fixed-weight composition has nothing to train")
    rng = _rng(cfg, _COMPOSER, key)
    comp = CompositionNet.create(STATE_DIM, len(adapters), rng.split(0), cfg.hidden, base.state_mean, base.state_std)
    policy = ComposedPolicy(base, list(adapters), Mode(mode), comp)
    curve = train_composer(policy, build_schedule(cfg.T), data.s, data.a, cfg.composer_steps, cfg.lr, cfg.batch, rng.split(1))
    return policy, curve


def evaluate(cfg: RunConfig, policy) -> dict:
    """Roll out ``policy`` (a predictor, or anything with ``.sample``)."""
    sched = build_schedule(cfg.T)
    if hasattr(policy, "sample"):
        fn = lambda s, r: policy.sample(s, sched, r)  # noqa: E731
    else:
        fn = lambda s, r: sample_action(policy, s, sched, r)  # noqa: E731
    return evaluate_policy(fn, get_task(cfg.evaluation_task), cfg.eval_episodes, cfg.seed + EVAL_SEED_OFFSET)


# --- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> RunReport:
    t0 = time.time()
    task = get_task(cfg.task)
    if cfg.episodes < 1:
        raise PipelineError("episodes=0 gives an empty dataset with no normalization statistics")
    ds = generate_dataset(task, cfg.data_kind, cfg.episodes, cfg.seed, cfg.data_noise)
    path = Path(cfg.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    returns = list(ds.episode_returns().values())
    costs = list(ds.episode_costs().values())
    metrics = {
        "episodes": ds.n_episodes,
        "transitions": len(ds),
        "mean_return": float(np.mean(returns)) if returns else None,
        "mean_cost": float(np.mean(costs)) if costs else None,
        "sha256": file_sha256(path),
    }
    return _finish(cfg, "gen-data", t0, metrics=metrics)


def cmd_pretrain(cfg: RunConfig) -> RunReport:
    """Unit-weight behavior model on the whole dataset, saved as a fresh library."""
    t0 = time.time()
    data = load_dataset(cfg.dataset)
    rng = _rng(cfg, _PRETRAIN)
    base = NoisePredictor.create(STATE_DIM, ACTION_DIM, cfg.T, cfg.hidden, rng.split(0), data.state_mean, data.state_std)
    curve = train_predictor(base, build_schedule(cfg.T), data.s, data.a, None, cfg.pretrain_steps, cfg.lr, cfg.batch, rng.split(1))
    lib = SkillLibrary(base)
    save_library(lib, cfg.library)
    metrics = {"loss_start": _head(curve.losses), "loss_end": _tail(curve.losses), "base_hash": lib.base_hash}
    return _finish(cfg, "pretrain", t0, phases={"pretrain": list(curve.losses)}, metrics=metrics)


def cmd_train_skill(cfg: RunConfig) -> RunReport:
    t0 = time.time()
    lib = load_library(cfg.library)
    data = load_dataset(cfg.dataset)
    if cfg.skill_name in lib.names():
        raise PipelineError(f"skill {cfg.skill_name!r} already exists; remove it first")
    entry, critics, phases = fit_skill(cfg, lib, data, cfg.skill_name, cfg.weighting, cfg.rank)
    lib = add_skill(lib, entry)
    if critics is not None:
        meta = {"weighting": cfg.weighting, "steps": cfg.critic_steps, "dataset_sha256": file_sha256(cfg.dataset)}
        lib = lib.with_artifact(critics_artifact(cfg.skill_name, critics, meta))
    save_library(lib, cfg.library)
    metrics = {"skill": cfg.skill_name, "weighting": cfg.weighting, "final_loss": entry.provenance["final_loss"]}
    if critics is not None:
        w = skill_weights(cfg, critics, cfg.weighting, data)
        metrics["weight_mean"] = float(w.mean())
        metrics["weight_effective_fraction"] = float(w.sum() ** 2 / (len(w) * np.sum(w * w)))
    return _finish(cfg, "train-skill", t0, phases=phases, metrics=metrics)


def cmd_train_composer(cfg: RunConfig) -> RunReport:
    t0 = time.time()
    lib = load_library(cfg.library)
    names = resolve_skills(cfg, lib)
    if not names:
        raise PipelineError("composition needs at least one skill; the library has none")
    data, warnings = composer_data(cfg, load_dataset(cfg.dataset))
    policy, curve = fit_composer(cfg, lib.base, lib.adapters(names), cfg.mode, data)
    lib = lib.with_artifact(composer_artifact(cfg.composer_name, policy.composer, names, cfg.mode))
    save_library(lib, cfg.library)
    trace = Path(cfg.out) / f"{cfg.composer_name}-alpha.csv"
    header = ["step", *[f"s{i}" for i in range(STATE_DIM)], *[f"alpha_{n}" for n in names]]
    write_csv(trace, header, alpha_trace_rows(policy, data.s))
    start, end = _head(curve.losses), _tail(curve.losses, 100)
    metrics = {
        "skills": names,
        "mode": cfg.mode,
        "train_states": len(data),
        "loss_start": start,
        "loss_end": end,
        "loss_decrease": (start - end) / start if start else None,
        "alpha_mean": [float(x) for x in policy.alphas(data.s).mean(axis=0)],
        "warnings": warnings,
    }
    return _finish(cfg, "train-composer", t0, phases={"composer": list(curve.losses)}, metrics=metrics,
                   outputs={"alpha_trace": trace.name})


def build_policy(cfg: RunConfig, lib: SkillLibrary):
    if cfg.policy == "base":
        return lib.base
    if cfg.policy == "skill":
        return skill_predictor(lib.base, lib.get(cfg.skill_name).adapter)
    if cfg.policy == "composer":
        art = lib.artifact(cfg.composer_name)
        return ComposedPolicy(lib.base, lib.adapters(art.meta["skills"]), Mode(art.meta["mode"]), composer_from_artifact(art))
    names = resolve_skills(cfg, lib)
    alphas = cfg.fixed_alphas if cfg.fixed_alphas is not None else [0.0] * len(names)
    return ComposedPolicy(lib.base, lib.adapters(names), Mode.FIXED, fixed_alphas=alphas)


def cmd_eval(cfg: RunConfig) -> RunReport:
    t0 = time.time()
    if cfg.eval_episodes < 1:
        raise PipelineError("evaluation needs at least one episode")
    lib = load_library(cfg.library)
    metrics = evaluate(cfg, build_policy(cfg, lib))
    return _finish(cfg, "eval", t0, metrics=metrics)


def cmd_compare(cfg: RunConfig) -> RunReport:
    """One composer per (mode, rank), shared seeds, evaluated on the same episodes."""
    t0 = time.time()
    lib = load_library(cfg.library)
    names = resolve_skills(cfg, lib)
    if len(names) < 2:
        raise PipelineError(f"comparison needs at least 2 skills, library has {len(names)}")
    data, warnings = composer_data(cfg, load_dataset(cfg.dataset))
    rows, phases = [], {}
    for rank in cfg.ranks:
        adapters = []
        for n in names:
            e = lib.get(n)
            if e.adapter.rank == rank:
                adapters.append(e.adapter)
                continue
            # rank ablation: refit the skill from its provenance at this rank
            prov = e.provenance
            skill_cfg = cfg.with_(
                dataset=prov["dataset"],
                skill_steps=prov["steps"],
                skill_lr=prov.get("lr", cfg.skill_lr),
                adv_temperature=prov.get("adv_temperature", cfg.adv_temperature),
            )
            critics = None
            if prov["weighting"] != "bc":
                critics = critics_from_artifact(lib.artifact(n))
            entry, _, ph = fit_skill(skill_cfg, lib, load_dataset(prov["dataset"]), n, prov["weighting"], rank, critics)
            phases[f"skill:{n}:rank{rank}"] = ph["skill"]
            adapters.append(entry.adapter)
        for mode in cfg.modes:
            if Mode(mode) is Mode.FIXED:
                alphas = cfg.fixed_alphas if cfg.fixed_alphas is not None else [0.0] * len(names)
                policy = ComposedPolicy(lib.base, adapters, Mode.FIXED, fixed_alphas=alphas)
            else:
                policy, curve = fit_composer(cfg, lib.base, adapters, mode, data)
                phases[f"composer:{mode}:rank{rank}"] = list(curve.losses)
            m = evaluate(cfg, policy)
            rows.append({"mode": mode, "rank": rank, **{k: m[k] for k in ("normalized_return", "normalized_cost", "success_rate")}})
    table = Path(cfg.out) / "compare.csv"
    write_csv(table, ["mode", "rank", "normalized_return", "normalized_cost", "success_rate"],
              [[r["mode"], r["rank"], r["normalized_return"], r["normalized_cost"], r["success_rate"]] for r in rows])
    return _finish(cfg, "compare", t0, phases=phases, metrics={"rows": rows, "warnings": warnings},
                   outputs={"table": table.name})


def cmd_dump_features(cfg: RunConfig) -> RunReport:
    """Per skill: layer features, predicted noise at t=1 and a sampled action for random dataset rows."""
    t0 = time.time()
    lib = load_library(cfg.library)
    names = resolve_skills(cfg, lib)
    data = load_dataset(cfg.dataset)
    n_hidden = lib.base.spec.n_layers - 1
    if not 0 <= cfg.feature_layer < lib.base.spec.n_layers:
        raise PipelineError(f"feature layer {cfg.feature_layer} out of range [0, {lib.base.spec.n_layers})")
    sched = build_schedule(cfg.T)
    rows = []
    width = lib.base.spec.layer_shape(cfg.feature_layer)[1]
    for k, name in enumerate(names):
        rng = _rng(cfg, _FEATURES, k)
        perm = rng.permutation(len(data))
        idx = perm[: cfg.feature_samples] if len(data) >= cfg.feature_samples else rng.choice(len(data), cfg.feature_samples)
        s, a0 = data.s[idx], data.a[idx]
        eps = rng.normal(a0.shape)
        pred_net = skill_predictor(lib.base, lib.get(name).adapter)
        a1 = forward_noise(sched, a0, 1, eps)
        eps_hat, cache = pred_net.forward(a1, 1, s)
        feats = cache.pre[cfg.feature_layer]
        act = sample_action(pred_net, s, sched, rng)
        for j in range(len(idx)):
            rows.append([name, int(idx[j]), *map(float, feats[j]), *map(float, eps_hat[j]), *map(float, act[j])])
    header = ["skill", "row", *[f"f{i}" for i in range(width)], *[f"eps{i}" for i in range(ACTION_DIM)],
              *[f"act{i}" for i in range(ACTION_DIM)]]
    path = Path(cfg.out) / "features.csv"
    write_csv(path, header, rows)
    metrics = {"rows": len(rows), "skills": names, "layer": cfg.feature_layer, "hidden_layers": n_hidden, "width": width,
               "sha256": file_sha256(path)}
    return _finish(cfg, "dump-features", t0, metrics=metrics, outputs={"features": path.name})
