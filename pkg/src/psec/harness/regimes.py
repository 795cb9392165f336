"""End-to-end regimes chaining the pipelines: continual shift, multi-objective
safety and dynamics shift. Each writes its files under ``cfg.out`` and
returns a summary dict (also written as ``<regime>.json``)."""

from __future__ import annotations

import shutil
import time
from pathlib import Path

import numpy as np

from ..envs import TrajectoryDataset
from .config import RunConfig
from .pipelines import (
    cmd_compare,
    cmd_eval,
    cmd_gen_data,
    cmd_pretrain,
    cmd_train_composer,
    cmd_train_skill,
)
from .report import RunReport

# Settings each regime applies on top of the run config (user overrides win).
PROFILES: dict[str, dict] = {
    "continual": {"skill_steps": 100, "skill_lr": 3e-4},
    "safety": {
        "skill_steps": 2000,
        "skill_lr": 1e-4,
        "critic_steps": 6000,
        "critic_hidden": (64, 64),
        "critic_lr": 1e-3,
        "target_rate": 0.02,
        "filter_top": 30,
        "cost_ceiling": 5.0,
    },
    "shift": {"skill_steps": 200, "skill_lr": 3e-4},
}
# inverse temperatures for the two advantage weightings in the safety regime
SAFETY_TEMPERATURES = {"reward": 10.0, "safety": 100.0}
FIXED_ALPHA_SETS = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.5, 0.5))
DEMOS = 10
SOURCE_EPISODES = 200


class Workspace:
    def __init__(self, cfg: RunConfig, name: str):
        self.root = Path(cfg.out)
        self.cfg = cfg
        self.name = name
        self.reports: dict[str, str] = {}

    def data(self, name: str) -> str:
        return str(self.root / "data" / f"{name}.ndjson")

    def lib(self, name: str) -> str:
        return str(self.root / "libraries" / name)

    def run(self, label: str, fn, **kw) -> RunReport:
        cfg = self.cfg.with_(out=str(self.root / "reports" / label), **kw)
        rep = fn(cfg)
        self.reports[label] = rep.hash
        return rep

    def finish(self, summary: dict, t0: float) -> dict:
        rep = RunReport(command=f"regime-{self.name}", config=self.cfg.to_dict(), metrics=summary,
                        outputs=dict(sorted(self.reports.items())), wall_time=round(time.time() - t0, 3))
        rep.write(self.root / f"{self.name}.json")
        return {**summary, "hash": rep.hash, "wall_time": rep.wall_time}


def _gen(ws: Workspace, label: str, task: str, kind: str, episodes: int, seed: int) -> str:
    path = ws.data(label)
    ws.run(f"gen-{label}", cmd_gen_data, task=task, data_kind=kind, episodes=episodes, dataset=path, seed=seed,
           library=ws.lib("none"))
    return path


def _metric(rep: RunReport) -> dict:
    keys = ("normalized_return", "normalized_cost", "success_rate")
    return {k: float(rep.metrics[k]) for k in keys}


def run_continual(cfg: RunConfig) -> dict:
    """Hold -> Slow with {pi0}; Hold -> Fast with {pi0} vs {pi0, pi_slow}."""
    t0 = time.time()
    ws = Workspace(cfg, "continual")
    s = cfg.seed
    hold = _gen(ws, "hold", "hold", "expert", SOURCE_EPISODES, s)
    slow = _gen(ws, "slow", "slow", "expert", DEMOS, s + 1)
    fast = _gen(ws, "fast", "fast", "expert", DEMOS, s + 2)
    main, solo = ws.lib("hold_slow"), ws.lib("hold")
    ws.run("pretrain", cmd_pretrain, dataset=hold, library=main)
    shutil.rmtree(solo, ignore_errors=True)
    shutil.copytree(main, solo)
    ws.run("skill-slow", cmd_train_skill, dataset=slow, library=main, skill_name="slow", weighting="bc")
    lora_slow = ws.run("eval-lora-slow", cmd_eval, library=main, policy="skill", skill_name="slow", task="slow")
    # from scratch: same data, same step budget, full network
    scratch_lib = ws.lib("scratch_slow")
    ws.run("scratch-slow", cmd_pretrain, dataset=slow, library=scratch_lib, pretrain_steps=cfg.skill_steps, lr=cfg.skill_lr)
    scratch = ws.run("eval-scratch-slow", cmd_eval, library=scratch_lib, policy="base", task="slow")
    fast_scores = {}
    for label, lib, skills in (("p0", solo, ("fast",)), ("p0_slow", main, ("slow", "fast"))):
        ws.run(f"skill-fast-{label}", cmd_train_skill, dataset=fast, library=lib, skill_name="fast", weighting="bc")
        ws.run(f"composer-fast-{label}", cmd_train_composer, dataset=fast, library=lib, skills=skills,
               composer_name="fast", mode="parameter")
        rep = ws.run(f"eval-fast-{label}", cmd_eval, library=lib, policy="composer", composer_name="fast", task="fast")
        fast_scores[label] = _metric(rep)
    summary = {
        "lora_slow": _metric(lora_slow),
        "scratch_slow": _metric(scratch),
        "slow_margin": lora_slow.metrics["normalized_return"] - scratch.metrics["normalized_return"],
        "fast_p0": fast_scores["p0"],
        "fast_p0_slow": fast_scores["p0_slow"],
    }
    return ws.finish(summary, t0)


def run_safety(cfg: RunConfig) -> dict:
    """Reward and safety skills on mixed SafeReach data, composed in every mode."""
    t0 = time.time()
    cfg = cfg.with_(task="point_safe")
    ws = Workspace(cfg, "safety")
    data = _gen(ws, "point_safe", "point_safe", "mixed", SOURCE_EPISODES, cfg.seed)
    lib = ws.lib("point_safe")
    ws.run("pretrain", cmd_pretrain, dataset=data, library=lib)
    for w in ("reward", "safety"):
        ws.run(f"skill-{w}", cmd_train_skill, dataset=data, library=lib, skill_name=w, weighting=w,
               adv_temperature=SAFETY_TEMPERATURES[w])
    fixed = {}
    for al in FIXED_ALPHA_SETS:
        key = ",".join(f"{a:g}" for a in al)
        rep = ws.run(f"eval-fixed-{key}", cmd_eval, library=lib, policy="fixed", skills=("reward", "safety"), fixed_alphas=al)
        fixed[key] = _metric(rep)
    comp = ws.run("compare", cmd_compare, dataset=data, library=lib, skills=("reward", "safety"),
                  modes=("parameter", "noise", "action"), ranks=(cfg.rank,))
    modes = {r["mode"]: {k: r[k] for k in ("normalized_return", "normalized_cost", "success_rate")} for r in comp.metrics["rows"]}
    summary = {"fixed": fixed, "modes": modes, "best_fixed_return": max(v["normalized_return"] for v in fixed.values())}
    return ws.finish(summary, t0)


def run_shift(cfg: RunConfig) -> dict:
    """Source-trained pi0 plus a target LoRA, against scratch and pooled training."""
    t0 = time.time()
    ws = Workspace(cfg, "shift")
    src = _gen(ws, "source", "cruise_source", "expert", SOURCE_EPISODES, cfg.seed)
    tgt = _gen(ws, "target", "cruise_target", "expert", DEMOS, cfg.seed + 1)
    pooled = ws.data("pooled")
    ds = TrajectoryDataset.concat([TrajectoryDataset.load(src), TrajectoryDataset.load(tgt)])
    ds.compute_stats()
    ds.save(pooled)
    lib = ws.lib("shift")
    ws.run("pretrain", cmd_pretrain, dataset=src, library=lib)
    ws.run("skill-target", cmd_train_skill, dataset=tgt, library=lib, skill_name="target", weighting="bc")
    ws.run("composer", cmd_train_composer, dataset=tgt, library=lib, skills=("target",), composer_name="target")
    composed = ws.run("eval-composed", cmd_eval, library=lib, policy="composer", composer_name="target", task="cruise_target")
    scratch_lib = ws.lib("scratch")
    ws.run("scratch", cmd_pretrain, dataset=tgt, library=scratch_lib, pretrain_steps=cfg.skill_steps, lr=cfg.skill_lr)
    scratch = ws.run("eval-scratch", cmd_eval, library=scratch_lib, policy="base", task="cruise_target")
    pooled_lib = ws.lib("pooled")
    ws.run("pooled", cmd_pretrain, dataset=pooled, library=pooled_lib, pretrain_steps=cfg.pretrain_steps + cfg.skill_steps)
    pool = ws.run("eval-pooled", cmd_eval, library=pooled_lib, policy="base", task="cruise_target")
    summary = {"composed": _metric(composed), "scratch": _metric(scratch), "pooled": _metric(pool)}
    summary["margin_scratch"] = summary["composed"]["normalized_return"] - summary["scratch"]["normalized_return"]
    summary["margin_pooled"] = summary["composed"]["normalized_return"] - summary["pooled"]["normalized_return"]
    return ws.finish(summary, t0)


REGIMES = {"continual": run_continual, "safety": run_safety, "shift": run_shift}


def regime_config(name: str, cfg_dict: dict | None = None) -> RunConfig:
    """Profile settings for ``name`` overlaid by the caller's explicit settings."""
    if name not in REGIMES:
        raise KeyError(f"unknown regime {name!r}; known: {sorted(REGIMES)}")
    return RunConfig().with_(**{**PROFILES[name], **(cfg_dict or {})})


def run_regime(name: str, cfg_dict: dict | None = None) -> dict:
    return REGIMES[name](regime_config(name, cfg_dict))


def mean_over(summaries: list[dict], *path: str) -> float:
    vals = []
    for s in summaries:
        v = s
        for p in path:
            v = v[p]
        vals.append(float(v))
    return float(np.mean(vals))
