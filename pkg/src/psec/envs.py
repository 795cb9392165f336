"""2-D point-mass tasks, scripted demonstrators, datasets and evaluation.

Every task shares the state layout (x, y, vx, vy, gx - x, gy - y, wx, wy):
position, velocity, offset to the episode's goal and a constant per-episode
wind force; and the action box [-1, 1]^2; tasks differ only in reward, start/goal distribution, hazards
and dynamics.
All functions are vectorized over a leading batch axis of episodes.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .numcore import SeededRng

STATE_DIM = 8
ACTION_DIM = 2
WALL = 5.0


class TaskKind(str, Enum):
    HOLD = "hold"
    SLOW = "slow"
    FAST = "fast"
    SAFE_REACH = "safe_reach"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    goal: tuple[float, float] = (0.0, 0.0)
    hazards: tuple[tuple[float, float, float], ...] = ()
    speed_band: tuple[float, float] = (0.0, 0.0)
    damping: float = 0.95
    gain: float = 1.0
    dt: float = 0.05
    horizon: int = 100
    start_low: tuple[float, float] = (-4.0, -1.0)
    start_high: tuple[float, float] = (-2.0, 1.0)
    start_speed: float = 0.0
    # goal drawn at a random bearing and this distance range from the start
    goal_distance: tuple[float, float] | None = None
    max_wind: float = 0.0
    cost_threshold: float = 10.0
    goal_radius: float = 0.3
    hazard_drag: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        gx, gy = self.goal
        for cx, cy, rad in self.hazards:
            if math.hypot(gx - cx, gy - cy) <= rad + self.goal_radius:
                raise ValueError(f"hazard at ({cx}, {cy}) overlaps the goal")
        if self.kind in (TaskKind.SLOW, TaskKind.FAST) and not self.speed_band[0] < self.speed_band[1]:
            raise ValueError(f"empty speed band {self.speed_band}")

    @property
    def max_speed(self) -> float:
        return self.gain * self.dt / (1.0 - self.damping) if self.damping < 1.0 else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("goal", "speed_band", "start_low", "start_high", "goal_distance"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        d["hazards"] = tuple(tuple(h) for h in d.get("hazards", ()))
        return cls(**d)


# Continual-shift family: start near the origin, goal at a random bearing.
_CONTINUAL = dict(start_low=(-0.5, -0.5), start_high=(0.5, 0.5), start_speed=0.5, max_wind=0.3)
HOLD = TaskSpec(TaskKind.HOLD, goal_distance=(0.5, 3.0), name="hold", **_CONTINUAL)
SLOW = TaskSpec(TaskKind.SLOW, speed_band=(0.25, 0.45), goal_distance=(4.4, 4.5), name="slow", **_CONTINUAL)
FAST = TaskSpec(TaskKind.FAST, speed_band=(0.65, 0.85), goal_distance=(4.4, 4.5), name="fast", **_CONTINUAL)
# Multi-objective safety: reach the goal past a hazard disc sitting on the straight path.
# Hazards also drag the agent, so cutting through them is not a shortcut.
POINT_SAFE = TaskSpec(
    TaskKind.SAFE_REACH,
    goal=(1.6, 0.0),
    hazards=((0.0, 0.0, 0.5),),
    gain=1.5,
    start_low=(-1.8, -0.3),
    start_high=(-1.5, 0.3),
    hazard_drag=0.8,
    name="point_safe",
)
# Dynamics shift: cruising in a speed band under heavy vs light damping.
CRUISE_SOURCE = TaskSpec(
    TaskKind.SLOW,
    goal=(4.5, 0.0),
    speed_band=(0.2, 0.3),
    damping=0.8,
    gain=1.2,
    start_low=(-3.0, -1.5),
    start_high=(-1.0, 1.5),
    start_speed=0.5,
    max_wind=0.3,
    name="cruise_source",
)
CRUISE_TARGET = replace(CRUISE_SOURCE, damping=0.95, gain=1.0, name="cruise_target")

TASKS: dict[str, TaskSpec] = {t.name: t for t in (HOLD, SLOW, FAST, POINT_SAFE, CRUISE_SOURCE, CRUISE_TARGET)}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def reset(task: TaskSpec, n: int, rng: SeededRng) -> np.ndarray:
    s = np.zeros((n, STATE_DIM))
    s[:, 0] = rng.uniform(task.start_low[0], task.start_high[0], n)
    s[:, 1] = rng.uniform(task.start_low[1], task.start_high[1], n)
    if task.start_speed > 0:
        ang = rng.uniform(0.0, 2 * math.pi, n)
        spd = rng.uniform(0.0, task.start_speed, n)
        s[:, 2] = spd * np.cos(ang)
        s[:, 3] = spd * np.sin(ang)
    if task.goal_distance is None:
        s[:, 4:6] = np.asarray(task.goal) - s[:, :2]
    else:
        bearing = rng.uniform(0.0, 2 * math.pi, n)
        dist = rng.uniform(task.goal_distance[0], task.goal_distance[1], n)
        s[:, 4] = dist * np.cos(bearing)
        s[:, 5] = dist * np.sin(bearing)
    if task.max_wind > 0:
        ang = rng.uniform(0.0, 2 * math.pi, n)
        mag = task.max_wind * np.sqrt(rng.uniform(0.0, 1.0, n))
        s[:, 6] = mag * np.cos(ang)
        s[:, 7] = mag * np.sin(ang)
    return s


def hazard_cost(task: TaskSpec, pos: np.ndarray) -> np.ndarray:
    """1 where a position lies inside any hazard, else 0."""
    cost = np.zeros(pos.shape[0])
    for cx, cy, rad in task.hazards:
        inside = np.hypot(pos[:, 0] - cx, pos[:, 1] - cy) < rad
        cost = np.maximum(cost, inside.astype(float))
    return cost


def _goal_dist(state: np.ndarray) -> np.ndarray:
    return np.hypot(state[:, 4], state[:, 5])


@dataclass
class StepStats:
    clipped_actions: int = 0


def step(task: TaskSpec, state: np.ndarray, action: np.ndarray, stats: StepStats | None = None):
    """Advance a batch of states one tick. Returns (next_state, reward, cost, done).

    ``done`` only signals the time limit, so it is always False here; the
    rollout loop owns episode length.
    """
    state = np.atleast_2d(state)
    action = np.atleast_2d(np.asarray(action, dtype=np.float64))
    clipped = np.clip(action, -1.0, 1.0)
    if stats is not None:
        stats.clipped_actions += int(np.sum(np.any(clipped != action, axis=1)))
    pos, vel = state[:, :2], state[:, 2:4]
    wind = state[:, 6:8]
    vel = task.damping * vel + task.gain * (clipped + wind) * task.dt
    if task.hazard_drag != 1.0:
        in_hazard = hazard_cost(task, pos)[:, None] > 0
        vel = np.where(in_hazard, task.hazard_drag * vel, vel)
    new_pos = pos + vel * task.dt
    hit = np.abs(new_pos) > WALL
    new_pos = np.clip(new_pos, -WALL, WALL)
    vel = np.where(hit, 0.0, vel)
    goal = pos + state[:, 4:6]
    nxt = np.concatenate([new_pos, vel, goal - new_pos, wind], axis=1)
    reward = task_reward(task, state, nxt)
    cost = hazard_cost(task, new_pos)
    return nxt, reward, cost, np.zeros(len(state), dtype=bool)


def task_reward(task: TaskSpec, state: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    if task.kind is TaskKind.HOLD:
        return -_goal_dist(nxt)
    progress = _goal_dist(state) - _goal_dist(nxt)
    if task.kind is TaskKind.SAFE_REACH:
        at_goal = _goal_dist(nxt) < task.goal_radius
        return 2.0 * progress + 0.1 * at_goal
    speed = np.hypot(nxt[:, 2], nxt[:, 3])
    lo, hi = task.speed_band
    in_band = (speed >= lo) & (speed <= hi)
    return 2.0 * progress + 0.1 * in_band


# --- scripted demonstrators -------------------------------------------------

def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norm, 1e-9), norm


def desired_velocity(task: TaskSpec, state: np.ndarray, avoid_hazards: bool = True) -> np.ndarray:
    pos = state[:, :2]
    direction, dist = _unit(state[:, 4:6])
    if task.kind is TaskKind.HOLD:
        speed = np.minimum(0.8, 1.5 * dist)
    elif task.kind is TaskKind.SAFE_REACH:
        speed = np.minimum(1.0, 2.0 * dist)
    else:
        speed = np.full_like(dist, 0.5 * (task.speed_band[0] + task.speed_band[1]))
    v = direction * speed
    if avoid_hazards and task.hazards:
        steer = np.zeros_like(pos)
        for cx, cy, rad in task.hazards:
            away, d = _unit(pos - np.array([cx, cy]))
            influence = rad + 0.6
            w = np.clip((influence - d) / (influence - rad), 0.0, 1.0)
            # pass on whichever side the agent already is
            side = np.where(away[:, 1:2] >= 0.0, 1.0, -1.0)
            tangent = side * np.concatenate([away[:, 1:2], -away[:, 0:1]], axis=1)
            steer += w * (1.5 * away + tangent)
        v = v + 0.9 * steer
        vdir, vn = _unit(v)
        v = vdir * np.minimum(vn, 1.0)
    return v


def track_velocity(task: TaskSpec, state: np.ndarray, v_des: np.ndarray, k: float = 5.0) -> np.ndarray:
    """Dynamics-aware velocity tracking: feedforward to hold v_des plus proportional correction."""
    vel = state[:, 2:4]
    feedforward = v_des * (1.0 - task.damping) / (task.gain * task.dt) - state[:, 6:8]
    return np.clip(feedforward + k * (v_des - vel), -1.0, 1.0)


def scripted_expert(
    task: TaskSpec,
    state: np.ndarray,
    noise_level: float,
    rng: SeededRng,
    safe: bool = True,
    dynamics: TaskSpec | None = None,
) -> np.ndarray:
    """Velocity-tracking controller toward the task target plus Gaussian noise.

    ``safe`` detours around hazards; ``dynamics`` lets a controller tuned for
    one damping/gain pair act in a task with another.
    """
    state = np.atleast_2d(state)
    v_des = desired_velocity(task, state, avoid_hazards=safe)
    a = track_velocity(dynamics or task, state, v_des)
    if noise_level > 0:
        a = a + noise_level * rng.normal(a.shape)
    return np.clip(a, -1.0, 1.0)


def random_policy(state: np.ndarray, rng: SeededRng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (np.atleast_2d(state).shape[0], ACTION_DIM))


PolicyFn = Callable[[np.ndarray, SeededRng], np.ndarray]

EXPERT_NOISE = 0.1
RISKY_NOISE = 0.3


def policy_by_kind(task: TaskSpec, kind: str, noise: float | None = None) -> PolicyFn:
    if kind == "expert":
        lvl = EXPERT_NOISE if noise is None else noise
        return lambda s, rng: scripted_expert(task, s, lvl, rng, safe=True)
    if kind == "risky":
        lvl = RISKY_NOISE if noise is None else noise
        return lambda s, rng: scripted_expert(task, s, lvl, rng, safe=False)
    if kind == "random":
        return random_policy
    raise ValueError(f"unknown policy kind {kind!r}")


# --- datasets ---------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    ep: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    d: np.ndarray
    state_mean: np.ndarray | None = None
    state_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ep)

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.ep))

    def compute_stats(self) -> None:
        if len(self) == 0:
            raise ValueError("cannot compute normalization statistics of an empty dataset")
        self.state_mean = self.s.mean(axis=0)
        self.state_std = self.s.std(axis=0) + 1e-3

    def episode_returns(self) -> dict[int, float]:
        return {int(e): float(self.r[self.ep == e].sum()) for e in np.unique(self.ep)}

    def episode_costs(self) -> dict[int, float]:
        return {int(e): float(self.c[self.ep == e].sum()) for e in np.unique(self.ep)}

    def select_episodes(self, episodes) -> "TrajectoryDataset":
        mask = np.isin(self.ep, np.asarray(list(episodes), dtype=self.ep.dtype))
        meta = dict(self.meta)
        if "kinds" in meta:
            keep = set(int(e) for e in episodes)
            meta["kinds"] = {k: v for k, v in meta["kinds"].items() if int(k) in keep}
        return TrajectoryDataset(
            self.ep[mask], self.t[mask], self.s[mask], self.a[mask], self.r[mask], self.c[mask], self.d[mask],
            self.state_mean, self.state_std, meta,
        )

    def transitions(self):
        """(s, a, r, c, s_next, h) for steps whose successor is recorded.

        h is the violation label of s itself: the cost recorded on the
        transition that entered s (0 at episode start).
        """
        same_ep = self.ep[1:] == self.ep[:-1]
        idx = np.nonzero(same_ep & (self.d[:-1] == 0))[0]
        prev_cost = np.concatenate([[0.0], self.c[:-1]])
        prev_cost[np.concatenate([[True], self.ep[1:] != self.ep[:-1]])] = 0.0
        h = (prev_cost > 0).astype(float)
        return self.s[idx], self.a[idx], self.r[idx], self.c[idx], self.s[idx + 1], h[idx]

    @staticmethod
    def concat(parts: list["TrajectoryDataset"]) -> "TrajectoryDataset":
        offset = 0
        eps = []
        for p in parts:
            eps.append(p.ep + offset)
            offset += int(p.ep.max()) + 1 if len(p) else 0
        out = TrajectoryDataset(
            np.concatenate(eps), *(np.concatenate([getattr(p, k) for p in parts]) for k in ("t", "s", "a", "r", "c", "d"))
        )
        out.meta = {"parts": [p.meta for p in parts]}
        if len(out):
            out.compute_stats()
        return out

    # NDJSON: one transition per line, keys {ep, t, s, a, r, c, d}
    def to_ndjson(self) -> str:
        lines = []
        for i in range(len(self)):
            row = {
                "ep": int(self.ep[i]),
                "t": int(self.t[i]),
                "s": [float(x) for x in self.s[i]],
                "a": [float(x) for x in self.a[i]],
                "r": float(self.r[i]),
                "c": float(self.c[i]),
                "d": int(self.d[i]),
            }
            lines.append(json.dumps(row, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    def stats_json(self) -> str:
        if self.state_mean is None:
            raise ValueError("normalization statistics were never computed")
        return json.dumps(
            {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(), "meta": self.meta},
            indent=2,
            sort_keys=True,
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_ndjson())
        stats_path(path).write_text(self.stats_json())

    @classmethod
    def from_ndjson(cls, text: str) -> "TrajectoryDataset":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            return cls(*(np.zeros((0,) + shp) for shp in ((), (), (STATE_DIM,), (ACTION_DIM,), (), (), ())))
        return cls(
            ep=np.array([r["ep"] for r in rows], dtype=np.int64),
            t=np.array([r["t"] for r in rows], dtype=np.int64),
            s=np.array([r["s"] for r in rows], dtype=np.float64),
            a=np.array([r["a"] for r in rows], dtype=np.float64),
            r=np.array([r["r"] for r in rows], dtype=np.float64),
            c=np.array([r["c"] for r in rows], dtype=np.float64),
            d=np.array([r["d"] for r in rows], dtype=np.int64),
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        ds = cls.from_ndjson(path.read_text())
        sp = stats_path(path)
        if sp.exists():
            st = json.loads(sp.read_text())
            ds.state_mean = np.array(st["state_mean"])
            ds.state_std = np.array(st["state_std"])
            ds.meta = st.get("meta", {})
        elif len(ds):
            ds.compute_stats()
        return ds


def stats_path(path: Path) -> Path:
    return path.with_name(path.name + ".stats.json")


def rollout(task: TaskSpec, policy: PolicyFn, episodes: int, rng: SeededRng):
    """Run ``episodes`` in lockstep. Returns per-step arrays shaped (horizon, episodes, ...)."""
    s = reset(task, episodes, rng.split(0))
    act_rng = rng.split(1)
    S, A, R, C = [], [], [], []
    for _ in range(task.horizon):
        a = np.clip(policy(s, act_rng), -1.0, 1.0)
        nxt, r, c, _ = step(task, s, a)
        S.append(s)
        A.append(a)
        R.append(r)
        C.append(c)
        s = nxt
    return np.array(S), np.array(A), np.array(R), np.array(C), s


MIX = (("expert", 0.4), ("risky", 0.3), ("random", 0.3))


def generate_dataset(task: TaskSpec, policy_kind: str, episodes: int, seed: int, noise: float | None = None) -> TrajectoryDataset:
    """Roll out a scripted policy (or the 40/30/30 expert/risky/random mix)."""
    rng = SeededRng(seed)
    if policy_kind == "mixed":
        counts = [int(round(frac * episodes)) for _, frac in MIX]
        counts[-1] = episodes - sum(counts[:-1])
        kinds = [k for (k, _), n in zip(MIX, counts) for _ in range(n)]
    else:
        kinds = [policy_kind] * episodes
    parts = []
    for j, kind in enumerate(dict.fromkeys(kinds)):
        n = kinds.count(kind)
        if n == 0:
            continue
        S, A, R, C, _ = rollout(task, policy_by_kind(task, kind, noise), n, rng.split(j))
        parts.append((kind, S, A, R, C))
    ep, t, s, a, r, c, d = [], [], [], [], [], [], []
    kind_of = {}
    e = 0
    for kind, S, A, R, C in parts:
        H, n = S.shape[:2]
        for i in range(n):
            ep.append(np.full(H, e))
            t.append(np.arange(H))
            s.append(S[:, i])
            a.append(A[:, i])
            r.append(R[:, i])
            c.append(C[:, i])
            dd = np.zeros(H, dtype=np.int64)
            dd[-1] = 1
            d.append(dd)
            kind_of[str(e)] = kind
            e += 1
    if e == 0:
        ds = TrajectoryDataset.from_ndjson("")
        ds.meta = {"task": task.to_dict(), "policy": policy_kind, "seed": seed, "kinds": {}}
        return ds
    ds = TrajectoryDataset(
        np.concatenate(ep).astype(np.int64),
        np.concatenate(t).astype(np.int64),
        np.concatenate(s),
        np.concatenate(a),
        np.concatenate(r),
        np.concatenate(c),
        np.concatenate(d),
        meta={"task": task.to_dict(), "policy": policy_kind, "seed": seed, "kinds": kind_of},
    )
    ds.compute_stats()
    return ds


# --- evaluation --------------------------------------------------------------

REFERENCE_EPISODES = 1000
REFERENCE_SEED = 7919


@functools.lru_cache(maxsize=None)
def reference_returns(task: TaskSpec) -> tuple[float, float]:
    """(expert, random) mean returns measured once per task."""
    rng = SeededRng(REFERENCE_SEED)
    _, _, R_e, _, _ = rollout(task, policy_by_kind(task, "expert"), REFERENCE_EPISODES, rng.split(0))
    _, _, R_r, _, _ = rollout(task, random_policy, REFERENCE_EPISODES, rng.split(1))
    return float(R_e.sum(axis=0).mean()), float(R_r.sum(axis=0).mean())


def _success(task: TaskSpec, S: np.ndarray, C: np.ndarray, final: np.ndarray) -> np.ndarray:
    if task.kind is TaskKind.HOLD:
        return _goal_dist(final) < task.goal_radius
    if task.kind is TaskKind.SAFE_REACH:
        closest = np.min(np.hypot(S[..., 4], S[..., 5]), axis=0)
        reached = np.minimum(closest, _goal_dist(final)) < task.goal_radius
        return reached & (C.sum(axis=0) < task.cost_threshold)
    lo, hi = task.speed_band
    speed = np.hypot(S[..., 2], S[..., 3])
    return ((speed >= lo) & (speed <= hi)).mean(axis=0) >= 0.5


def evaluate_policy(policy: PolicyFn, task: TaskSpec, episodes: int, seed: int) -> dict:
    """Mean return/cost, normalized return/cost and success rate."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    S, _, R, C, final = rollout(task, policy, episodes, SeededRng(seed))
    ret = R.sum(axis=0)
    cost = C.sum(axis=0)
    r_exp, r_rand = reference_returns(task)
    mean_ret = float(ret.mean())
    return {
        "mean_return": mean_ret,
        "mean_cost": float(cost.mean()),
        "normalized_return": (mean_ret - r_rand) / (r_exp - r_rand),
        "normalized_cost": float(cost.mean()) / task.cost_threshold,
        "success_rate": float(_success(task, S, C, final).mean()),
        "episodes": episodes,
    }
