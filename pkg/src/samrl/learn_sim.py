"""Learning in the differentiable simulator: demonstrations by trajectory
optimization, multi-view DAgger for the actor, returns and Q regression."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, grad
from .neural import (FEATURE_DIM, AdamState, MlpParams, adam_step, featurize, fit_regression, init_mlp,
                     mlp_np)
from .physics import (PegState, PhysParams, RopeState, State, Trajectory, default_params, initial_state,
                      rollout, rollout_t, state_to_scene, success_batch, step_t, check_explosion,
                      SUCCESS_BONUS)
from .render import RenderConfig, render
from .scene import PITCH_LIMIT, CameraPose, Intrinsics, SceneModel, ground_truth_scene
from .tasks import RopeTask, TaskSpec

MAX_RESTARTS = 5
ROPE_TOP = (-0.07, 0.0, 0.19)


class DemoError(RuntimeError):
    def __init__(self, message: str, best_return: float):
        super().__init__(f"{message} (best return {best_return:.4g})")
        self.best_return = best_return


class LearnError(ValueError):
    pass


# ----------------------------------------------------------------- starts

def start_state(task_id: str, offset, params: PhysParams | None = None) -> State:
    """Nominal start shifted by ``offset = (dx, dy, dyaw)``; the rope ignores yaw."""
    offset = np.asarray(offset, dtype=float)
    if task_id == "peg":
        base = initial_state("peg")
        return PegState(base.x + offset[0], base.y + offset[1], base.alpha + offset[2])
    top = np.array(ROPE_TOP) + np.array([offset[0], offset[1], 0.0])
    return initial_state("needle", params or default_params("needle"), top=tuple(top))


def sample_starts(task_id: str, n: int, scale: float, seed: int, params: PhysParams | None = None) -> list[State]:
    """Start states drawn like the proxy's hidden pose offsets."""
    rng = np.random.default_rng(seed)
    return [start_state(task_id, rng.uniform(-scale, scale, 3) * np.array([1.0, 1.0, 2.0]), params)
            for _ in range(n)]


# ------------------------------------------------------------ demos

def _batch(states: Sequence[State]) -> np.ndarray:
    return np.stack([s.vector() for s in states])


def optimize_plans(task: TaskSpec, params: PhysParams, starts: np.ndarray, horizon: int, iters: int,
                   lr: float = 0.1, init: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adam ascent on the summed reward of a batch of rollouts.

    Returns the actions (B, T, 3), the per-element returns and success steps of
    the final plans. Batch elements do not interact, so this is B independent
    optimizations sharing one tape.
    """
    b = starts.shape[0]
    acts = np.zeros((b, horizon, 3)) if init is None else np.clip(np.array(init, dtype=float), -1, 1)
    p = replace(params, horizon=horizon)
    s0 = Tensor(starts, check=False)
    state = AdamState.zeros_like([acts])
    for _ in range(iters):
        tape = Tape()
        a = tape.variable(acts)
        _, rewards, _ = rollout_t(s0, a, p, task)
        g = grad(rewards.sum(), [a])[0]
        (acts,), state = adam_step([acts], [-g], state, lr)
        acts = np.clip(acts, -1.0, 1.0)
    _, rewards, first = rollout_t(s0, Tensor(acts), p, task)
    return acts, rewards.value.sum(axis=1), first


def generate_demo(scene: SceneModel, task: TaskSpec, horizon: int, opt_iters: int, seed: int,
                  params: PhysParams | None = None, lr: float = 0.1, start: State | None = None) -> Trajectory:
    """Successful trajectory from the scene's object state, by trajectory optimization.

    Restarts re-seed a small jitter of the initial state; after ``MAX_RESTARTS``
    failures a ``DemoError`` carries the best return reached.
    """
    if horizon < 1:
        raise LearnError("horizon must be >= 1")
    from .physics import scene_to_state
    params = replace(params or default_params(scene.task_id), horizon=horizon)
    base = start or scene_to_state(scene)
    rng = np.random.default_rng(seed)
    best = -np.inf
    for attempt in range(MAX_RESTARTS):
        s0 = base if attempt == 0 else _jitter(scene.task_id, base, rng, params)
        acts, ret, first = optimize_plans(task, params, s0.vector()[None], horizon, opt_iters, lr)
        best = max(best, float(ret[0]))
        traj = rollout(s0, acts[0], params, task)
        if traj.success:
            return traj
    raise DemoError(f"no successful demo after {MAX_RESTARTS} attempts", best)


def _jitter(task_id, state: State, rng, params) -> State:
    if task_id == "peg":
        return PegState.from_vector(state.vector() + rng.uniform(-0.005, 0.005, 3))
    top = state.positions[0] + np.array([*rng.uniform(-0.005, 0.005, 2), 0.0])
    return initial_state("needle", params, top=tuple(top))


def generate_demos(task_id: str, starts: Sequence[State], horizon: int, opt_iters: int,
                   params: PhysParams | None = None, lr: float = 0.1,
                   task: TaskSpec | None = None) -> list[Trajectory]:
    """Batched demos for many starts; unsuccessful optimizations are dropped."""
    from .tasks import make_task
    task = task or make_task(task_id)
    params = replace(params or default_params(task_id), horizon=horizon)
    acts, _, first = optimize_plans(task, params, _batch(starts), horizon, opt_iters, lr)
    out = []
    for s0, a, f in zip(starts, acts, first):
        if f >= 0:
            out.append(rollout(s0, a, params, task))
    return out


# ------------------------------------------------------------- views

def view_grid(yaw_range: tuple[float, float], pitch_range: tuple[float, float], n_yaw: int, n_pitch: int,
              radius: float = 0.75, target=(0.0, 0.0, 0.0), intrinsics: Intrinsics | None = None) -> list[CameraPose]:
    """Row-major grid, pitch outer and yaw inner; ``n = 1`` takes the lower bound."""
    if n_yaw < 1 or n_pitch < 1:
        raise LearnError("grid counts must be >= 1")
    if yaw_range[1] < yaw_range[0] or pitch_range[1] < pitch_range[0]:
        raise LearnError("grid ranges must be ordered (lo, hi)")
    if max(abs(pitch_range[0]), abs(pitch_range[1])) >= PITCH_LIMIT:
        raise LearnError("pitch range leaves the valid interval")
    yaws = np.linspace(*yaw_range, n_yaw) if n_yaw > 1 else np.array([yaw_range[0]])
    pitches = np.linspace(*pitch_range, n_pitch) if n_pitch > 1 else np.array([pitch_range[0]])
    intr = intrinsics or Intrinsics()
    return [CameraPose(float(y), float(p), radius, tuple(target), intr) for p in pitches for y in yaws]


def observe(scene: SceneModel, state: State, pose: CameraPose, config: RenderConfig = RenderConfig()):
    return render(state_to_scene(scene, state), pose, config)


def features_of(scene: SceneModel, states: Sequence[State], pose: CameraPose,
                config: RenderConfig = RenderConfig()) -> np.ndarray:
    return np.stack([featurize(observe(scene, s, pose, config)) for s in states])


# ----------------------------------------------------------- returns

@dataclass(frozen=True)
class ReturnConfig:
    gamma: float = 0.95
    terminal_exponent: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise LearnError("gamma must lie in [0, 1]")


def compute_returns(rewards, gamma: float = 0.95, terminal_exponent: bool = False) -> np.ndarray:
    """R_t = sum_{i>=t} gamma^(i-t) r_i; ``terminal_exponent`` weights by gamma^(T-i) instead."""
    if not 0.0 <= gamma <= 1.0:
        raise LearnError("gamma must lie in [0, 1]")
    r = np.asarray(rewards, dtype=float)
    out = np.zeros_like(r)
    if terminal_exponent:
        last = len(r) - 1
        w = gamma ** (last - np.arange(len(r)))
        return np.cumsum((w * r)[::-1])[::-1]
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


# ------------------------------------------------------- training data

@dataclass
class LabeledView:
    feature: np.ndarray
    expert_action: np.ndarray
    executed_action: np.ndarray
    ret: float
    view: int


@dataclass(frozen=True)
class LearnConfig:
    horizon: int = 12
    demo_iters: int = 60
    demo_lr: float = 0.1
    relabel_iters: int = 20
    relabel_horizon: int = 8
    dagger_iters: int = 2
    rollout_views: int = 3
    epochs: int = 40
    q_epochs: int = 40
    lr: float = 1e-3
    hidden: tuple[int, ...] = (256, 128)
    batch: int = 128
    gamma: float = 0.95
    terminal_exponent: bool = False

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class ActorResult:
    params: MlpParams
    view_errors: dict[int, float]
    dataset_sizes: list[int]
    q_data: list[LabeledView] = field(default_factory=list)
    visited: list[list[np.ndarray]] = field(default_factory=list)


def _expert_labels(task, params, states: np.ndarray, horizon_left: np.ndarray, cfg: LearnConfig,
                   warm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First action of a short re-optimized plan from each visited state."""
    h = max(1, min(cfg.relabel_horizon, int(horizon_left.max())))
    init = warm[:, :h]
    acts, _, _ = optimize_plans(task, params, states, h, cfg.relabel_iters, cfg.demo_lr, init)
    shifted = np.concatenate([acts[:, 1:], np.zeros((len(acts), 1, 3))], axis=1)
    if shifted.shape[1] < warm.shape[1]:
        shifted = np.concatenate([shifted, warm[:, h:]], axis=1)
    return acts[:, 0], shifted


def _view_errors(actor: MlpParams, x: np.ndarray, y: np.ndarray, views: np.ndarray) -> dict[int, float]:
    err = np.linalg.norm(mlp_np(actor, x) - y, axis=1)
    return {int(v): float(err[views == v].mean()) for v in np.unique(views)}


def train_actor(demos: Sequence[Trajectory], views: Sequence[CameraPose], dagger_iters: int, epochs: int,
                seed: int, scene: SceneModel | None = None, task: TaskSpec | None = None,
                params: PhysParams | None = None, cfg: LearnConfig | None = None,
                beta: Callable[[int], float] = lambda i: 0.5 ** i,
                render_config: RenderConfig = RenderConfig()) -> ActorResult:
    """Multi-view DAgger.

    Iteration 0 clones the demos from every view. Iteration i >= 1 runs the
    beta_i mixture from each demo start, each rollout observing through one
    view, relabels every visited state with a re-optimized expert action and
    retrains on the aggregate. Executed actions and their returns are kept as
    Q-training data.
    """
    if not demos:
        raise LearnError("train_actor needs at least one demo")
    cfg = cfg or LearnConfig()
    task_id = demos[0].task_id
    from .tasks import make_task
    task = task or make_task(task_id)
    scene = scene or ground_truth_scene(task_id, task)
    params = replace(params or default_params(task_id), horizon=len(demos[0].actions))
    horizon = params.horizon
    rng = np.random.default_rng(seed)

    xs, ys, vs = [], [], []
    for d in demos:
        last = d.success_step if d.success_step is not None else len(d.actions) - 1
        for vi, pose in enumerate(views):
            xs.append(features_of(scene, d.states[:last + 1], pose, render_config))
            ys.append(d.actions[:last + 1])
            vs.append(np.full(last + 1, vi))
    x, y, v = np.concatenate(xs), np.concatenate(ys), np.concatenate(vs)
    sizes = [len(x)]
    actor = init_mlp((FEATURE_DIM, *cfg.hidden, 3), seed, head="tanh", bound=1.0)
    actor = fit_regression(actor, x, y, epochs, cfg.lr, cfg.batch, seed).params

    q_data: list[LabeledView] = []
    visited_all = []
    for it in range(1, dagger_iters + 1):
        b_i = beta(it)
        starts, view_ids, warm = [], [], []
        for d in demos:
            for vi in rng.choice(len(views), size=min(cfg.rollout_views, len(views)), replace=False):
                starts.append(d.states[0].vector())
                view_ids.append(int(vi))
                warm.append(d.actions)
        res = _mixture_rollouts(task, params, scene, views, actor, np.stack(starts), np.array(view_ids),
                                np.stack(warm), b_i, rng, cfg, render_config)
        nx, ny, nv, labeled, visited = res
        visited_all.append(visited)
        q_data += labeled
        x, y, v = np.concatenate([x, nx]), np.concatenate([y, ny]), np.concatenate([v, nv])
        sizes.append(len(x))
        actor = fit_regression(actor, x, y, epochs, cfg.lr, cfg.batch, seed + it).params

    return ActorResult(actor, _view_errors(actor, x, y, v), sizes, q_data, visited_all)


def _mixture_rollouts(task, params, scene, views, actor, starts, view_ids, warm, beta, rng, cfg,
                      render_config):
    b, horizon = len(starts), params.horizon
    s = starts.copy()
    alive = np.ones(b, dtype=bool)
    feats, experts, execs, rewards, vid_rec, owner = [], [], [], [], [], []
    visited = []
    for t in range(horizon):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        states = [_state_of(task, row) for row in s[idx]]
        f = np.stack([featurize(observe(scene, st, views[view_ids[k]], render_config))
                      for st, k in zip(states, idx)])
        learner = mlp_np(actor, f)
        expert, shifted = _expert_labels(task, params, s[idx], np.full(len(idx), horizon - t), cfg, warm[idx])
        warm[idx] = shifted
        use_expert = rng.random(len(idx)) < beta
        act = np.where(use_expert[:, None], expert, learner)
        s2, r = step_t(Tensor(s[idx]), Tensor(act), params, task)
        if isinstance(task, RopeTask):
            check_explosion(s2.value, params, t)
        hit = success_batch(s[idx], s2.value, task)
        rew = r.value + (SUCCESS_BONUS * hit if isinstance(task, RopeTask) else 0.0)
        visited.append(s[idx].copy())
        feats.append(f), experts.append(expert), execs.append(act)
        rewards.append(rew), vid_rec.append(view_ids[idx]), owner.append(np.stack([idx, np.full(len(idx), t)], 1))
        s[idx] = s2.value
        alive[idx[hit]] = False
    feats = np.concatenate(feats)
    experts, execs = np.concatenate(experts), np.concatenate(execs)
    rewards, vids, owner = np.concatenate(rewards), np.concatenate(vid_rec), np.concatenate(owner)
    labeled = []
    rets = np.zeros(len(rewards))
    for k in range(b):
        rows = np.nonzero(owner[:, 0] == k)[0]
        rows = rows[np.argsort(owner[rows, 1])]
        rets[rows] = compute_returns(rewards[rows], cfg.gamma, cfg.terminal_exponent)
    for i in range(len(feats)):
        labeled.append(LabeledView(feats[i], experts[i], execs[i], float(rets[i]), int(vids[i])))
    return feats, experts, vids, labeled, visited


def _state_of(task, row) -> State:
    return RopeState.from_vector(row) if isinstance(task, RopeTask) else PegState.from_vector(row)


def policy_rollouts(task, params, scene, views, actor, starts: np.ndarray, view_ids: np.ndarray,
                    cfg: LearnConfig, render_config: RenderConfig = RenderConfig()) -> list[LabeledView]:
    """Pure-learner rollouts, each observing through its own view; returns Q-training tuples."""
    b = len(starts)
    dummy = np.zeros((b, params.horizon, 3))
    rng = np.random.default_rng(0)
    no_relabel = replace(cfg, relabel_iters=0)
    *_, labeled, _ = _mixture_rollouts(task, params, scene, views, actor, starts, view_ids, dummy, 0.0, rng,
                                       no_relabel, render_config)
    return labeled


def train_q(labeled: Sequence[LabeledView], epochs: int, seed: int, hidden: tuple[int, ...] = (256, 128),
            lr: float = 1e-3, batch: int = 128, init: MlpParams | None = None) -> tuple[MlpParams, list[float]]:
    """Regress Q(feature, executed action) onto the return."""
    if not labeled:
        raise LearnError("train_q needs at least one labeled view")
    x = np.stack([np.concatenate([lv.feature, lv.executed_action]) for lv in labeled])
    y = np.array([lv.ret for lv in labeled])
    a_dim = len(labeled[0].executed_action)
    if x.shape[1] != FEATURE_DIM + a_dim:
        raise LearnError(f"Q input dim {x.shape[1]} != {FEATURE_DIM} + {a_dim}")
    q = init or init_mlp((x.shape[1], *hidden, 1), seed)
    res = fit_regression(q, x, y, epochs, lr, batch, seed)
    return res.params, res.losses


def save_labeled(labeled: Sequence[LabeledView], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lv in labeled:
            fh.write(json.dumps({"feature": lv.feature.tolist(), "expert_action": lv.expert_action.tolist(),
                                 "executed_action": lv.executed_action.tolist(), "return": lv.ret,
                                 "view": lv.view}) + "\n")


def load_labeled(path) -> list[LabeledView]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(LabeledView(np.array(d["feature"]), np.array(d["expert_action"]),
                                   np.array(d["executed_action"]), float(d["return"]), int(d["view"])))
    return out
