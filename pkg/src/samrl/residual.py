"""Residual policy learning on the proxy and the model-free baseline.

Both use the same single-critic deterministic actor-critic with target
networks; the baseline simply has no simulator action to build on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, apply, grad
from .neural import FEATURE_DIM, AdamState, MlpParams, adam_step, featurize, init_mlp, mlp_forward, mlp_np, track
from .scene import CameraPose, SceneModel, default_camera


@dataclass
class Transition:
    feature: np.ndarray
    a_real: np.ndarray
    a_sim: np.ndarray
    reward: float
    done: bool
    next_feature: np.ndarray
    next_a_sim: np.ndarray


class ReplayBuffer:
    """FIFO ring with a seeded uniform sampler (without replacement per batch)."""

    def __init__(self, capacity: int = 20000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int) -> list[Transition]:
        idx = self._rng.choice(len(self._items), size=min(n, len(self._items)), replace=False)
        return [self._items[i] for i in idx]


def residual_act(res: MlpParams, feature: np.ndarray, a_sim: np.ndarray, sigma: float = 0.0,
                 rng: np.random.Generator | None = None, bound: float = 1.0) -> np.ndarray:
    """a_real = clamp(a_sim + pi_res(f, a_sim) + noise)."""
    a_sim = np.asarray(a_sim, dtype=float)
    delta = mlp_np(res, np.concatenate([feature, a_sim])[None])[0]
    a = a_sim + delta
    if sigma > 0:
        a = a + (rng or np.random.default_rng()).normal(0.0, sigma, a.shape)
    return np.clip(a, -bound, bound)


@dataclass(frozen=True)
class ResidualConfig:
    hidden: tuple[int, ...] = (256, 128)
    gamma: float = 0.95
    rho: float = 0.995
    updates_per_episode: int = 40
    batch: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    sigma_start: float = 0.1
    sigma_end: float = 0.02
    residual_bound: float = 0.5
    eval_every: int = 5
    eval_episodes: int = 5
    capacity: int = 20000


@dataclass
class Learner:
    """Online/target actor and critic plus their optimizer states."""

    actor: MlpParams
    critic: MlpParams
    actor_t: MlpParams
    critic_t: MlpParams
    actor_opt: AdamState
    critic_opt: AdamState
    residual: bool

    @classmethod
    def create(cls, in_dim: int, cfg: ResidualConfig, seed: int, residual: bool) -> "Learner":
        a_in = in_dim + (3 if residual else 0)
        actor = init_mlp((a_in, *cfg.hidden, 3), seed, head="tanh",
                         bound=cfg.residual_bound if residual else 1.0, zero_last=residual)
        critic = init_mlp((in_dim + 3, *cfg.hidden, 1), seed + 1)
        return cls(actor, critic, actor.copy(), critic.copy(), AdamState.zeros_like(actor.arrays()),
                   AdamState.zeros_like(critic.arrays()), residual)

    def act_np(self, params: MlpParams, f: np.ndarray, a_sim: np.ndarray) -> np.ndarray:
        if self.residual:
            return np.clip(a_sim + mlp_np(params, np.concatenate([f, a_sim], axis=1)), -1.0, 1.0)
        return mlp_np(params, f)


def soft_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    return target.with_arrays([rho * t + (1.0 - rho) * o for t, o in zip(target.arrays(), online.arrays())])


def td_errors(learner: Learner, batch: list[Transition], gamma: float) -> np.ndarray:
    f = np.stack([b.feature for b in batch])
    a = np.stack([b.a_real for b in batch])
    r = np.array([b.reward for b in batch])
    d = np.array([float(b.done) for b in batch])
    f2 = np.stack([b.next_feature for b in batch])
    s2 = np.stack([b.next_a_sim for b in batch])
    a2 = learner.act_np(learner.actor_t, f2, s2)
    y = r + gamma * (1.0 - d) * mlp_np(learner.critic_t, np.concatenate([f2, a2], axis=1))[:, 0]
    return mlp_np(learner.critic, np.concatenate([f, a], axis=1))[:, 0] - y


def update(learner: Learner, batch: list[Transition], cfg: ResidualConfig) -> float:
    """One critic and one actor step plus soft target updates; returns the critic loss."""
    f = np.stack([b.feature for b in batch])
    a = np.stack([b.a_real for b in batch])
    s = np.stack([b.a_sim for b in batch])
    r = np.array([b.reward for b in batch])
    d = np.array([float(b.done) for b in batch])
    f2 = np.stack([b.next_feature for b in batch])
    s2 = np.stack([b.next_a_sim for b in batch])
    a2 = learner.act_np(learner.actor_t, f2, s2)
    y = r + cfg.gamma * (1.0 - d) * mlp_np(learner.critic_t, np.concatenate([f2, a2], axis=1))[:, 0]

    tape = Tape()
    leaves = track(learner.critic, tape)
    q = mlp_forward(learner.critic, Tensor(np.concatenate([f, a], axis=1), check=False), leaves)[:, 0]
    loss = ((q - y) * (q - y)).mean()
    arrs, learner.critic_opt = adam_step(learner.critic.arrays(), grad(loss, leaves), learner.critic_opt,
                                         cfg.critic_lr)
    learner.critic = learner.critic.with_arrays(arrs)

    tape = Tape()
    leaves = track(learner.actor, tape)
    if learner.residual:
        out = mlp_forward(learner.actor, Tensor(np.concatenate([f, s], axis=1), check=False), leaves)
        act = apply("clamp", out + s, lo=-1.0, hi=1.0)
    else:
        act = mlp_forward(learner.actor, Tensor(f, check=False), leaves)
    qa = mlp_forward(learner.critic, apply("concat", Tensor(f, check=False), act, axis=1))
    obj = -qa.mean()
    arrs, learner.actor_opt = adam_step(learner.actor.arrays(), grad(obj, leaves), learner.actor_opt,
                                        cfg.actor_lr)
    learner.actor = learner.actor.with_arrays(arrs)
    learner.actor_t = soft_update(learner.actor_t, learner.actor, cfg.rho)
    learner.critic_t = soft_update(learner.critic_t, learner.critic, cfg.rho)
    return loss.item()


def _sigma(cfg: ResidualConfig, e: int, n: int) -> float:
    frac = e / max(1, n - 1)
    return cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * frac


def episode_transitions(raw: list) -> list[Transition]:
    """Chain (f, a_real, a_sim, r, done) records into transitions with next-step fields."""
    out = []
    for i, (f, a, s, r, d) in enumerate(raw):
        nf, ns = (raw[i + 1][0], raw[i + 1][2]) if i + 1 < len(raw) else (f, s)
        out.append(Transition(f, np.asarray(a), np.asarray(s), float(r), bool(d or i + 1 == len(raw)), nf, ns))
    return out


@dataclass
class CurvePoint:
    episode: int
    env_steps: int
    success_rate: float


@dataclass
class ResidualResult:
    """``residual`` is the best-evaluated snapshot; ``learner`` holds the final iterate."""

    residual: MlpParams
    critic: MlpParams
    curve: list[CurvePoint]
    critic_losses: list[float] = field(default_factory=list)
    learner: Learner | None = None


def train_residual(proxy_factory: Callable[[], object], scene: SceneModel, actor: MlpParams, q_net: MlpParams,
                   episodes: int, cfg: ResidualConfig = ResidualConfig(), seed: int = 0,
                   episode_cfg=None, eval_seeds: list[int] | None = None,
                   run_episode: Callable | None = None, in_dim: int = FEATURE_DIM) -> ResidualResult:
    """Residual actor-critic on top of the frozen simulator policy.

    ``run_episode(proxy, residual, sigma, rng)`` defaults to the full test-stage
    loop; it must return an object with ``transitions`` and ``success``.
    ``in_dim`` is the feature length a custom ``run_episode`` emits.
    """
    from .nbv import EpisodeConfig, test_episode
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    episode_cfg = episode_cfg or EpisodeConfig()
    if run_episode is None:
        def run_episode(proxy, res, sigma, rng):
            from dataclasses import replace
            return test_episode(scene, proxy, actor, q_net, res, replace(episode_cfg, sigma=sigma), rng=rng)
    rng = np.random.default_rng(seed)
    learner = Learner.create(in_dim, cfg, seed, residual=True)
    buf = ReplayBuffer(cfg.capacity, seed)
    eval_seeds = eval_seeds if eval_seeds is not None else [10_000 + seed * 100 + i for i in range(cfg.eval_episodes)]
    curve: list[CurvePoint] = []
    losses: list[float] = []
    env_steps = 0

    def evaluate(ep):
        wins = 0
        for s in eval_seeds:
            proxy = proxy_factory()
            proxy.reset(s)
            wins += bool(run_episode(proxy, learner.actor, 0.0, np.random.default_rng(s)).success)
        curve.append(CurvePoint(ep, env_steps, wins / len(eval_seeds)))
        if best[0] is None or curve[-1].success_rate > best[0]:
            best[:] = [curve[-1].success_rate, learner.actor.copy()]

    best: list = [None, None]   # earliest snapshot with the highest evaluation success
    evaluate(0)
    for e in range(episodes):
        proxy = proxy_factory()
        proxy.reset(int(rng.integers(2**31)))
        res = run_episode(proxy, learner.actor, _sigma(cfg, e, episodes), rng)
        for tr in episode_transitions(res.transitions):
            buf.add(tr)
        env_steps += len(res.transitions)
        if len(buf):
            for _ in range(cfg.updates_per_episode):
                losses.append(update(learner, buf.sample(cfg.batch), cfg))
        if (e + 1) % cfg.eval_every == 0:
            evaluate(e + 1)
    return ResidualResult(best[1], learner.critic, curve, losses, learner)


@dataclass
class BaselineConfig:
    learner: ResidualConfig = field(default_factory=lambda: ResidualConfig(actor_lr=1e-3, sigma_start=0.3,
                                                                           sigma_end=0.1))
    eval_interval: int = 1000
    eval_episodes: int = 5
    warmup: int = 200
    pose: CameraPose | None = None


def _baseline_episode(proxy, learner: Learner, pose: CameraPose, sigma: float, rng, buf=None) -> tuple[bool, int]:
    obs = proxy.capture(pose)
    f = featurize(obs)
    raw = []
    ok = False
    while not proxy.done:
        a = learner.act_np(learner.actor, f[None], None)[0]
        if sigma > 0:
            a = np.clip(a + rng.normal(0.0, sigma, 3), -1.0, 1.0)
        r, done, ok = proxy.step(a)
        f2 = featurize(proxy.capture(pose))
        raw.append((f, a, np.zeros(3), r, done))
        f = f2
        if done:
            break
    if buf is not None:
        for tr in episode_transitions(raw):
            buf.add(tr)
    return ok, len(raw)


def model_free_baseline(proxy_factory: Callable[[], object], env_steps: int, cfg: BaselineConfig = BaselineConfig(),
                        seed: int = 0) -> list[CurvePoint]:
    """Actor-critic from scratch on proxy features; evaluation every ``eval_interval`` steps."""
    if env_steps < 1:
        raise ValueError("env_steps must be >= 1")
    rng = np.random.default_rng(seed)
    lc = cfg.learner
    learner = Learner.create(FEATURE_DIM, lc, seed, residual=False)
    buf = ReplayBuffer(lc.capacity, seed)
    probe = proxy_factory()
    pose = cfg.pose or default_camera(probe.task_id)
    curve: list[CurvePoint] = []
    steps, ep, next_eval = 0, 0, cfg.eval_interval
    while steps < env_steps:
        proxy = proxy_factory()
        proxy.reset(int(rng.integers(2**31)))
        frac = min(1.0, steps / env_steps)
        sigma = lc.sigma_start + (lc.sigma_end - lc.sigma_start) * frac
        _, n = _baseline_episode(proxy, learner, pose, sigma, rng, buf)
        n = min(n, env_steps - steps)
        steps += n
        ep += 1
        if steps >= cfg.warmup:
            for _ in range(lc.updates_per_episode):
                update(learner, buf.sample(lc.batch), lc)
        while steps >= next_eval and len(curve) < env_steps // cfg.eval_interval:
            wins = 0
            for i in range(cfg.eval_episodes):
                p = proxy_factory()
                p.reset(20_000 + seed * 100 + i)
                wins += _baseline_episode(p, learner, pose, 0.0, rng)[0]
            curve.append(CurvePoint(ep, next_eval, wins / cfg.eval_episodes))
            next_eval += cfg.eval_interval
    return curve
