"""Experiment configuration, training pipeline, evaluation suites and metric files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .autodiff import Tensor, apply, grad_check
from .learn_sim import (LearnConfig, generate_demos, policy_rollouts, sample_starts, train_actor, train_q,
                        view_grid)
from .nbv import EpisodeConfig, NbvConfig, q_heatmap, test_episode
from .neural import FEATURE_DIM, MlpParams, checkpoint_load, checkpoint_save, featurize_t, init_mlp, mlp_forward
from .physics import PhysParams, default_params, initial_state, state_to_scene, total_return_t
from .proxy import ProxyConfig, ProxyEnv
from .real2sim import Real2SimConfig
from .render import RenderConfig, read_pgm16, render, write_pgm16
from .residual import BaselineConfig, ResidualConfig, model_free_baseline, train_residual
from .scene import Intrinsics, UpdateMask, default_camera, flatten_params, ground_truth_scene
from .tasks import TASK_IDS, make_task

MODES = ("ours", "no-pose-opt", "fixed-view")
ABLATIONS = ("full", "no-update", "no-residual")
CSV_COLUMNS = ("task", "mode", "seed", "success", "steps", "mean_q", "wallclock_s")


class ConfigError(ValueError):
    pass


class CheckpointMissing(FileNotFoundError):
    pass


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class TrainConfig:
    n_demos: int = 24
    demo_scale: float = 0.15
    demo_iters: int = 60
    yaw_half_range: float = 0.3
    n_yaw: int = 3
    pitch_range: tuple[float, float] = (0.05, 0.65)
    n_pitch: int = 5
    q_starts: int = 12


@dataclass(frozen=True)
class ExperimentConfig:
    task_id: str = "peg"
    mode: str = "ours"
    seeds: tuple[int, ...] = tuple(range(20))
    perturbation: float = 0.1
    horizon: int = 20
    out_dir: str = "runs"
    render: RenderConfig = RenderConfig()
    phys: dict = field(default_factory=dict)
    real2sim: Real2SimConfig = Real2SimConfig(steps=10)
    nbv: NbvConfig = NbvConfig(k_max=8, update_steps=10, candidate_update_steps=3)
    learn: LearnConfig = LearnConfig(horizon=20, hidden=(128, 64), epochs=30)
    train: TrainConfig = TrainConfig()
    residual: ResidualConfig = ResidualConfig(hidden=(64, 32), updates_per_episode=20, eval_every=10)
    residual_episodes: int = 20
    baseline_steps: int = 20000
    baseline_interval: int = 1000

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ConfigError(f"task_id: unknown task {self.task_id!r}; expected one of {TASK_IDS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}; expected one of {MODES}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds: must be non-empty")
        if self.perturbation < 0:
            raise ConfigError("perturbation: must be >= 0")
        unknown = set(self.phys) - {f.name for f in dataclasses.fields(PhysParams)}
        if unknown:
            raise ConfigError(f"phys: unknown keys {sorted(unknown)}")

    def params(self) -> PhysParams:
        return default_params(self.task_id, **{**self.phys, "horizon": self.horizon})

    def proxy_config(self, perturbation: float | None = None) -> ProxyConfig:
        """One knob: pose offset scale p and physical factors in [1/(1+2p), 1+2p]."""
        p = self.perturbation if perturbation is None else perturbation
        return ProxyConfig(param_range=(1.0 / (1.0 + 2 * p), 1.0 + 2 * p), pose_scale=p, horizon=self.horizon)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


def _to_jsonable(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _to_jsonable(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, (tuple, list)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    return x


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, path: str):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(type(default), value, path, base=default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        item = default[0] if default else value[0] if value else None
        return tuple(_coerce(v, item, f"{path}[{i}]") if item is not None else v for i, v in enumerate(value))
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    return value


def _build(cls, d: dict, path: str, base=None):
    """Keys in ``d`` override ``base`` (a nested field's default instance) or the class defaults."""
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    kw = {} if base is None else {f.name: getattr(base, f.name) for f in dataclasses.fields(cls) if f.init}
    for name, value in d.items():
        default = getattr(base, name) if base is not None else _default_of(fields[name])
        if value is None:
            kw[name] = None
            continue
        kw[name] = _coerce(value, default, f"{path}.{name}")
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ----------------------------------------------------------------- training

@dataclass
class Networks:
    actor: MlpParams
    q: MlpParams
    fixed_actor: MlpParams


CKPT_NAMES = {"actor": "actor.ckpt", "q": "q.ckpt", "fixed_actor": "fixed_actor.ckpt"}


def training_views(cfg: ExperimentConfig):
    cam = default_camera(cfg.task_id)
    t = cfg.train
    return view_grid((cam.yaw - t.yaw_half_range, cam.yaw + t.yaw_half_range), t.pitch_range,
                     t.n_yaw, t.n_pitch, cam.radius, cam.target)


def make_demos(cfg: ExperimentConfig, seed: int = 0):
    params = cfg.params()
    starts = sample_starts(cfg.task_id, cfg.train.n_demos, cfg.train.demo_scale, seed, params)
    return generate_demos(cfg.task_id, starts, cfg.horizon, cfg.train.demo_iters, params)


def train_networks(cfg: ExperimentConfig, seed: int = 0, out_dir=None, demos=None,
                   log: Callable[[str], None] = lambda s: None) -> Networks:
    """Demos, multi-view DAgger actor, Q on executed actions, and a single-view actor at the default camera."""
    task = make_task(cfg.task_id)
    params = cfg.params()
    scene = ground_truth_scene(cfg.task_id, task)
    learn = replace(cfg.learn, horizon=cfg.horizon)
    demos = demos if demos is not None else make_demos(cfg, seed)
    log(f"demos: {len(demos)}")
    views = training_views(cfg)
    res = train_actor(demos, views, learn.dagger_iters, learn.epochs, seed, scene, task, params, learn,
                      render_config=cfg.render)
    log(f"actor dataset sizes: {res.dataset_sizes}")
    starts = np.stack([s.vector() for s in sample_starts(cfg.task_id, cfg.train.q_starts, cfg.train.demo_scale,
                                                         seed + 1, params)])
    q_data = list(res.q_data)
    for vi in range(len(views)):
        q_data += policy_rollouts(task, params, scene, views, res.params, starts, np.full(len(starts), vi), learn,
                                  cfg.render)
    q, losses = train_q(q_data, learn.q_epochs, seed, learn.hidden, learn.lr, learn.batch)
    log(f"q: {len(q_data)} samples, loss {losses[0]:.4g} -> {losses[-1]:.4g}")
    fixed = train_actor(demos, [default_camera(cfg.task_id)], learn.dagger_iters, learn.epochs, seed, scene, task,
                        params, learn, render_config=cfg.render)
    nets = Networks(res.params, q, fixed.params)
    if out_dir is not None:
        save_networks(nets, out_dir)
    return nets


def save_networks(nets: Networks, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for attr, name in CKPT_NAMES.items():
        checkpoint_save(getattr(nets, attr), out / name)


def load_networks(out_dir) -> Networks:
    out = Path(out_dir)
    missing = [str(out / n) for n in CKPT_NAMES.values() if not (out / n).is_file()]
    if missing:
        raise CheckpointMissing(f"missing checkpoints: {', '.join(missing)}")
    return Networks(*(checkpoint_load(out / n) for n in CKPT_NAMES.values()))


# --------------------------------------------------------------- evaluation

@dataclass
class EvalRecord:
    task: str
    mode: str
    seed: int
    success: int
    steps: int
    mean_q: float
    wallclock_s: float
    obs_hash: str = ""


def start_scene(cfg: ExperimentConfig):
    scene = ground_truth_scene(cfg.task_id)
    return state_to_scene(scene, initial_state(cfg.task_id, cfg.params()))


def _obs_hash(obs) -> str:
    return hashlib.sha256(np.ascontiguousarray(obs.rgb.value).tobytes()).hexdigest()[:16]


def run_mode(cfg: ExperimentConfig, nets: Networks, mode: str, seed: int, residual: MlpParams | None = None,
             perturbation: float | None = None, model_update: bool = True) -> EvalRecord:
    params = cfg.params()
    proxy = ProxyEnv(cfg.task_id, cfg.proxy_config(perturbation), params, cfg.render)
    first = proxy.reset(seed)
    nbv = replace(cfg.nbv, model_update=model_update)
    actor = nets.actor
    if mode in ("no-pose-opt", "fixed-view"):
        nbv = replace(nbv, k_max=0)
    if mode == "fixed-view":
        actor = nets.fixed_actor
    ecfg = EpisodeConfig(nbv=nbv, real2sim=cfg.real2sim, render=cfg.render)
    t0 = time.perf_counter()
    res = test_episode(start_scene(cfg), proxy, actor, nets.q, residual, ecfg, params,
                       default_camera(cfg.task_id), np.random.default_rng(seed))
    wall = time.perf_counter() - t0
    mean_q = float(np.mean([s.q_after for s in res.steps])) if res.steps else 0.0
    return EvalRecord(cfg.task_id, mode, int(seed), int(res.success), res.n_steps, mean_q, wall, _obs_hash(first))


@dataclass
class EvalResult:
    records: list[EvalRecord]
    rates: dict[str, float]
    paired: bool


def _summarize(records: list[EvalRecord], modes) -> EvalResult:
    rates = {m: float(np.mean([r.success for r in records if r.mode == m])) for m in modes}
    by_seed: dict[int, set] = {}
    for r in records:
        by_seed.setdefault(r.seed, set()).add(r.obs_hash)
    return EvalResult(records, rates, all(len(h) == 1 for h in by_seed.values()))


def eval_success(cfg: ExperimentConfig, nets: Networks | None = None, modes=MODES,
                 log: Callable[[str], None] = lambda s: None) -> EvalResult:
    """Every mode on the same proxy seeds; ``paired`` checks that each seed saw identical first captures."""
    nets = nets or load_networks(cfg.out_dir)
    records = []
    for mode in modes:
        for seed in cfg.seeds:
            records.append(run_mode(cfg, nets, mode, seed))
            log(f"{mode} seed {seed}: success {records[-1].success}")
    return _summarize(records, modes)


def train_residual_policy(cfg: ExperimentConfig, nets: Networks, seed: int = 0, perturbation: float | None = None,
                          model_update: bool = True):
    params = cfg.params()
    nbv = replace(cfg.nbv, model_update=model_update)
    ecfg = EpisodeConfig(nbv=nbv, real2sim=cfg.real2sim, render=cfg.render)
    scene = start_scene(cfg)
    factory = lambda: ProxyEnv(cfg.task_id, cfg.proxy_config(perturbation), params, cfg.render)

    def run_episode(proxy, res, sigma, rng):
        return test_episode(scene, proxy, nets.actor, nets.q, res, replace(ecfg, sigma=sigma), params,
                            default_camera(cfg.task_id), rng)

    return train_residual(factory, scene, nets.actor, nets.q, cfg.residual_episodes, cfg.residual, seed,
                          ecfg, run_episode=run_episode)


def ablate(cfg: ExperimentConfig, nets: Networks | None = None, perturbation: float = 0.15, seed: int = 0,
           log: Callable[[str], None] = lambda s: None) -> EvalResult:
    """full (update + residual), no-update (residual trained without model updates), no-residual."""
    nets = nets or load_networks(cfg.out_dir)
    res_full = train_residual_policy(cfg, nets, seed, perturbation, True).residual
    log("residual (full) trained")
    res_noupd = train_residual_policy(cfg, nets, seed, perturbation, False).residual
    log("residual (no-update) trained")
    variants = {"full": (res_full, True), "no-update": (res_noupd, False), "no-residual": (None, True)}
    records = []
    for name, (res, upd) in variants.items():
        for s in cfg.seeds:
            r = run_mode(cfg, nets, "ours", s, res, perturbation, upd)
            records.append(replace(r, mode=name))
        log(f"{name}: {np.mean([r.success for r in records if r.mode == name]):.2f}")
    return _summarize(records, ABLATIONS)


# ------------------------------------------------------------------ metrics

def write_metrics(records, path, timing_sidecar: bool = True) -> None:
    """Fixed-column UTF-8 CSV. Wall-clock times go to ``<path>.timing.json`` so the CSV is byte-reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    timing = []
    for r in records:
        d = r if isinstance(r, dict) else dataclasses.asdict(r)
        w.writerow([d["task"], d["mode"], d["seed"], int(d["success"]), d["steps"], f"{float(d['mean_q']):.6f}", ""])
        timing.append({"mode": d["mode"], "seed": d["seed"], "wallclock_s": float(d.get("wallclock_s", 0.0))})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    if timing_sidecar:
        Path(str(path) + ".timing.json").write_text(json.dumps(timing, indent=1), encoding="utf-8")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"], r["success"], r["steps"] = int(r["seed"]), int(r["success"]), int(r["steps"])
        r["mean_q"] = float(r["mean_q"])
    return rows


def write_heatmap(matrix: np.ndarray, path, yaws=None, pitches=None) -> dict:
    """16-bit PGM, min-max normalized; sidecar ``<path>.json`` carries the range and the axes."""
    meta = write_pgm16(path, np.asarray(matrix, dtype=float))
    if yaws is not None:
        meta["yaws"] = [float(v) for v in yaws]
    if pitches is not None:
        meta["pitches"] = [float(v) for v in pitches]
    Path(str(path) + ".json").write_text(json.dumps(meta), encoding="utf-8")
    return meta


def read_heatmap(path, normalized: bool = True) -> np.ndarray:
    return read_pgm16(path, normalized=normalized)


def heatmap(cfg: ExperimentConfig, nets: Networks, n_yaw: int = 9, n_pitch: int = 7):
    cam = default_camera(cfg.task_id)
    yaws = np.linspace(cam.yaw - 0.5, cam.yaw + 0.5, n_yaw)
    pitches = np.linspace(0.0, 0.7, n_pitch)
    return q_heatmap(start_scene(cfg), nets.actor, nets.q, yaws, pitches, cam, cfg.render), yaws, pitches


def baseline(cfg: ExperimentConfig, seed: int = 0, env_steps: int | None = None, factory=None):
    params = cfg.params()
    factory = factory or (lambda: ProxyEnv(cfg.task_id, cfg.proxy_config(), params, cfg.render))
    bc = BaselineConfig(learner=replace(cfg.residual, actor_lr=1e-3, sigma_start=0.3, sigma_end=0.1),
                        eval_interval=cfg.baseline_interval)
    return model_free_baseline(factory, env_steps or cfg.baseline_steps, bc, seed)


# ---------------------------------------------------------------- gradcheck

@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _small_cfg() -> RenderConfig:
    return RenderConfig(height=16, width=16, sigma=1.2)


def gradcheck_suite(n: int = 10, seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks of the renderer, physics and the full Q chain at ``n`` seeded configurations."""
    rng = np.random.default_rng(seed)
    rc = _small_cfg()
    out = {"render-pose": 0.0, "render-model": 0.0, "physics": 0.0, "q-chain": 0.0}
    for i in range(n):
        tid = TASK_IDS[i % len(TASK_IDS)]
        scene = state_to_scene(ground_truth_scene(tid), initial_state(tid))
        cam = default_camera(tid, Intrinsics.from_fov(rc.width, rc.height))
        pose = cam.with_angles(cam.yaw + rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.6))
        v0 = np.array([pose.yaw, pose.pitch])
        wpix = rng.uniform(0.5, 1.5, (rc.height, rc.width))

        def pix_view(v):
            obs = render(scene, pose, rc, view=v)
            return (obs.rgb.sum(axis=2) * wpix).sum()

        out["render-pose"] = max(out["render-pose"], grad_check(pix_view, v0, step=1e-5).max_rel_error)

        mask = UpdateMask(pose=True, particles=False) if tid == "peg" else UpdateMask(pose=False, particles=True)
        vec, layout = flatten_params(scene, mask)
        sel = rng.choice(vec.size, size=min(6, vec.size), replace=False)

        def pix_model(sub):
            obs = render(scene, pose, rc, vec=_scatter(vec, sel, sub), layout=layout)
            return (obs.rgb.sum(axis=2) * wpix).sum()

        out["render-model"] = max(out["render-model"], grad_check(pix_model, vec[sel], step=1e-6).max_rel_error)

        params = default_params(tid, horizon=5)
        task = make_task(tid)
        s0 = Tensor(initial_state(tid, params).vector()[None])
        acts = rng.uniform(-0.8, 0.8, (1, 5, 3))
        # h=1e-5: late actions have ~1e-12 true gradients, so smaller steps measure roundoff against the 1e-8 floor
        out["physics"] = max(out["physics"], grad_check(lambda a: total_return_t(s0, a, params, task).sum(),
                                                        acts, step=1e-5).max_rel_error)

        q_net = init_mlp((FEATURE_DIM + 3, 16, 1), seed + 100 + i)
        a_fix = Tensor(rng.uniform(-0.5, 0.5, 3))

        def chain(v):
            f = featurize_t(render(scene, pose, rc, view=v))
            return mlp_forward(q_net, apply("concat", f, a_fix, axis=0)).sum()

        out["q-chain"] = max(out["q-chain"], grad_check(chain, v0, step=1e-5).max_rel_error)
    tols = {"render-pose": 1e-3, "render-model": 1e-3, "physics": 1e-3, "q-chain": 1e-2}
    return [CheckResult(k, float(v), tols[k]) for k, v in out.items()]


def _scatter(base: np.ndarray, idx: np.ndarray, sub: Tensor) -> Tensor:
    """``base`` with entries ``idx`` replaced by ``sub`` (differentiable in ``sub``)."""
    onehot = np.zeros((len(idx), base.size))
    onehot[np.arange(len(idx)), idx] = 1.0
    keep = base.copy()
    keep[idx] = 0.0
    return sub @ onehot + keep
