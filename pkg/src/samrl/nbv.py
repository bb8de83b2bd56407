"""Sensing-aware view selection and the test-stage episode loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, apply, grad
from .neural import FEATURE_DIM, AdamState, MlpParams, adam_step, featurize, featurize_t, mlp_forward, mlp_np
from .physics import (PhysParams, RopeState, State, default_params, project_rope, scene_to_state,
                      state_to_scene, step as phys_step)
from .real2sim import Real2SimConfig, update_model
from .render import Observation, RenderConfig, RenderError, render
from .scene import PITCH_LIMIT, CameraPose, SceneModel, default_camera


@dataclass(frozen=True)
class NbvConfig:
    lr: float = 0.05
    k_max: int = 10
    update_per_candidate: bool = True
    candidate_update_steps: int = 10
    model_update: bool = True
    update_steps: int = 50
    through_actor: bool = False

    def __post_init__(self):
        if self.k_max < 0 or self.lr <= 0:
            raise ValueError("k_max must be >= 0 and lr > 0")


def q_value(q_net: MlpParams, feature: np.ndarray, action: np.ndarray) -> float:
    return float(mlp_np(q_net, np.concatenate([feature, action])[None])[0, 0])


def q_of_view(scene: SceneModel, pose: CameraPose, actor: MlpParams, q_net: MlpParams,
              config: RenderConfig = RenderConfig()) -> tuple[Observation, np.ndarray, float]:
    """Render at ``pose``, act on the rendering and score the action."""
    obs = render(scene, pose, config)
    f = featurize(obs)
    a = mlp_np(actor, f[None])[0]
    return obs, a, q_value(q_net, f, a)


def pose_gradient(scene: SceneModel, pose: CameraPose, actor: MlpParams, q_net: MlpParams,
                  config: RenderConfig = RenderConfig(), through_actor: bool = False) -> np.ndarray:
    """dQ/d(yaw, pitch); the action is held at pi(I(P)) unless ``through_actor``."""
    tape = Tape()
    view = tape.variable(np.array([pose.yaw, pose.pitch]))
    obs = render(scene, pose, config, view=view)
    f = featurize_t(obs)
    if through_actor:
        a = mlp_forward(actor, f)
    else:
        a = Tensor(mlp_np(actor, f.value[None])[0])
    q = mlp_forward(q_net, apply("concat", f, a, axis=0))
    return grad(q.sum(), [view])[0]


@dataclass
class ViewResult:
    pose: CameraPose
    obs: Observation
    action: np.ndarray
    q0: float
    q: float
    accepted: bool
    scene: SceneModel
    candidates: int = 0
    loss_traces: list = field(default_factory=list)


def _clamp_pitch(p: float) -> float:
    lim = PITCH_LIMIT - 1e-9
    return min(max(p, -lim), lim)


def optimize_view(scene: SceneModel, pose0: CameraPose, actor: MlpParams, q_net: MlpParams,
                  cfg: NbvConfig = NbvConfig(), config: RenderConfig = RenderConfig(),
                  on_candidate: Callable[[CameraPose, SceneModel], tuple[SceneModel, list]] | None = None
                  ) -> ViewResult:
    """Up to ``k_max`` Adam ascent steps on (yaw, pitch); keeps the best-Q pose.

    ``on_candidate`` lets the caller refresh the model at each candidate pose
    (capture + model update) before its Q is evaluated. The best pose is
    returned when its Q is at least the starting Q, else the start is kept.
    """
    obs0, a0, q0 = q_of_view(scene, pose0, actor, q_net, config)
    best = ViewResult(pose0, obs0, a0, q0, q0, True, scene)
    x = np.array([pose0.yaw, pose0.pitch])
    state = AdamState.zeros_like([x])
    cur_scene, cur_pose = scene, pose0
    traces = []
    for _ in range(cfg.k_max):
        g = pose_gradient(cur_scene, cur_pose, actor, q_net, config, cfg.through_actor)
        if not np.any(g):
            break
        (x,), state = adam_step([x], [-g], state, cfg.lr)
        x[1] = _clamp_pitch(x[1])
        cand = cur_pose.with_angles(float(x[0]), float(x[1]))
        try:
            cand_scene = cur_scene
            if on_candidate is not None:
                cand_scene, trace = on_candidate(cand, cur_scene)
                traces.append(trace)
            obs, a, q = q_of_view(cand_scene, cand, actor, q_net, config)
        except RenderError:
            continue
        best.candidates += 1
        cur_scene, cur_pose = cand_scene, cand
        if q > best.q:
            best = ViewResult(cand, obs, a, q0, q, True, cand_scene, best.candidates)
    best.loss_traces = traces
    if best.q >= q0:
        return best
    return ViewResult(pose0, obs0, a0, q0, q0, False, scene, best.candidates, traces)


# -------------------------------------------------------------- episode

@dataclass
class StepRecord:
    pose_before: dict
    pose_after: dict
    q_before: float
    q_after: float
    accepted: bool
    a_sim: list
    a_real: list
    reward: float
    loss_trace: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpisodeResult:
    steps: list[StepRecord]
    success: bool
    n_steps: int
    transitions: list = field(default_factory=list)

    def check_monotone(self) -> bool:
        return all(s.q_after >= s.q_before for s in self.steps)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, s in enumerate(self.steps):
                fh.write(json.dumps({"t": i, **s.to_dict(), "success": self.success}) + "\n")


@dataclass(frozen=True)
class EpisodeConfig:
    nbv: NbvConfig = NbvConfig()
    real2sim: Real2SimConfig = Real2SimConfig()
    render: RenderConfig = RenderConfig()
    sigma: float = 0.0
    max_steps: int | None = None


def test_episode(scene: SceneModel, proxy, actor: MlpParams, q_net: MlpParams, residual: MlpParams | None,
                 cfg: EpisodeConfig = EpisodeConfig(), params: PhysParams | None = None,
                 pose0: CameraPose | None = None, rng: np.random.Generator | None = None) -> EpisodeResult:
    """Test-stage loop on a reset proxy.

    Each step: capture and update the model at the current pose, act in the
    model, search for a better view (capture + update at every candidate),
    correct the action with the residual and execute it in the proxy and in
    the model.
    """
    from .residual import residual_act
    params = params or default_params(scene.task_id)
    rng = rng or np.random.default_rng(0)
    pose = pose0 or default_camera(scene.task_id)
    sim_state = scene_to_state(scene)
    nbv = cfg.nbv
    upd_main = replace(cfg.real2sim, steps=nbv.update_steps)
    upd_cand = replace(cfg.real2sim, steps=max(1, nbv.candidate_update_steps))
    steps: list[StepRecord] = []
    transitions = []
    success = False
    limit = cfg.max_steps or proxy.horizon

    def refresh(p: CameraPose, sc: SceneModel, c: Real2SimConfig):
        real = proxy.capture(p)
        if not nbv.model_update:
            return sc, [], real
        res = update_model(sc, real, p, c, cfg.render)
        return res.scene, res.trace, real

    prev_feat = prev_a = None
    for t in range(limit):
        scene, trace, real = refresh(pose, scene, upd_main)
        sim_state = _sync(scene, sim_state, params)
        pose_before = pose

        def on_candidate(p, sc):
            new_sc, tr, _ = refresh(p, sc, upd_cand)
            return new_sc, tr

        use_cb = on_candidate if (nbv.update_per_candidate and nbv.model_update) else None
        vr = optimize_view(scene, pose, actor, q_net, nbv, cfg.render, use_cb)
        if vr.pose is not pose:
            real = proxy.capture(vr.pose)
        pose, scene = vr.pose, vr.scene
        sim_state = _sync(scene, sim_state, params)
        a_sim = vr.action
        f_real = featurize(real)
        if residual is not None:
            a_real = residual_act(residual, f_real, a_sim, cfg.sigma, rng)
        else:
            a_real = np.clip(a_sim, -1.0, 1.0)
        reward, done, ok = proxy.step(a_real)
        sim_state, _, _ = phys_step(sim_state, a_real, params, scene.task, t)
        scene = state_to_scene(scene, sim_state)
        steps.append(StepRecord(pose_before.to_dict(), pose.to_dict(), vr.q0, vr.q, vr.accepted,
                                a_sim.tolist(), np.asarray(a_real).tolist(), reward,
                                [trace] + vr.loss_traces))
        transitions.append((f_real, np.asarray(a_real), a_sim, reward, done))
        if ok:
            success = True
        if done:
            break
    return EpisodeResult(steps, success, len(steps), transitions)


test_episode.__test__ = False   # not a pytest test despite the name


def _sync(scene: SceneModel, sim_state: State, params: PhysParams) -> State:
    """Model object pose/particles drive the simulated state; rope velocities persist."""
    vel = getattr(sim_state, "velocities", None)
    if vel is None:
        return scene_to_state(scene)
    pts = project_rope(scene.manipulated.world_points(), params.rest_length)
    return RopeState(pts, vel)


def q_heatmap(scene: SceneModel, actor: MlpParams, q_net: MlpParams, yaws, pitches,
              base: CameraPose | None = None, config: RenderConfig = RenderConfig()) -> np.ndarray:
    """Q at every (pitch, yaw) grid pose; rows are pitches."""
    base = base or default_camera(scene.task_id)
    out = np.zeros((len(pitches), len(yaws)))
    for i, p in enumerate(pitches):
        for j, y in enumerate(yaws):
            out[i, j] = q_of_view(scene, base.with_angles(float(y), float(p)), actor, q_net, config)[2]
    return out
