"""Black-box stand-in for the real world.

Same task dynamics as the differentiable model, but with hidden physical
parameter factors, a hidden object pose offset, a color shift, pixel noise and
(optionally) a hidden additive action bias. Only observations, rewards and
done flags leave the environment; everything hidden lives in a private slot.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor
from .physics import (PegState, PhysicsError, PhysParams, RopeState, default_params, initial_state,
                      state_to_scene, step as phys_step, success)
from .render import Observation, RenderConfig, render
from .scene import CameraPose, SceneModel, default_camera, ground_truth_scene
from .tasks import TASK_IDS, UnknownTaskError, make_task


class ProxyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProxyConfig:
    param_range: tuple[float, float] = (0.8, 1.25)
    pose_scale: float = 0.05
    color_shift: float = 0.05
    sigma_n: float = 0.01
    action_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    horizon: int | None = None

    @classmethod
    def exact(cls, **kw) -> "ProxyConfig":
        """No perturbation and no noise: captures match the model renderer."""
        return cls(param_range=(1.0, 1.0), pose_scale=0.0, color_shift=0.0, sigma_n=0.0, **kw)


_PHYSICAL = {"peg": ("action_scale", "angle_scale"),
             "needle": ("mass", "k_stretch", "k_bend", "damping", "action_scale")}


@dataclass(frozen=True)
class _Hidden:
    params: PhysParams
    scene: SceneModel
    color_shift: np.ndarray
    pose_offset: np.ndarray


def _perturbed_start(task_id: str, params: PhysParams, offset: np.ndarray):
    if task_id == "peg":
        base = initial_state("peg")
        return PegState(base.x + offset[0], base.y + offset[1], base.alpha + offset[2])
    top = np.array([-0.07, 0.0, 0.19]) + np.array([offset[0], offset[1], 0.0])
    return initial_state("needle", params, top=tuple(top))


class ProxyEnv:
    """One episode at a time; not safe for concurrent use."""

    def __init__(self, task_id: str, config: ProxyConfig = ProxyConfig(),
                 params: PhysParams | None = None, render_config: RenderConfig = RenderConfig(),
                 white_box: bool = False, task=None):
        if task_id not in TASK_IDS:
            raise UnknownTaskError(f"unknown task id {task_id!r}; expected one of {TASK_IDS}")
        self.task_id = task_id
        self.task = task or make_task(task_id)
        self.config = config
        self.render_config = render_config
        self._nominal = params or default_params(task_id)
        self._white_box = white_box
        self.__hidden: _Hidden | None = None
        self.__state = None
        self.__rng: np.random.Generator | None = None
        self._t = 0
        self._done = False
        self._success = False
        self.failure: str | None = None

    @property
    def horizon(self) -> int:
        return self.config.horizon or self._nominal.horizon

    @property
    def steps_taken(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        cfg = self.config
        lo, hi = np.log(cfg.param_range[0]), np.log(cfg.param_range[1])
        names = _PHYSICAL[self.task_id]
        factors = np.exp(rng.uniform(lo, hi, size=len(names)))
        params = replace(self._nominal, horizon=self.horizon,
                         **{n: getattr(self._nominal, n) * f for n, f in zip(names, factors)})
        s = cfg.pose_scale
        offset = rng.uniform(-s, s, size=3) * np.array([1.0, 1.0, 2.0])
        shift = rng.uniform(-cfg.color_shift, cfg.color_shift, size=3)
        state = _perturbed_start(self.task_id, params, offset)
        scene = ground_truth_scene(self.task_id, self.task)
        self.__hidden = _Hidden(params, scene, shift, offset)
        self.__state = state
        self.__rng = np.random.default_rng(rng.integers(2**63))
        self._t, self._done, self._success = 0, False, False
        self.failure: str | None = None
        return self.capture(default_camera(self.task_id))

    def _require_reset(self):
        if self.__hidden is None:
            raise ProxyError("environment has not been reset")

    def capture(self, pose: CameraPose) -> Observation:
        self._require_reset()
        hid = self.__hidden
        scene = state_to_scene(hid.scene, self.__state)
        obs = render(scene, pose, self.render_config)
        rgb = obs.rgb.value
        if self.config.color_shift or self.config.sigma_n:
            rgb = rgb + hid.color_shift
            if self.config.sigma_n:
                rgb = rgb + self.__rng.normal(0.0, self.config.sigma_n, rgb.shape)
            rgb = np.clip(rgb, 0.0, 1.0)
        return Observation(Tensor(rgb, check=False), Tensor(obs.depth.value, check=False),
                           Tensor(obs.mask.value, check=False), Tensor(obs.cloud.value, check=False), pose)

    def step(self, action) -> tuple[float, bool, bool]:
        self._require_reset()
        if self._done:
            raise ProxyError("episode is done; call reset first")
        hid = self.__hidden
        a = np.clip(np.asarray(action, dtype=float).reshape(3), -1.0, 1.0) - np.asarray(self.config.action_bias)
        prev = self.__state
        try:
            self.__state, reward, done = phys_step(prev, a, hid.params, self.task, self._t)
        except PhysicsError as exc:
            # an overstretched rope ends the episode as a failure, as a torn thread would
            self._t += 1
            self._done, self._success, self.failure = True, False, str(exc)
            tip = prev.positions[-1] - np.asarray(self.task.ring_center, dtype=float)
            return -float(np.linalg.norm(tip)), True, False
        self._t += 1
        self._success = success(prev, self.__state, self.task)
        self._done = done
        return reward, done, self._success

    def _white_box_state(self):
        """Test-only hook; refuses unless the env was created with ``white_box=True``."""
        if not self._white_box:
            raise ProxyError("white-box access is disabled for this environment")
        self._require_reset()
        hid = self.__hidden
        return {"state": self.__state, "params": hid.params, "pose_offset": hid.pose_offset.copy(),
                "color_shift": hid.color_shift.copy(), "task": self.task}


def white_box(env: ProxyEnv) -> dict:
    """Ground-truth view of a white-box environment (tests and ``--white-box`` only)."""
    return env._white_box_state()
