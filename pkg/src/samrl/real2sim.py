"""Render-and-compare model updating: masked image loss, cloud EMD and the
gradient loop on the flattened scene parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Tape, Tensor, apply, grad
from .neural import AdamState, adam_step
from .render import Observation, RenderConfig, render
from .scene import (CameraPose, SceneModel, UpdateMask, flatten_params, fps_indices,
                    unflatten_params)


class Real2SimError(ValueError):
    pass


@dataclass(frozen=True)
class Real2SimConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 0.01
    steps: int = 50
    n_cloud: int = 64
    mask: UpdateMask = field(default_factory=UpdateMask)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise Real2SimError("loss weights must be non-negative and not both zero")
        if self.steps < 1 or self.n_cloud < 1:
            raise Real2SimError("steps and cloud size must be >= 1")
        if self.lr <= 0:
            raise Real2SimError("learning rate must be positive")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def masked_l1(obs_a: Observation, obs_b: Observation) -> Tensor:
    """Mean over pixels and channels of |G_a * rgb_a - G_b * rgb_b|."""
    if obs_a.rgb.shape != obs_b.rgb.shape:
        raise Real2SimError(f"resolution mismatch: {obs_a.rgb.shape} vs {obs_b.rgb.shape}")
    a = _t(obs_a.rgb) * _t(obs_a.mask)[:, :, None]
    b = _t(obs_b.rgb) * _t(obs_b.mask)[:, :, None]
    return apply("abs", a - b).mean()


def emd_assignment(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column index matched to each row of ``x`` under the minimum total Euclidean cost."""
    cost = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(x), dtype=int)
    out[rows] = cols
    return out


def emd(x, y) -> Tensor:
    """Mean matched distance of the optimal bijection; gradients hold the assignment fixed."""
    x, y = _t(x), _t(y)
    if x.shape != y.shape or x.ndim != 2:
        raise Real2SimError(f"emd needs equal-size point sets, got {x.shape} and {y.shape}")
    if x.shape[0] == 0:
        return Tensor(0.0)
    perm = emd_assignment(x.value, y.value)
    d = x - y[perm]
    dist = apply("sqrt", (d * d).sum(axis=1))
    # summing in sorted order makes emd(x, y) == emd(y, x) bit for bit
    return dist[np.argsort(dist.value, kind="stable")].mean()


def resample_cloud(cloud, n: int):
    """Farthest-point resample to exactly ``n`` points (keeps the tape for tensors)."""
    c = _t(cloud)
    if c.shape[0] == 0:
        return c
    return c[fps_indices(c.value, n)]


def model_loss(obs_sim: Observation, obs_real: Observation, cfg: Real2SimConfig = Real2SimConfig()) -> Tensor:
    """lambda1 * masked L1 + lambda2 * EMD between resampled clouds.

    When either cloud is empty the EMD term is dropped (there is nothing to match).
    """
    loss = masked_l1(obs_sim, obs_real) * cfg.lambda1 if cfg.lambda1 else Tensor(0.0)
    if cfg.lambda2:
        xs, ys = resample_cloud(obs_sim.cloud, cfg.n_cloud), resample_cloud(obs_real.cloud, cfg.n_cloud)
        if xs.shape[0] and ys.shape[0]:
            loss = loss + emd(xs, ys) * cfg.lambda2
    return loss


REJECT_RATIO = 1.1


@dataclass
class UpdateResult:
    scene: SceneModel
    trace: list[float]


def update_model(scene: SceneModel, obs_real: Observation, pose: CameraPose,
                 cfg: Real2SimConfig = Real2SimConfig(),
                 render_config: RenderConfig = RenderConfig()) -> UpdateResult:
    """Adam on the masked parameter vector; returns the lowest-loss scene seen and the loss trace.

    The loss is piecewise smooth (cloud membership and EMD assignments switch),
    so a trial iterate whose loss exceeds the running minimum by more than
    ``REJECT_RATIO`` is rejected: the update restarts from the best iterate with
    half the step size and fresh moments. The trace holds the loss of the
    accepted iterate at each step, before that step's update.
    """
    vec, layout = flatten_params(scene, cfg.mask)
    if layout.size == 0:
        return UpdateResult(scene, [])
    state = AdamState.zeros_like([vec])
    lr = cfg.lr
    trace: list[float] = []
    cur = scene
    best = None   # (loss, scene, vec, grad)
    for _ in range(cfg.steps):
        tape = Tape()
        v = tape.variable(vec)
        obs = render(cur, pose, render_config, vec=v, layout=layout)
        loss = model_loss(obs, obs_real, cfg)
        val = loss.item()
        if best is not None and val > REJECT_RATIO * best[0]:
            val, cur, vec, g = best
            lr *= 0.5
            state = AdamState.zeros_like([vec])
        else:
            g = grad(loss, [v])[0] if val > 0.0 else np.zeros_like(vec)
            if best is None or val < best[0]:
                best = (val, cur, vec, g)
        trace.append(val)
        if val == 0.0:
            break
        (vec,), state = adam_step([vec], [g], state, lr)
        cur = unflatten_params(cur, vec, layout)
        vec, _ = flatten_params(cur, cfg.mask)   # renormalized quaternions, clipped colors
    return UpdateResult(best[1], trace)
