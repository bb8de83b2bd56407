"""Differentiable soft point-splat renderer.

Each splat contributes a separable Gaussian footprint, so per-channel images
are two small matrix products (rows x splats x columns) instead of a dense
pixel-by-splat loop. Occlusion is an exponential falloff in depth behind the
nearest splat (a soft z-test).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, apply
from .scene import CameraPose, Layout, PITCH_LIMIT, SceneModel, scene_points


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    height: int = 32
    width: int = 32
    sigma: float = 1.5
    tau: float = 0.05
    eps_bg: float = 1e-6
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    d_max: float = 5.0
    near: float = 1e-3
    near_ramp: float = 0.01

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0 or self.eps_bg <= 0:
            raise RenderError("sigma, tau and eps_bg must be positive")


@dataclass(frozen=True)
class Observation:
    rgb: Tensor    # H x W x 3
    depth: Tensor  # H x W, camera z-depth in meters
    mask: Tensor   # H x W soft segmentation of non-fixture objects
    cloud: Tensor  # M x 3 world points, pixels with mask > 0.5
    pose: CameraPose

    def detached(self) -> "Observation":
        return Observation(Tensor(self.rgb.value, check=False), Tensor(self.depth.value, check=False),
                           Tensor(self.mask.value, check=False), Tensor(self.cloud.value, check=False),
                           self.pose)


def _camera_axes_np(yaw, pitch):
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    right = np.array([-sy_, cy_, 0.0])
    down = np.array([sp * cy_, sp * sy_, -cp])
    fwd = np.array([-cp * cy_, -cp * sy_, -sp])
    return np.stack([right, down, fwd]), np.array([cp * cy_, cp * sy_, sp])


def camera_extrinsics(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rigid transform ``x_cam = R @ x_world + t`` (x right, y down, z forward)."""
    if abs(pose.pitch) >= PITCH_LIMIT:
        raise RenderError("camera axis is aligned with the up vector")
    rot, direction = _camera_axes_np(pose.yaw, pose.pitch)
    center = np.asarray(pose.target) + pose.radius * direction
    return rot, -rot @ center


def _camera_axes_t(view: Tensor, pose: CameraPose):
    """Rotation rows and camera center as tensors of ``view = [yaw, pitch(, radius)]``."""
    yaw, pitch = view[0], view[1]
    radius = view[2] if view.shape[0] > 2 else pose.radius
    cy_, sy_ = apply("cos", yaw), apply("sin", yaw)
    cp, sp = apply("cos", pitch), apply("sin", pitch)
    zero = Tensor(0.0)
    rot = apply("stack", -sy_, cy_, zero, sp * cy_, sp * sy_, -cp, -(cp * cy_), -(cp * sy_), -sp).reshape(3, 3)
    direction = apply("stack", cp * cy_, cp * sy_, sp)
    center = Tensor(np.asarray(pose.target)) + direction * radius
    return rot, center


def render_points(points: Tensor, colors: Tensor, seg: np.ndarray, pose: CameraPose,
                  config: RenderConfig = RenderConfig(), view: Tensor | None = None) -> Observation:
    intr = pose.intrinsics
    h, w = intr.height, intr.width
    if (h, w) != (config.height, config.width):
        raise RenderError(f"camera resolution {h}x{w} does not match render config "
                          f"{config.height}x{config.width}")
    bg = np.asarray(config.background, dtype=float)
    eps = config.eps_bg
    if points.shape[0] == 0:
        rgb = np.broadcast_to(bg, (h, w, 3)).copy()
        z = np.zeros((h, w))
        return Observation(Tensor(rgb), Tensor(z), Tensor(z), Tensor(np.zeros((0, 3))), pose)

    if view is None:
        rot_np, center_np = _camera_axes_np(pose.yaw, pose.pitch)
        center_np = np.asarray(pose.target) + pose.radius * center_np
        rot, center = Tensor(rot_np, check=False), Tensor(center_np, check=False)
    else:
        rot, center = _camera_axes_t(view, pose)

    cam = (points - center) @ rot.T
    xc, yc, zc = cam[:, 0], cam[:, 1], cam[:, 2]
    z_safe = apply("clamp", zc, lo=config.near)
    gate = apply("clamp", (zc - config.near) / config.near_ramp, lo=0.0, hi=1.0)
    u = xc / z_safe * intr.fx + intr.cx
    v = yc / z_safe * intr.fy + intr.cy

    inv2s2 = -0.5 / (config.sigma ** 2)
    cols = np.arange(w, dtype=float)[:, None]
    rows = np.arange(h, dtype=float)[:, None]
    gx = apply("exp", apply("square", cols - u[None, :]) * inv2s2)   # W x K
    gy = apply("exp", apply("square", rows - v[None, :]) * inv2s2)   # H x K

    # softmax visibility over live splats; the shift by the nearest depth is a
    # constant that cancels in the normalization, so the result is smooth in pose
    live = gate.value > 0
    if live.any():
        shift = float(zc.value[live].min())
        e = apply("exp", apply("clamp", (zc - shift) * (-1.0 / config.tau), lo=-700.0)) * gate
        vis = e / e.sum()
    else:
        vis = zc * 0.0

    a = gy * vis[None, :]                       # H x K
    gxt = gx.T                                  # K x W
    den = a @ gxt + eps                         # H x W
    chan = apply("concat", colors.T, zc[None, :], Tensor(np.asarray(seg, dtype=float)[None, :]),
                 points.T, axis=0)
    num = (a[None, :, :] * chan[:, None, :]) @ gxt   # 8 x H x W
    rgb = (num[0:3] + (eps * bg)[:, None, None]) / den[None, :, :]
    rgb = rgb.transpose(1, 2, 0)
    depth = num[3] / den
    mask = num[4] / den

    # segmented cloud: per-pixel visibility-weighted mean of splat centers, the
    # 3-D analogue of the depth channel, so it moves laterally with the splats
    ii, jj = np.nonzero(mask.value > 0.5)
    if len(ii) == 0:
        cloud = Tensor(np.zeros((0, 3)))
    else:
        cloud = (num[5:8][:, ii, jj] / den[ii, jj][None, :]).T
    return Observation(rgb, depth, mask, cloud, pose)


def render(scene: SceneModel, pose: CameraPose, config: RenderConfig = RenderConfig(), *,
           vec: Tensor | None = None, layout: Layout | None = None,
           view: Tensor | None = None) -> Observation:
    """Render ``scene`` at ``pose``; ``vec``/``view`` route gradients to model and camera."""
    pts, cols, seg = scene_points(scene, vec, layout)
    return render_points(pts, cols, seg, pose, config, view)


def obs_pointcloud(obs: Observation, pose: CameraPose | None = None) -> np.ndarray:
    """Pinhole back-projection of pixels with mask > 0.5 into the world frame."""
    pose = pose or obs.pose
    rot, t = camera_extrinsics(pose)
    center = -rot.T @ t
    mask = obs.mask.value if isinstance(obs.mask, Tensor) else np.asarray(obs.mask)
    depth = obs.depth.value if isinstance(obs.depth, Tensor) else np.asarray(obs.depth)
    ii, jj = np.nonzero(mask > 0.5)
    if len(ii) == 0:
        return np.zeros((0, 3))
    intr = pose.intrinsics
    d = depth[ii, jj]
    cam = np.stack([(jj - intr.cx) / intr.fx * d, (ii - intr.cy) / intr.fy * d, d], axis=1)
    return cam @ rot + center


def project(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Pixel coordinates (u, v) and depth of world points."""
    rot, t = camera_extrinsics(pose)
    cam = np.asarray(points, dtype=float) @ rot.T + t
    intr = pose.intrinsics
    u = cam[:, 0] / cam[:, 2] * intr.fx + intr.cx
    v = cam[:, 1] / cam[:, 2] * intr.fy + intr.cy
    return np.stack([u, v, cam[:, 2]], axis=1)


# ---------------------------------------------------------------- image export

def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header, body = _split_header(data, 3)
    if header[0] != b"P6":
        raise RenderError(f"{path}: not a binary PPM")
    w, h, maxval = int(header[1]), int(header[2]), int(header[3])
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(float) / maxval


def write_pgm16(path, values: np.ndarray, lo: float | None = None, hi: float | None = None) -> dict:
    """16-bit PGM, linearly scaled; min/max go to a ``.json`` sidecar next to the image."""
    arr = np.asarray(values, dtype=float)
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    scale = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    q = np.clip(np.round(scale * 65535.0), 0, 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
    meta = {"min": lo, "max": hi, "width": w, "height": h}
    Path(str(path) + ".json").write_text(json.dumps(meta))
    return meta


def read_pgm16(path, normalized: bool = False) -> np.ndarray:
    data = Path(path).read_bytes()
    header, body = _split_header(data, 3)
    if header[0] != b"P5":
        raise RenderError(f"{path}: not a binary PGM")
    w, h = int(header[1]), int(header[2])
    q = np.frombuffer(body, dtype=">u2").reshape(h, w).astype(float) / 65535.0
    if normalized:
        return q
    meta = json.loads(Path(str(path) + ".json").read_text())
    return meta["min"] + q * (meta["max"] - meta["min"])


def _split_header(data: bytes, fields: int):
    parts, pos = [], 0
    while len(parts) < fields + 1:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    return parts, data[pos + 1:]


def export_observation(obs: Observation, stem) -> None:
    """rgb -> ``stem.ppm``; depth and mask -> 16-bit ``stem_depth.pgm`` / ``stem_mask.pgm``."""
    stem = str(stem)
    write_ppm(stem + ".ppm", obs.rgb.value)
    write_pgm16(stem + "_depth.pgm", obs.depth.value)
    write_pgm16(stem + "_mask.pgm", obs.mask.value, 0.0, 1.0)
