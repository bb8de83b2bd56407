"""Built-in task geometry: peg insertion through a wall and needle threading.

World frame is z-up, meters; the task center sits at the origin. Fixtures
(wall, ring, occluder slab) are static splat sets that only affect rendering,
except the wall which also enters the peg penetration penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TASK_IDS = ("peg", "needle")

FIXTURE_COLORS = {
    "wall": (0.30, 0.45, 0.75),
    "ring": (0.85, 0.80, 0.20),
    "occluder": (0.35, 0.35, 0.35),
}


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class Occluder:
    """Axis-aligned vertical slab (constant x) spanning a y/z rectangle."""

    x: float = -0.45
    y_range: tuple[float, float] = (-0.22, 0.22)
    z_range: tuple[float, float] = (-0.12, 0.06)
    grid: tuple[int, int] = (23, 10)

    def points(self) -> np.ndarray:
        ys = np.linspace(*self.y_range, self.grid[0])
        zs = np.linspace(*self.z_range, self.grid[1])
        yy, zz = np.meshgrid(ys, zs, indexing="ij")
        return np.stack([np.full(yy.size, self.x), yy.ravel(), zz.ravel()], axis=1)


@dataclass(frozen=True)
class PegTask:
    wall_x: float = 0.0
    wall_thickness: float = 0.04
    wall_y: tuple[float, float] = (-0.14, 0.14)
    wall_z: tuple[float, float] = (-0.06, 0.06)
    hole_y: float = 0.0
    hole_half_width: float = 0.025
    insertion_depth: float = 0.02
    peg_length: float = 0.08
    alpha_hole: float = 0.0
    occluder: Occluder | None = field(default_factory=Occluder)

    task_id = "peg"

    def __post_init__(self):
        if self.hole_half_width <= 0:
            raise ValueError("hole half-width must be positive")

    @property
    def hole_center(self) -> np.ndarray:
        """Goal point for the peg tip: inside the channel, just past the required depth."""
        return np.array([self.wall_x + self.insertion_depth + 0.005, self.hole_y])

    @property
    def tip_offset(self) -> float:
        return 0.5 * self.peg_length

    def fixture_points(self) -> tuple[np.ndarray, np.ndarray]:
        ys = np.linspace(*self.wall_y, 15)
        zs = np.linspace(*self.wall_z, 7)
        yy, zz = np.meshgrid(ys, zs, indexing="ij")
        keep = ~((np.abs(yy - self.hole_y) <= self.hole_half_width) & (np.abs(zz) <= self.hole_half_width))
        wall = np.stack([np.full(keep.sum(), self.wall_x), yy[keep], zz[keep]], axis=1)
        return _with_occluder(wall, FIXTURE_COLORS["wall"], self.occluder)


@dataclass(frozen=True)
class RopeTask:
    ring_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ring_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    ring_radius: float = 0.035
    occluder: Occluder | None = field(
        default_factory=lambda: Occluder(z_range=(-0.10, 0.22), grid=(23, 17)))

    task_id = "needle"

    def __post_init__(self):
        if self.ring_radius <= 0:
            raise ValueError("ring radius must be positive")
        n = np.asarray(self.ring_normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("ring normal must be a unit vector")

    def fixture_points(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.ring_center, dtype=float)
        n = np.asarray(self.ring_normal, dtype=float)
        u = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(n, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        ang = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
        # ring drawn slightly outside the opening so splats do not fill it
        r = self.ring_radius + 0.01
        ring = c + r * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
        return _with_occluder(ring, FIXTURE_COLORS["ring"], self.occluder)


TaskSpec = PegTask | RopeTask


def _with_occluder(pts, color, occluder):
    cols = np.tile(color, (len(pts), 1))
    if occluder is None:
        return pts, cols
    occ = occluder.points()
    return (np.concatenate([pts, occ]),
            np.concatenate([cols, np.tile(FIXTURE_COLORS["occluder"], (len(occ), 1))]))


def make_task(task_id: str, **overrides) -> TaskSpec:
    if task_id == "peg":
        return replace(PegTask(), **overrides)
    if task_id == "needle":
        return replace(RopeTask(), **overrides)
    raise UnknownTaskError(f"unknown task id {task_id!r}; expected one of {TASK_IDS}")
