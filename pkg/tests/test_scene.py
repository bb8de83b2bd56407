import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samrl.autodiff import Tape, grad
from samrl.render import RenderConfig, render
from samrl.scene import (CameraPose, Intrinsics, SceneError, UpdateMask, default_camera, flatten_params,
                         ground_truth_scene, init_model, resample_points, scene_from_json, scene_to_json,
                         unflatten_params)
from samrl.tasks import UnknownTaskError


@pytest.mark.parametrize("tid", ["peg", "needle"])
def test_zero_scale_is_ground_truth(tid):
    gt = ground_truth_scene(tid)
    for seed in range(3):
        assert init_model(tid, seed, 0.0).equals(gt)


@pytest.mark.parametrize("tid", ["peg", "needle"])
def test_same_seed_same_scene(tid):
    assert init_model(tid, 7, 0.05).equals(init_model(tid, 7, 0.05))
    assert not init_model(tid, 7, 0.05).equals(init_model(tid, 8, 0.05))


def test_translation_offset_bound():
    gt = ground_truth_scene("peg").manipulated.translation
    for seed in range(100):
        off = init_model("peg", seed, 0.05).manipulated.translation - gt
        assert np.linalg.norm(off) <= 0.05 * math.sqrt(3) + 1e-12


def test_particle_jitter_bound():
    gt = ground_truth_scene("needle").manipulated.points
    pts = init_model("needle", 3, 0.03).manipulated.points
    assert np.abs(pts - gt).max() <= 0.03


def test_errors():
    with pytest.raises(UnknownTaskError):
        init_model("spatula")
    with pytest.raises(SceneError):
        init_model("peg", 0, -1.0)
    with pytest.raises(SceneError):
        CameraPose(0.0, math.pi / 2)
    with pytest.raises(SceneError):
        CameraPose(0.0, 0.0, radius=0.0)
    with pytest.raises(SceneError):
        Intrinsics(width=4)


@settings(max_examples=20, deadline=None)
@given(tid=st.sampled_from(["peg", "needle"]), seed=st.integers(0, 1000), scale=st.floats(0.0, 0.2),
       colors=st.booleans())
def test_flatten_unflatten_roundtrip(tid, seed, scale, colors):
    scene = init_model(tid, seed, scale)
    mask = UpdateMask(colors=colors)
    vec, layout = flatten_params(scene, mask)
    assert vec.size == layout.size == sum(int(np.prod(e.shape)) for e in layout.entries)
    back = unflatten_params(scene, vec, layout)
    assert back.equals(scene)
    for o in back.objects:
        assert abs(np.linalg.norm(o.quaternion) - 1.0) < 1e-9


def test_unflatten_renormalizes_quaternion():
    scene = ground_truth_scene("peg")
    vec, layout = flatten_params(scene)
    e = next(e for e in layout.entries if e.field == "quaternion")
    vec[e.start:e.stop] *= 3.0
    q = unflatten_params(scene, vec, layout).manipulated.quaternion
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9


def test_unflatten_mismatch():
    peg = ground_truth_scene("peg")
    vec, layout = flatten_params(peg)
    with pytest.raises(SceneError):
        unflatten_params(peg, vec[:-1], layout)
    with pytest.raises(SceneError):
        unflatten_params(ground_truth_scene("needle"), vec, layout)


def test_pixel_sum_gradient_wrt_params_matches_fd():
    intr = Intrinsics.from_fov(16, 16)
    cfg = RenderConfig(16, 16)
    scene = init_model("needle", 1, 0.01)
    pose = default_camera("needle", intr).with_angles(math.pi, 0.6)
    vec0, layout = flatten_params(scene)
    tape = Tape()
    v = tape.variable(vec0)
    g = grad(render(scene, pose, cfg, vec=v, layout=layout).rgb.sum(), [v])[0]
    rng = np.random.default_rng(0)
    for i in rng.choice(vec0.size, 8, replace=False):
        h = 1e-6
        vp, vm = vec0.copy(), vec0.copy()
        vp[i] += h
        vm[i] -= h
        fp = render(unflatten_params(scene, vp, layout), pose, cfg).rgb.value.sum()
        fm = render(unflatten_params(scene, vm, layout), pose, cfg).rgb.value.sum()
        fd = (fp - fm) / (2 * h)
        assert abs(fd - g[i]) <= 1e-3 * max(1.0, abs(fd)), (i, fd, g[i])


def test_resample_examples():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 3))
    out = resample_points(pts, 10)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))
    assert np.array_equal(resample_points(pts, 1), pts[:1])
    cyc = resample_points(pts, 25)
    assert np.array_equal(cyc[:10], out) and np.array_equal(cyc[10:20], out)


def _min_pairwise(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[np.triu_indices(len(p), 1)].min()


@pytest.mark.parametrize("seed", range(5))
def test_fps_spreads_at_least_as_well_as_stride(seed):
    cloud = np.random.default_rng(seed).uniform(size=(64, 3))
    for n in (4, 8, 16):
        assert _min_pairwise(resample_points(cloud, n)) >= _min_pairwise(cloud[:: 64 // n][:n])


def test_resample_errors():
    with pytest.raises(SceneError):
        resample_points(np.zeros((0, 3)), 3)
    with pytest.raises(SceneError):
        resample_points(np.zeros((3, 3)), 0)


@pytest.mark.parametrize("tid", ["peg", "needle"])
def test_scene_json_roundtrip(tid):
    scene = init_model(tid, 2, 0.05)
    text = scene_to_json(scene)
    assert json.loads(text)["version"] == 1
    assert scene_from_json(text).equals(scene)


def test_camera_dict_roundtrip_and_position():
    pose = CameraPose(0.3, -0.2, 0.9, (0.1, 0.0, 0.2))
    assert CameraPose.from_dict(pose.to_dict()) == pose
    assert np.allclose(CameraPose(0.0, 0.0, 1.0).position, [1.0, 0.0, 0.0])
