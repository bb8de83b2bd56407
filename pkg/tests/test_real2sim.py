import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from samrl.autodiff import Tensor
from samrl.real2sim import (REJECT_RATIO, Real2SimConfig, Real2SimError, emd, masked_l1, model_loss,
                            update_model)
from samrl.render import Observation, render
from samrl.scene import CameraPose, default_camera, ground_truth_scene, init_model


def _obs(rgb, mask, cloud=np.zeros((0, 3))):
    h, w = mask.shape
    return Observation(Tensor(rgb), Tensor(np.zeros((h, w))), Tensor(mask), Tensor(cloud), CameraPose(0.0, 0.0))


def _brute_emd(x, y):
    return min(np.linalg.norm(x - y[list(p)], axis=1).mean() for p in itertools.permutations(range(len(x))))


def test_masked_l1_examples():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(8, 8, 3))
    ones = np.ones((8, 8))
    assert masked_l1(_obs(rgb, ones), _obs(rgb, ones)).item() == 0.0
    assert masked_l1(_obs(np.full((8, 8, 3), 0.75), ones), _obs(np.full((8, 8, 3), 0.25), ones)).item() == 0.5
    rgb2, ma, mb = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    ref = float(np.mean(np.abs(ma[..., None] * rgb - mb[..., None] * rgb2)))
    assert masked_l1(_obs(rgb, ma), _obs(rgb2, mb)).item() == pytest.approx(ref, rel=1e-12)
    with pytest.raises(Real2SimError):
        masked_l1(_obs(rgb, ones), _obs(np.zeros((9, 9, 3)), np.ones((9, 9))))


def test_emd_examples():
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert emd(x, x).item() == 0.0
    assert emd([[0.0, 0, 0]], [[1.0, 0, 0]]).item() == 1.0
    a = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    b = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    assert emd(a, b).item() == pytest.approx(_brute_emd(a, b), abs=1e-12)
    with pytest.raises(Real2SimError):
        emd(a, b[:2])


@pytest.mark.parametrize("seed", range(20))
def test_emd_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert abs(emd(x, y).item() - _brute_emd(x, y)) <= 1e-9


pts = st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 3), elements=st.floats(-1, 1)), arrays(np.float64, (n, 3), elements=st.floats(-1, 1))))


@settings(max_examples=50, deadline=None)
@given(pair=pts, seed=st.integers(0, 1000))
@pytest.mark.invariant
def test_emd_properties(pair, seed):
    x, y = pair
    d = emd(x, y).item()
    assert d == emd(y, x).item()
    assert d >= 0.0
    assert d <= np.linalg.norm(x - y, axis=1).mean() + 1e-12
    perm = np.random.default_rng(seed).permutation(len(x))
    assert emd(x, x[perm]).item() <= 1e-12


def test_model_loss_weights():
    scene = ground_truth_scene("peg")
    pose = default_camera("peg").with_angles(math.pi, 0.6)
    a = render(scene, pose)
    b = render(init_model("peg", 0, 0.03), pose)
    assert model_loss(a, b, Real2SimConfig(lambda2=0.0)).item() == masked_l1(a, b).item()
    one = model_loss(a, b, Real2SimConfig()).item()
    two = model_loss(a, b, Real2SimConfig(lambda1=2.0, lambda2=2.0)).item()
    assert two == pytest.approx(2 * one, rel=1e-12)
    with pytest.raises(Real2SimError):
        Real2SimConfig(lambda1=0.0, lambda2=0.0)
    with pytest.raises(Real2SimError):
        Real2SimConfig(steps=0)


def test_update_fixed_point():
    scene = ground_truth_scene("needle")
    pose = default_camera("needle")
    res = update_model(scene, render(scene, pose), pose, Real2SimConfig(steps=5))
    assert max(res.trace) < 1e-8


def test_rigid_translation_recovery():
    gt = ground_truth_scene("peg")
    pose = default_camera("peg").with_angles(math.pi, 0.6)
    obj = gt.manipulated
    target = obj.translation + np.array([0.05, 0.0, 0.0])
    real = render(gt.with_object(0, replace(obj, translation=target)), pose)
    res = update_model(gt, real, pose, Real2SimConfig(steps=200))
    assert len(res.trace) <= 200
    assert np.linalg.norm(res.scene.manipulated.translation - target) <= 0.01


@pytest.mark.parametrize("seed", range(3))
def test_rope_jitter_loss_halves_and_trace_bounded(seed):
    pose = default_camera("needle")
    real = render(ground_truth_scene("needle"), pose)
    res = update_model(init_model("needle", seed, 0.03), real, pose, Real2SimConfig(steps=100))
    tr = np.array(res.trace)
    assert tr[-1] <= 0.5 * tr[0]
    assert np.all(tr <= REJECT_RATIO * np.minimum.accumulate(tr) + 1e-15)
    for o in res.scene.objects:
        assert abs(np.linalg.norm(o.quaternion) - 1.0) < 1e-9
