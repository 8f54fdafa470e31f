import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from puppetpose.camera import (
    UPRIGHT_BOUNDS,
    CameraBounds,
    CameraParams,
    clamp_in_frame,
    in_frame,
    project,
    rotation_matrix,
    sample_camera,
)
from puppetpose.errors import BehindCameraError, ConfigError
from puppetpose.geometry import template_positions


def _single(point):
    return torch.tensor([point], dtype=torch.float64)


class TestProject:
    def test_optical_axis(self):
        q, qd = project(_single([0.0, 0.0, 0.0]), CameraParams.make(translation=(0, 0, 2)), f=1.0)
        np.testing.assert_allclose(q.numpy(), [[0.0, 0.0]])
        np.testing.assert_allclose(qd.numpy(), [2.0])

    def test_hand_perspective_division(self):
        q, qd = project(_single([1.0, 0.0, 0.0]), CameraParams.make(translation=(0, 0, 2)), f=1.0)
        np.testing.assert_allclose(q.numpy(), [[0.5, 0.0]])
        np.testing.assert_allclose(qd.numpy(), [2.0])

    def test_focal_linearity(self, skeleton):
        p = template_positions(skeleton)
        cam = CameraParams.make((0.1, 0.2, 1.4), (0.05, -0.1, 4.0))
        q1, d1 = project(p, cam, f=1.0)
        q2, d2 = project(p, cam, f=2.0)
        np.testing.assert_allclose(q2.numpy(), 2.0 * q1.numpy(), atol=1e-15)
        np.testing.assert_array_equal(d1.numpy(), d2.numpy())

    def test_depth_is_camera_z(self, skeleton):
        p = template_positions(skeleton)
        cam = CameraParams.make((0.3, -0.7, 1.2), (0.1, 0.2, 3.5))
        _, qd = project(p, cam)
        X = p @ cam.matrix().T + cam.translation
        np.testing.assert_array_equal(qd.numpy(), X[:, 2].numpy())

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(_single([0.0, 0.0, -3.0]), CameraParams.make(translation=(0, 0, 2)))


class TestRotation:
    def test_zyx_matches_scipy(self, rng):
        for _ in range(20):
            a = rng.uniform(-math.pi, math.pi, 3)
            ref = Rotation.from_euler("ZYX", a).as_matrix()
            np.testing.assert_allclose(rotation_matrix(torch.from_numpy(a)).numpy(), ref, atol=1e-14)


class TestClamp:
    def test_idempotent_when_framed(self, skeleton):
        p = template_positions(skeleton)
        cam = CameraParams.make((0.0, math.pi / 2, math.pi / 2), (0.0, 0.0, 4.0))
        assert in_frame(cam, p, UPRIGHT_BOUNDS)
        np.testing.assert_array_equal(clamp_in_frame(cam, p, UPRIGHT_BOUNDS).vector.numpy(), cam.vector.numpy())

    def test_brings_joint_inside(self, skeleton):
        p = template_positions(skeleton)
        cam = CameraParams.make((0.0, math.pi / 2, math.pi / 2), (0.5, 0.5, 2.5))
        bounds = CameraBounds()
        q, _ = project(p, cam)
        assert q.abs().max() > 1 - bounds.margin
        out = clamp_in_frame(cam, p, bounds)
        q2, _ = project(p, out)
        assert q2.abs().max() <= 1 - bounds.margin + 1e-9
        twice = clamp_in_frame(out, p, bounds)
        np.testing.assert_allclose(twice.vector.numpy(), out.vector.numpy(), atol=1e-12)

    def test_infeasible_bound(self, skeleton):
        p = template_positions(skeleton) * 10.0
        bounds = CameraBounds(t_low=(-0.5, -0.5, 2.5), t_high=(0.5, 0.5, 2.6))
        with pytest.raises(ConfigError):
            clamp_in_frame(CameraParams.make((0.0, 0.0, 0.0), (0.0, 0.0, 2.5)), p, bounds)


class TestSample:
    def test_deterministic(self):
        a = sample_camera(np.random.default_rng(5)).vector
        b = sample_camera(np.random.default_rng(5)).vector
        np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_thousand_samples_within_bounds_and_framing(self, skeleton):
        rng = np.random.default_rng(0)
        bounds = CameraBounds()
        p = template_positions(skeleton)
        for _ in range(1000):
            cam = sample_camera(rng, bounds, p)
            v = cam.vector.numpy()
            assert np.all(v >= bounds.low - 1e-12) and np.all(v <= bounds.high + 1e-12)
            assert in_frame(cam, p, bounds)


class TestBounds:
    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            CameraBounds(z_min=0.0)
        with pytest.raises(ConfigError):
            CameraBounds(t_low=(0.0, 0.0, 0.1))
        with pytest.raises(ConfigError):
            CameraBounds(angle_low=(1.0, 0.0, 0.0), angle_high=(0.0, 0.0, 0.0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_clamp_is_idempotent_property(seed):
    from puppetpose.geometry import default_skeleton

    p = template_positions(default_skeleton())
    rng = np.random.default_rng(seed)
    bounds = CameraBounds()
    cam = CameraParams(torch.from_numpy(rng.uniform(bounds.low, bounds.high)))
    try:
        once = clamp_in_frame(cam, p, bounds)
    except ConfigError:
        return
    twice = clamp_in_frame(once, p, bounds)
    np.testing.assert_allclose(twice.vector.numpy(), once.vector.numpy(), atol=1e-12)
    assert in_frame(once, p, bounds)
