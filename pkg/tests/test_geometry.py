"""Quaternion algebra and camera-model tests.

Oracle: scipy.spatial.transform.Rotation (scalar-last convention, so
components are reordered at the boundary).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from tracksim import geometry as geo
from .conftest import random_unit_quaternion


def to_scipy(q_wxyz):
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w])


finite_floats = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
quat_components = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-6
)


class TestQuaternionsAgainstScipy:
    def test_rotate_matches_scipy(self, rng):
        for _ in range(200):
            q = random_unit_quaternion(rng)
            v = rng.standard_normal(3)
            np.testing.assert_allclose(
                geo.quat_rotate(q, v), to_scipy(q).apply(v), atol=1e-12
            )

    def test_matrix_matches_scipy(self, rng):
        for _ in range(200):
            q = random_unit_quaternion(rng)
            np.testing.assert_allclose(
                geo.quat_to_matrix(q), to_scipy(q).as_matrix(), atol=1e-12
            )

    def test_mul_matches_scipy(self, rng):
        for _ in range(200):
            q1 = random_unit_quaternion(rng)
            q2 = random_unit_quaternion(rng)
            prod = geo.quat_mul(q1, q2)
            oracle = to_scipy(q1) * to_scipy(q2)
            x, y, z, w = oracle.as_quat()
            oracle_wxyz = np.array([w, x, y, z])
            if np.dot(prod, oracle_wxyz) < 0:
                oracle_wxyz = -oracle_wxyz
            np.testing.assert_allclose(prod, oracle_wxyz, atol=1e-12)

    def test_axis_angle_matches_scipy(self, rng):
        for _ in range(100):
            axis = rng.standard_normal(3)
            angle = rng.uniform(-np.pi, np.pi)
            q = geo.quat_from_axis_angle(axis, angle)
            oracle = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis))
            np.testing.assert_allclose(
                geo.quat_to_matrix(q), oracle.as_matrix(), atol=1e-12
            )

    def test_yaw_pitch_match_scipy_euler(self, rng):
        for _ in range(200):
            q = random_unit_quaternion(rng)
            yaw, pitch, _roll = to_scipy(q).as_euler("ZYX")
            assert geo.yaw_of(q) == pytest.approx(yaw, abs=1e-10)
            assert geo.pitch_of(q) == pytest.approx(pitch, abs=1e-10)


class TestQuaternionProperties:
    @given(q=quat_components)
    def test_normalize_unit(self, q):
        assert np.linalg.norm(geo.quat_normalize(q)) == pytest.approx(1.0, abs=1e-12)

    @given(q=quat_components, v=st.lists(finite_floats, min_size=3, max_size=3))
    def test_rotation_preserves_norm(self, q, v):
        qn = geo.quat_normalize(q)
        assert np.linalg.norm(geo.quat_rotate(qn, v)) == pytest.approx(
            np.linalg.norm(v), rel=1e-9, abs=1e-9
        )

    @given(q=quat_components, v=st.lists(finite_floats, min_size=3, max_size=3))
    def test_conjugate_inverts_rotation(self, q, v):
        qn = geo.quat_normalize(q)
        back = geo.quat_rotate(geo.quat_conj(qn), geo.quat_rotate(qn, v))
        np.testing.assert_allclose(back, v, atol=1e-8)

    @given(psi=st.floats(-np.pi + 1e-6, np.pi - 1e-6))
    def test_yaw_roundtrip(self, psi):
        assert geo.yaw_of(geo.quat_from_yaw(psi)) == pytest.approx(psi, abs=1e-12)

    def test_exp_log_roundtrip(self, rng):
        for _ in range(100):
            theta = rng.standard_normal(3)
            # keep |theta| < pi so the log map returns the same branch
            theta *= rng.uniform(0, 3.0) / max(np.linalg.norm(theta), 1.0)
            np.testing.assert_allclose(
                geo.quat_log_tangent(geo.quat_exp_tangent(theta)), theta, atol=1e-9
            )

    def test_exp_matches_scipy_rotvec(self, rng):
        for _ in range(100):
            theta = rng.standard_normal(3)
            q = geo.quat_exp_tangent(theta)
            np.testing.assert_allclose(
                geo.quat_to_matrix(q),
                Rotation.from_rotvec(theta).as_matrix(),
                atol=1e-12,
            )

    def test_normalize_rejects_zero(self):
        with pytest.raises(ValueError):
            geo.quat_normalize([0.0, 0.0, 0.0, 0.0])


class TestCameraModel:
    def test_project_back_project_roundtrip(self, cam, rng):
        for _ in range(200):
            px = rng.uniform([0, 0], [cam.width, cam.height])
            depth = rng.uniform(0.5, 50.0)
            p = geo.back_project(px, depth, cam)
            np.testing.assert_allclose(geo.project(p, cam), px, atol=1e-9)

    def test_back_project_principal_point_is_on_axis(self, cam):
        p = geo.back_project((cam.cx, cam.cy), 7.0, cam)
        np.testing.assert_allclose(p.coords, [0, 0, 7.0], atol=1e-12)

    def test_project_rejects_behind_camera(self, cam):
        with pytest.raises(ValueError):
            geo.project(geo.FramedPoint([0, 0, -1.0], geo.CAMERA), cam)

    def test_scaled_preserves_angles(self, cam):
        half = cam.scaled(160, 120)
        # the same viewing ray maps to proportionally scaled pixels
        p = geo.back_project((200.0, 30.0), 5.0, cam)
        p_half = geo.FramedPoint(p.coords, geo.CAMERA)
        np.testing.assert_allclose(
            geo.project(p_half, half), np.array([200.0, 30.0]) / 2.0, atol=1e-9
        )

    def test_pixel_rays_unit_and_directions(self, cam):
        rays = geo.pixel_rays(cam)
        assert rays.shape == (cam.height, cam.width, 3)
        np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
        # the principal-point ray is the optical axis
        ij = (int(cam.cy), int(cam.cx))
        ray = rays[ij]
        expected = np.array([(cam.cx - cam.cx + 0.0), 0.0, 1.0])
        # pixel centers are at integer coordinates here
        d = np.array([(ij[1] - cam.cx) / cam.fx, (ij[0] - cam.cy) / cam.fy, 1.0])
        np.testing.assert_allclose(ray, d / np.linalg.norm(d), atol=1e-12)

    def test_pixel_rays_cached_read_only(self, cam):
        rays = geo.pixel_rays(cam)
        with pytest.raises(ValueError):
            rays[0, 0, 0] = 1.0


class TestFrameChain:
    def test_frame_enforcement(self, cam):
        p_body = geo.FramedPoint([1, 0, 0], geo.BODY)
        with pytest.raises(geo.FrameError):
            geo.project(p_body, cam)  # project requires a camera-frame point
        with pytest.raises(geo.FrameError):
            geo.camera_to_body(p_body, geo.RigidTransform.identity())

    def test_camera_to_body_extrinsics(self):
        # the reference extrinsics map optical +z to body +x
        p = geo.camera_to_body(geo.FramedPoint([0, 0, 1.0], geo.CAMERA), geo.T_BC)
        np.testing.assert_allclose(
            p.coords, geo.T_BC.translation + np.array([1.0, 0, 0]), atol=1e-12
        )

    def test_body_to_target_negates_robot_anchor(self, rng):
        # a point at the robot (zero body vector) maps to -0 = target-frame origin
        att = geo.UnitQuaternion(random_unit_quaternion(rng))
        p = geo.body_to_target(geo.FramedPoint([0, 0, 0], geo.BODY), att)
        np.testing.assert_allclose(p.coords, 0.0, atol=1e-15)

    def test_full_chain_against_manual_composition(self, cam, rng):
        for _ in range(50):
            px = rng.uniform([0, 0], [cam.width, cam.height])
            depth = rng.uniform(1.0, 20.0)
            att = geo.UnitQuaternion(random_unit_quaternion(rng))
            p_c = geo.back_project(px, depth, cam)
            p_t = geo.body_to_target(geo.camera_to_body(p_c, geo.T_BC), att)
            manual = -(
                geo.quat_to_matrix(att.wxyz)
                @ (geo.quat_to_matrix(geo.T_BC.rotation.wxyz) @ p_c.coords
                   + geo.T_BC.translation)
            )
            np.testing.assert_allclose(p_t.coords, manual, atol=1e-10)


class TestValidation:
    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            geo.CameraIntrinsics(fx=-1, fy=1, cx=10, cy=10, width=20, height=20)
        with pytest.raises(ValueError):
            geo.CameraIntrinsics(fx=1, fy=1, cx=25, cy=10, width=20, height=20)

    def test_unit_quaternion_normalizes(self):
        q = geo.UnitQuaternion([2.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(q.wxyz, [1, 0, 0, 0])

    def test_framed_point_rejects_unknown_frame(self):
        with pytest.raises(ValueError):
            geo.FramedPoint([0, 0, 0], "world")
