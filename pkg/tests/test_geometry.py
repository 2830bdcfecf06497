import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geobias import geometry as G
from conftest import random_camera, random_pair


class TestCameraCenter:
    def test_identity_camera_at_origin(self):
        cam = G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3))
        assert np.allclose(G.camera_center(cam), 0.0)

    def test_pure_translation_inverse(self):
        cam = G.Camera(k=np.eye(3), r=np.eye(3), t=[1.0, 2.0, 3.0])
        assert np.allclose(G.camera_center(cam), [-1.0, -2.0, -3.0])

    def test_rotated_camera_against_projection_matrix(self):
        # independent oracle: P [c;1] must vanish under explicit multiplication
        cam = G.Camera(k=np.eye(3), r=G.rotation_about_axis([0, 0, 1], np.pi / 2), t=[1.0, 0.0, 0.0])
        c = G.camera_center(cam)
        assert np.allclose(c, [0.0, 1.0, 0.0], atol=1e-12)
        p = cam.k @ np.concatenate([cam.r, cam.t[:, None]], axis=1)
        assert np.abs(p @ np.append(c, 1.0)).max() < 1e-9


class TestProjectionMatrix:
    def test_canonical_camera(self):
        cam = G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3))
        assert np.array_equal(G.projection_matrix(cam), np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))

    def test_optical_axis_point(self):
        cam = G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3))
        assert np.allclose(cam.project(np.array([0.0, 0.0, 5.0])), [0.0, 0.0])

    def test_center_nullspace_over_random_cameras(self):
        worst = 0.0
        for seed in range(1000):
            cam = random_camera(seed)
            p = G.projection_matrix(cam)
            worst = max(worst, np.abs(p @ np.append(G.camera_center(cam), 1.0)).max())
        assert worst < 1e-9


class TestRayDirection:
    def test_principal_ray(self):
        cam = G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3))
        assert np.allclose(G.ray_direction(cam, [0.0, 0.0]), [0.0, 0.0, 1.0])

    def test_scaled_intrinsics_ray_by_reprojection(self):
        # oracle: walking along the returned ray must land on the pixel
        cam = G.Camera(k=np.diag([2.0, 2.0, 1.0]), r=np.eye(3), t=np.zeros(3))
        r = G.ray_direction(cam, [2.0, 0.0])
        assert np.allclose(r, np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0))
        for s in (0.5, 1.0, 10.0):
            point = G.camera_center(cam) + s * r
            assert np.abs(cam.project(point) - [2.0, 0.0]).max() < 1e-6

    def test_principal_point_on_axis(self):
        k = np.array([[1.0, 0, 3.0], [0, 1.0, 2.0], [0, 0, 1.0]])
        cam = G.Camera(k=k, r=np.eye(3), t=np.zeros(3))
        assert np.allclose(G.ray_direction(cam, [3.0, 2.0]), [0.0, 0.0, 1.0])

    def test_reprojection_consistency_random_cameras(self):
        rng = np.random.default_rng(0)
        for seed in range(200):
            cam = random_camera(seed)
            pix = rng.uniform(0.0, 30.0, size=2)
            ray = G.ray_direction(cam, pix)
            for s in (0.5, 1.0, 10.0):
                proj = cam.project(G.camera_center(cam) + s * ray)
                assert np.abs(proj - pix).max() < 1e-6


class TestFourierEmbed:
    def test_zero_scalar(self):
        assert np.allclose(G.fourier_embed(np.array([0.0]), 1, 60.0), [0.0, 0.0, 1.0])

    def test_one_scalar_single_band(self):
        out = G.fourier_embed(np.array([1.0]), 1, 60.0)
        assert np.allclose(out, [1.0, 0.0, -1.0], atol=1e-12)

    def test_three_vector_default_bands_length(self):
        assert G.fourier_embed(np.zeros(3), 10, 60.0).shape == (63,)

    @given(
        d=st.sampled_from([1, 2, 3, 12]),
        bands=st.sampled_from([1, 5, 10, 20]),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_length_formula_and_determinism(self, d, bands, seed):
        v = np.random.default_rng(seed).normal(size=d)
        out = G.fourier_embed(v, bands, 60.0)
        assert out.shape == ((2 * bands + 1) * d,)
        assert np.array_equal(out, G.fourier_embed(v, bands, 60.0))

    def test_frequencies_linearly_spaced_inclusive(self):
        f = G.fourier_frequencies(10, 60.0)
        assert f[0] == 1.0 and f[-1] == 30.0
        assert np.allclose(np.diff(f), f[1] - f[0])


class TestEpipolarNormal:
    def test_orthogonal_baseline_ray(self):
        pair = G.CameraPair(
            G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3)),
            G.Camera(k=np.eye(3), r=np.eye(3), t=[0.0, -1.0, 0.0]),
        )  # center2 = (0, 1, 0)
        n = G.epipolar_normal(pair, 0, [0.0, 0.0])  # ray (0,0,1)
        assert np.allclose(n, [1.0, 0.0, 0.0], atol=1e-7)

    def test_sign_zero_convention(self):
        pair = G.CameraPair(
            G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3)),
            G.Camera(k=np.eye(3), r=np.eye(3), t=[-1.0, 0.0, 0.0]),
        )  # baseline (1,0,0); ray (0,0,1) -> v = (0,-1,0), x-component 0 keeps it
        n = G.epipolar_normal(pair, 0, [0.0, 0.0])
        assert np.allclose(n, [0.0, -1.0, 0.0], atol=1e-7)

    def test_epipole_raises(self):
        pair = G.CameraPair(
            G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3)),
            G.Camera(k=np.eye(3), r=np.eye(3), t=[0.0, 0.0, -2.0]),
        )  # camera 2 straight ahead: pixel (0,0) looks along the baseline
        with pytest.raises(G.DegenerateRay):
            G.epipolar_normal(pair, 0, [0.0, 0.0])

    def test_matched_pixels_share_plane(self):
        # oracle: a world point seen from both cameras defines one plane
        rng = np.random.default_rng(3)
        for seed in range(50):
            pair = random_pair(seed)
            c1, c2 = G.camera_center(pair.cam1), G.camera_center(pair.cam2)
            point = (c1 + c2) / 2 + rng.normal(size=3)
            x1, x2 = pair.cam1.project(point), pair.cam2.project(point)
            n1 = G.epipolar_normal(pair, 0, x1)
            n2 = G.epipolar_normal(pair, 1, x2)
            assert np.abs(n1 - n2).max() < 1e-6


class TestEpipolarAngle:
    def setup_method(self):
        self.ref = G.EpipolarRef(normal_ref=np.array([1.0, 0.0, 0.0]))

    def test_same_plane(self):
        assert G.epipolar_angle(np.array([1.0, 0.0, 0.0]), self.ref) == -1.0

    def test_perpendicular(self):
        assert abs(G.epipolar_angle(np.array([0.0, 1.0, 0.0]), self.ref)) < 1e-12

    def test_opposite(self):
        assert G.epipolar_angle(np.array([-1.0, 0.0, 0.0]), self.ref) == 1.0


class TestRelativePose:
    def test_canonical_pair_unchanged(self):
        pair = G.CameraPair(
            G.Camera(k=np.eye(3), r=np.eye(3), t=np.zeros(3)),
            G.Camera(k=np.eye(3), r=G.rotation_about_axis([0, 1, 0], 0.3), t=[0.2, 0.0, 0.1]),
        )
        rel = G.relative_pose(pair)
        assert np.allclose(rel.cam2.r, pair.cam2.r, atol=1e-12)
        assert np.allclose(rel.cam2.t, pair.cam2.t, atol=1e-12)

    def test_equal_cameras_collapse(self):
        cam = random_camera(11)
        rel = G.relative_pose(G.CameraPair(cam, cam))
        assert np.allclose(rel.cam2.r, np.eye(3), atol=1e-12)
        assert np.allclose(rel.cam2.t, 0.0, atol=1e-12)

    def test_invariants_over_random_pairs(self):
        for seed in range(1000):
            pair = random_pair(seed)
            rel = G.relative_pose(pair)
            assert np.allclose(rel.cam1.r, np.eye(3)) and np.allclose(rel.cam1.t, 0.0)
            # baseline length and relative rotation angle preserved
            b0 = np.linalg.norm(pair.baseline())
            b1 = np.linalg.norm(rel.baseline())
            assert abs(b0 - b1) < 1e-9
            a0 = G.rotation_angle(pair.cam2.r @ pair.cam1.r.T)
            a1 = G.rotation_angle(rel.cam2.r)
            assert abs(a0 - a1) < 1e-9
            # idempotence
            rel2 = G.relative_pose(rel)
            assert np.abs(rel2.cam2.r - rel.cam2.r).max() < 1e-12
            assert np.abs(rel2.cam2.t - rel.cam2.t).max() < 1e-12

    def test_baseline_direction_in_cam1_frame(self):
        pair = random_pair(77)
        rel = G.relative_pose(pair)
        expected = pair.cam1.r @ pair.baseline()
        assert np.allclose(rel.baseline(), expected, atol=1e-9)


class TestCameraValidation:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            G.Camera(k=np.eye(3), r=np.eye(3) * 1.001, t=np.zeros(3))

    def test_rejects_bad_intrinsics(self):
        k = np.eye(3)
        k[2, 2] = 2.0
        with pytest.raises(ValueError):
            G.Camera(k=k, r=np.eye(3), t=np.zeros(3))
        k = np.eye(3)
        k[1, 0] = 0.5
        with pytest.raises(ValueError):
            G.Camera(k=k, r=np.eye(3), t=np.zeros(3))

    def test_embedding_config_validation(self):
        with pytest.raises(ValueError):
            G.EmbeddingConfig(bands_ray=0)
        with pytest.raises(ValueError):
            G.EmbeddingConfig(mu_geom=2.0)

    def test_epipolar_ref_unit_length(self):
        with pytest.raises(ValueError):
            G.EpipolarRef(normal_ref=np.array([1.0, 1.0, 0.0]))


class TestReferencePlane:
    def test_deterministic_in_seed(self):
        pair = G.relative_pose(random_pair(5))
        r1 = G.pick_reference_plane(pair, (6, 8), seed=42)
        r2 = G.pick_reference_plane(pair, (6, 8), seed=42)
        assert np.array_equal(r1.normal_ref, r2.normal_ref)
        r3 = G.pick_reference_plane(pair, (6, 8), seed=43)
        assert not np.array_equal(r1.normal_ref, r3.normal_ref)

    def test_unit_norm(self):
        pair = G.relative_pose(random_pair(6))
        ref = G.pick_reference_plane(pair, (6, 8), seed=0)
        assert abs(np.linalg.norm(ref.normal_ref) - 1.0) < 1e-9
