import numpy as np
import pytest

from geobias import scenegen as S
from geobias.geometry import Camera, camera_center, ray_direction, relative_pose


def fronto_plane_scene(z: float = 2.0, tex_kind: str = "checker") -> S.Scene:
    tex = S.Texture(kind=tex_kind, scale=0.3, color_a=np.array([0.9, 0.2, 0.2]), color_b=np.array([0.1, 0.2, 0.9]))
    plane = S.Plane(
        origin=np.array([0.0, 0.0, z]),
        u_axis=np.array([1.0, 0.0, 0.0]),
        v_axis=np.array([0.0, 1.0, 0.0]),
        normal=np.array([0.0, 0.0, -1.0]),
        half_u=100.0,
        half_v=100.0,
        texture=tex,
    )
    return S.Scene(primitives=(plane,), background_depth=z)


def default_camera(cfg: S.SceneConfig = S.SceneConfig()) -> Camera:
    return Camera(k=cfg.intrinsics(), r=np.eye(3), t=np.zeros(3))


class TestRender:
    def test_fronto_parallel_plane_constant_depth(self):
        depth = S.render(fronto_plane_scene(2.0), default_camera(), 24, 32)[1]
        assert np.allclose(depth, 2.0, atol=1e-6)

    def test_tilted_plane_inverse_depth_linear(self):
        # oracle: 1/z-depth of a plane is affine in pixel coordinates
        n = np.array([0.3, 0.1, -1.0])
        n = n / np.linalg.norm(n)
        tex = S.Texture(kind="noise", scale=0.5, color_a=np.zeros(3) + 0.2, color_b=np.ones(3) * 0.9)
        u = np.cross(n, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        plane = S.Plane(
            origin=np.array([0.0, 0.0, 3.0]), u_axis=u, v_axis=np.cross(n, u), normal=n,
            half_u=200.0, half_v=200.0, texture=tex,
        )
        depth = S.render(S.Scene(primitives=(plane,), background_depth=3.0), default_camera(), 24, 32)[1]
        inv = 1.0 / depth.astype(np.float64)
        for row in inv:
            assert np.abs(np.diff(row, n=2)).max() < 1e-6
        for col in inv.T:
            assert np.abs(np.diff(col, n=2)).max() < 1e-6

    def test_sphere_depth_analytic(self):
        tex = S.Texture(kind="checker", scale=0.2, color_a=np.ones(3) * 0.8, color_b=np.ones(3) * 0.2)
        center, radius = np.array([0.0, 0.0, 3.0]), 0.5
        sphere = S.Sphere(center=center, radius=radius, texture=tex)
        cfg = S.SceneConfig()
        cam = default_camera(cfg)
        depth = S.render(S.Scene(primitives=(sphere,), background_depth=3.0), cam, 24, 32)[1]
        # oracle: solve the quadratic for the exact pixel-center ray
        d = ray_direction(cam, [16.5, 12.5])
        b = d @ (camera_center(cam) - center)
        t_hit = -b - np.sqrt(b * b - (center @ center - radius**2))
        assert abs(depth[12, 16] - t_hit * d[2]) < 1e-6
        assert (depth == 0).any()  # background misses

    def test_reprojected_color_agrees(self):
        sample = S.make_sample(seed=21, config=S.SceneConfig())
        pair = sample.pair()
        h, w = sample.shape
        pix = S.grid_pixel_coords(h, w, stride=1)
        d = sample.depth1.reshape(-1).astype(np.float64)
        ok = d > 0
        pts = pair.cam1.unproject(pix, d)
        proj = pair.cam2.project(pts)
        z2 = pts @ pair.cam2.r.T[:, 2] + pair.cam2.t[2]
        iu = np.floor(proj[:, 0]).astype(int)
        iv = np.floor(proj[:, 1]).astype(int)
        inb = ok & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        d2 = np.where(inb, sample.depth2[np.clip(iv, 0, h - 1), np.clip(iu, 0, w - 1)], 0.0)
        unocc = inb & (d2 > 0) & (np.abs(z2 - d2) < 0.02 * z2)
        c1 = sample.image1.reshape(-1, 3)[unocc].astype(np.float64) / 255.0
        c2 = sample.image2[np.clip(iv, 0, h - 1), np.clip(iu, 0, w - 1)][unocc].astype(np.float64) / 255.0
        assert unocc.mean() > 0.5
        assert np.abs(c1 - c2).mean() < 0.1  # texture sampling tolerance


class TestReprojectionOracle:
    @pytest.mark.parametrize("seed", [3, 17, 91])
    def test_subpixel_depth_transfer(self, seed):
        """Unproject with stored depth, re-raycast in the other view, and
        return to the source pixel: the round trip must stay sub-pixel."""
        cfg = S.SceneConfig()
        sample = S.make_sample(seed=seed, config=cfg)
        scene = S.regenerate_scene(sample, cfg)
        pair = sample.pair()
        h, w = sample.shape
        rng = np.random.default_rng(seed)
        pix = np.stack(
            [rng.uniform(0.5, w - 0.5, size=400), rng.uniform(0.5, h - 0.5, size=400)], axis=1
        )
        iu, iv = np.floor(pix[:, 0]).astype(int), np.floor(pix[:, 1]).astype(int)
        centers = np.stack([iu + 0.5, iv + 0.5], axis=1)
        d1 = sample.depth1[iv, iu].astype(np.float64)
        ok = d1 > 0
        pts = pair.cam1.unproject(centers, d1)
        x2 = pair.cam2.project(pts)
        inb = ok & (x2[:, 0] > 0.5) & (x2[:, 0] < w - 0.5) & (x2[:, 1] > 0.5) & (x2[:, 1] < h - 0.5)
        z2_expected = pts @ pair.cam2.r.T[:, 2] + pair.cam2.t[2]
        z2_surface = S.raycast_depth(scene, pair.cam2, x2)
        unocc = inb & (z2_surface > 0) & (np.abs(z2_surface - z2_expected) < 0.01 * z2_expected)
        assert unocc.mean() > 0.4
        back = pair.cam1.project(pair.cam2.unproject(x2[unocc], z2_surface[unocc]))
        err = np.linalg.norm(back - centers[unocc], axis=1)
        assert err.max() < 0.5


class TestSampleGeneration:
    def test_determinism(self):
        a = S.make_sample(seed=42, config=S.SceneConfig())
        b = S.make_sample(seed=42, config=S.SceneConfig())
        for field in ("image1", "image2", "depth1", "depth2", "k1", "r2", "t2"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_disjoint_seeds_differ(self):
        a = S.make_sample(seed=1, config=S.SceneConfig())
        b = S.make_sample(seed=2, config=S.SceneConfig())
        assert not np.array_equal(a.image1, b.image1)

    def test_single_plane_config(self):
        cfg = S.SceneConfig(
            primitive_kinds=("plane",), primitive_count=(1, 1), include_background=False,
            plane_tilt_max_deg=0.0, plane_half_size=(5.0, 5.0),
            cam_jitter_pos=0.0, cam_jitter_rot_deg=0.0, max_rotation_deg=5.0,
        )
        scene = S.generate_scene(seed=3, config=cfg)
        assert len(scene.primitives) == 1
        assert isinstance(scene.primitives[0], S.Plane)
        assert np.allclose(scene.primitives[0].normal, [0.0, 0.0, -1.0])

    def test_invariant_sweep(self):
        cfg = S.SceneConfig()
        lo, hi = cfg.depth_range
        for seed in range(60):
            s = S.make_sample(seed=seed, config=cfg)
            for depth in (s.depth1, s.depth2):
                d = depth[depth > 0]
                assert d.size / depth.size >= cfg.min_covisible
                assert d.min() >= lo and d.max() <= hi
                assert not ((depth > 0) & (depth < 0.1)).any()
            s.pair()  # camera invariants hold after the f32 round trip

    def test_zero_rotation_config(self):
        cfg = S.SceneConfig(max_rotation_deg=0.0)
        sample = S.make_sample(seed=9, config=cfg)
        rel = relative_pose(sample.pair())
        assert np.abs(rel.cam2.r - np.eye(3)).max() < 1e-6

    def test_relative_pose_zeroes_cam1(self):
        sample = S.make_sample(seed=10, config=S.SceneConfig())
        rel = relative_pose(sample.pair())
        assert np.allclose(rel.cam1.t, 0.0)

    def test_baseline_bounds_sweep(self):
        cfg = S.SceneConfig()
        for seed in range(60):
            pair = S.make_sample(seed=seed + 500, config=cfg).pair()
            b = np.linalg.norm(pair.baseline())
            assert cfg.baseline[0] * 0.5 <= b <= cfg.baseline[1] * 1.001

    def test_retry_exhausted(self):
        cfg = S.SceneConfig(min_covisible=1.01, max_retries=5)  # impossible bar
        with pytest.raises(S.RetryExhausted):
            S.make_sample(seed=0, config=cfg)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = S.SceneConfig()
        samples = S.generate_samples(4, seed=5, config=cfg)
        path = tmp_path / "a.gbds"
        S.save_dataset(path, samples, cfg.height, cfg.width)
        loaded = S.load_dataset(path)
        assert len(loaded) == 4
        for a, b in zip(samples, loaded):
            for field in ("k1", "k2", "r1", "t1", "r2", "t2", "image1", "image2", "depth1", "depth2"):
                assert np.array_equal(getattr(a, field), getattr(b, field)), field
            assert a.seed == b.seed
        path2 = tmp_path / "b.gbds"
        S.save_dataset(path2, loaded, cfg.height, cfg.width)
        assert path.read_bytes() == path2.read_bytes()

    def test_digest_reproducible(self, tmp_path):
        d1 = S.generate_dataset(3, seed=11, path=tmp_path / "x.gbds", config=S.SceneConfig())
        d2 = S.generate_dataset(3, seed=11, path=tmp_path / "y.gbds", config=S.SceneConfig())
        assert d1 == d2
        d3 = S.generate_dataset(3, seed=12, path=tmp_path / "z.gbds", config=S.SceneConfig())
        assert d1 != d3

    def test_thread_count_does_not_change_bytes(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GEOBIAS_THREADS", "1")
        d1 = S.generate_dataset(6, seed=3, path=tmp_path / "serial.gbds", config=S.SceneConfig())
        monkeypatch.setenv("GEOBIAS_THREADS", "4")
        d2 = S.generate_dataset(6, seed=3, path=tmp_path / "parallel.gbds", config=S.SceneConfig())
        assert d1 == d2

    def test_empty_dataset_valid(self, tmp_path):
        path = tmp_path / "empty.gbds"
        S.generate_dataset(0, seed=0, path=path, config=S.SceneConfig())
        assert S.load_dataset(path) == []

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.gbds"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError):
            S.load_dataset(path)

    def test_loaded_cameras_satisfy_invariants(self, tmp_path):
        path = tmp_path / "c.gbds"
        S.generate_dataset(3, seed=2, path=path, config=S.SceneConfig())
        for s in S.load_dataset(path):
            pair = s.pair()
            assert np.abs(pair.cam1.r.T @ pair.cam1.r - np.eye(3)).max() < 1e-9


class TestSceneMirror:
    def test_mirrored_scene_matches_mirrored_camera(self):
        cfg = S.SceneConfig()
        sample = S.make_sample(seed=33, config=cfg)
        scene = S.regenerate_scene(sample, cfg)
        cam = sample.camera1()
        f = np.diag([-1.0, 1.0, 1.0])
        cam_m = Camera(k=cam.k, r=f @ cam.r @ f, t=f @ cam.t)
        mirrored = scene.mirrored([-1.0, 1.0, 1.0])
        pix = S.grid_pixel_coords(cfg.height, cfg.width, 1)
        d = S.raycast_depth(scene, cam, pix)
        # mirrored world + conjugated camera: pixel x maps to W - x
        pix_m = pix.copy()
        pix_m[:, 0] = cfg.width - pix[:, 0]
        d_m = S.raycast_depth(mirrored, cam_m, pix_m)
        assert np.abs(d - d_m).max() < 1e-9
