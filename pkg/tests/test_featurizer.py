import numpy as np
import pytest

from geobias import featurizer as F
from geobias import geometry as G
from geobias import tape
from geobias.params import ParamStore
from geobias.tape import Tensor
from conftest import random_pair


def canonical_pair(seed: int) -> G.CameraPair:
    return G.relative_pose(random_pair(seed))


def make_store(cfg: F.FeaturizerConfig, seed: int = 0) -> ParamStore:
    store = ParamStore()
    F.init_featurizer_params(store, cfg, np.random.default_rng(seed))
    return store


def rgb_feats(gh, gw, d_rgb, seed=0):
    rng = np.random.default_rng(seed)
    return (
        Tensor(rng.normal(size=(gh, gw, d_rgb)).astype(np.float32)),
        Tensor(rng.normal(size=(gh, gw, d_rgb)).astype(np.float32)),
    )


ALL_CONFIGS = [
    F.FeaturizerConfig(camera=cam, assembly=asm, epipolar=epi, d_rgb=16)
    for cam in (F.CAMERA_CENTER_RAY, F.CAMERA_MATRIX_PIXEL)
    for asm in (F.ASSEMBLY_CHANNEL, F.ASSEMBLY_TOKEN)
    for epi in (F.EPIPOLAR_NONE, F.EPIPOLAR_NORMAL, F.EPIPOLAR_ANGLE)
]


class TestWidths:
    def test_center_ray_widths(self):
        w = F.widths(F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY))
        assert w.d_pix == 63 and w.d_cam == 63

    def test_matrix_pixel_widths(self):
        w = F.widths(F.FeaturizerConfig(camera=F.CAMERA_MATRIX_PIXEL))
        assert w.d_pix == 42 and w.d_cam == 252

    def test_epipolar_widths(self):
        assert F.widths(F.FeaturizerConfig(epipolar=F.EPIPOLAR_ANGLE)).d_epi == 41
        assert F.widths(F.FeaturizerConfig(epipolar=F.EPIPOLAR_NORMAL)).d_epi == 123

    def test_query_width_composition(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE)
        assert F.widths(cfg).d_q == 63 + 63 + 41
        cfg_rgb = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE, query_rgb=True)
        assert F.widths(cfg_rgb).d_q == F.widths(cfg).d_q + cfg_rgb.d_rgb
        no_epi_q = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE, query_epipolar=False)
        assert F.widths(no_epi_q).d_q == 126

    def test_token_mode_requires_camera(self):
        with pytest.raises(ValueError):
            F.FeaturizerConfig(camera=F.CAMERA_NONE, assembly=F.ASSEMBLY_TOKEN)


class TestMatrixShapes:
    @pytest.mark.parametrize("grid", [(6, 8), (12, 16), (15, 20)])
    @pytest.mark.parametrize("cfg", ALL_CONFIGS)
    def test_token_counts_and_widths(self, grid, cfg):
        gh, gw = grid
        store = make_store(cfg)
        pair = canonical_pair(1)
        ref = G.pick_reference_plane(pair, grid, seed=0) if cfg.epipolar == F.EPIPOLAR_ANGLE else None
        f1, f2 = rgb_feats(gh, gw, cfg.d_rgb)
        im, qm = F.build_sample_matrices(pair, f1, f2, grid, cfg, store, ref)
        w = F.widths(cfg)
        expected_tokens = 2 * gh * gw + (2 if cfg.assembly == F.ASSEMBLY_TOKEN else 0)
        assert im.tokens.shape == (expected_tokens, w.d_in)
        assert im.token_kind.shape == (expected_tokens,)
        assert qm.queries.shape == (2 * gh * gw, w.d_q)
        assert im.tokens.dtype == np.float32 and qm.queries.dtype == np.float32

    def test_channel_row_formula(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE, d_rgb=16)
        w = F.widths(cfg)
        assert w.d_in == 16 + 63 + 63 + 41  # rgb | pixel | camera | epipolar

    def test_angle_mode_requires_ref(self):
        cfg = F.FeaturizerConfig(epipolar=F.EPIPOLAR_ANGLE, d_rgb=8)
        f1, f2 = rgb_feats(6, 8, 8)
        with pytest.raises(ValueError):
            F.build_inputs(canonical_pair(2), f1, f2, (6, 8), cfg, make_store(cfg))

    def test_shape_mismatch_raises(self):
        cfg = F.FeaturizerConfig(d_rgb=8)
        f1, _ = rgb_feats(6, 8, 8)
        _, f2 = rgb_feats(6, 9, 8)
        with pytest.raises(F.ShapeMismatch):
            F.build_inputs(canonical_pair(3), f1, f2, (6, 8), cfg, make_store(cfg))

    def test_non_canonical_pair_rejected(self):
        cfg = F.FeaturizerConfig(d_rgb=8)
        f1, f2 = rgb_feats(6, 8, 8)
        with pytest.raises(ValueError):
            F.build_inputs(random_pair(4), f1, f2, (6, 8), cfg, make_store(cfg))


class TestDeterminism:
    @pytest.mark.parametrize("cfg", ALL_CONFIGS[:6])
    def test_bit_identical(self, cfg):
        store = make_store(cfg)
        pair = canonical_pair(7)
        ref = G.pick_reference_plane(pair, (6, 8), seed=5) if cfg.epipolar == F.EPIPOLAR_ANGLE else None
        f1, f2 = rgb_feats(6, 8, cfg.d_rgb)
        a = F.build_inputs(pair, f1, f2, (6, 8), cfg, store, ref)
        b = F.build_inputs(pair, f1, f2, (6, 8), cfg, store, ref)
        assert np.array_equal(a.tokens.data, b.tokens.data)
        qa = F.build_queries(pair, f1, f2, (6, 8), cfg, store, ref)
        qb = F.build_queries(pair, f1, f2, (6, 8), cfg, store, ref)
        assert np.array_equal(qa.queries.data, qb.queries.data)


class TestContent:
    def test_queries_match_input_geometry_slice(self):
        # channel mode without RGB queries: query rows equal the geometric
        # part of the input rows
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE, d_rgb=8)
        store = make_store(cfg)
        pair = canonical_pair(9)
        ref = G.pick_reference_plane(pair, (6, 8), seed=1)
        f1, f2 = rgb_feats(6, 8, 8)
        im, qm = F.build_sample_matrices(pair, f1, f2, (6, 8), cfg, store, ref)
        assert np.array_equal(im.tokens.data[:, 8:], qm.queries.data)

    def test_channel_rows_share_camera_slice(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, d_rgb=8)
        store = make_store(cfg)
        pair = canonical_pair(10)
        f1, f2 = rgb_feats(6, 8, 8)
        tokens = F.build_inputs(pair, f1, f2, (6, 8), cfg, store).tokens.data
        cam_slice = slice(8 + 63, 8 + 63 + 63)
        img1 = tokens[:48, cam_slice]
        img2 = tokens[48:, cam_slice]
        assert (img1 == img1[0]).all() and (img2 == img2[0]).all()
        assert not np.array_equal(img1[0], img2[0])

    def test_token_mode_camera_only_in_camera_tokens(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, assembly=F.ASSEMBLY_TOKEN, d_rgb=8)
        store = make_store(cfg)
        pair = canonical_pair(11)
        f1, f2 = rgb_feats(6, 8, 8)
        im = F.build_inputs(pair, f1, f2, (6, 8), cfg, store)
        assert list(im.token_kind[-2:]) == [F.TokenKind.CAMERA_IMAGE1, F.TokenKind.CAMERA_IMAGE2]
        w = F.widths(cfg)
        # pixel rows: identical camera-independent structure; swap the two
        # cameras and pixel rows must not change
        swapped = G.CameraPair(pair.cam1, G.Camera(k=pair.cam2.k, r=pair.cam2.r, t=pair.cam2.t * 1.5))
        im2 = F.build_inputs(G.relative_pose(swapped), f1, f2, (6, 8), cfg, store)
        pix_rows = 2 * 48
        # image-1 pixel rows do not depend on camera 2 at all
        assert np.array_equal(im.tokens.data[:48], im2.tokens.data[:48])
        # camera tokens changed
        assert not np.array_equal(im.tokens.data[pix_rows + 1], im2.tokens.data[pix_rows + 1])

    def test_indicator_distinguishes_images(self):
        for mode in (F.INDICATOR_FOURIER, F.INDICATOR_LEARNABLE):
            cfg = F.FeaturizerConfig(camera=F.CAMERA_NONE, indicator=mode, d_rgb=8)
            store = make_store(cfg, seed=3)
            pair = canonical_pair(12)
            f1, f2 = rgb_feats(6, 8, 8)
            tokens = F.build_inputs(pair, f1, f2, (6, 8), cfg, store).tokens.data
            geo = tokens[:, 8:]
            assert not np.array_equal(geo[:48], geo[48:])

    def test_learnable_indicator_is_stored_parameter(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_NONE, indicator=F.INDICATOR_LEARNABLE, d_rgb=8)
        store = make_store(cfg, seed=4)
        w = F.widths(cfg)
        assert store[F.INDICATOR_PARAM].shape == (2, w.d_pix)

    def test_fourier_indicator_leading_zero(self):
        vec = F._indicator_vector(0, F.FeaturizerConfig(camera=F.CAMERA_NONE), ParamStore(), 42, np.float32)
        assert vec.data[0, 0] == 0.0

    def test_epipolar_angle_adds_expected_channels(self):
        base = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, d_rgb=8)
        with_angle = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_ANGLE, d_rgb=8)
        delta = F.widths(with_angle).d_in - F.widths(base).d_in
        assert delta == 2 * base.embed.bands_epipolar + 1


class TestGeometryEquivalence:
    """The differentiable tape path must match the plain float64 geometry."""

    def test_rays_match(self):
        pair = canonical_pair(20)
        grid = G.grid_pixel_coords(6, 8, 4)
        tape_rays = F._rays(F.TapeCamera.from_camera(pair.cam2), grid).data
        ref = G.ray_direction(pair.cam2, grid)
        assert np.abs(tape_rays - ref).max() < 1e-12

    def test_center_matches(self):
        pair = canonical_pair(21)
        c = F._center(F.TapeCamera.from_camera(pair.cam2)).data[0]
        assert np.abs(c - G.camera_center(pair.cam2)).max() < 1e-12

    def test_normals_match(self):
        pair = canonical_pair(22)
        grid = G.grid_pixel_coords(6, 8, 4)
        cams = (F.TapeCamera.from_camera(pair.cam1), F.TapeCamera.from_camera(pair.cam2))
        rays = F._rays(cams[0], grid)
        n_tape = F._epipolar_normals(cams, rays, grid, 1e-8).data
        n_ref, _ = G.epipolar_normal_batch(pair, 0, grid)
        assert np.abs(n_tape - n_ref).max() < 1e-12

    def test_fourier_matches(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        out = F._fourier(Tensor(x), 4, 60.0).data
        ref = G.fourier_embed(x, 4, 60.0)
        assert np.array_equal(out, ref)

    def test_angle_matches(self):
        pair = canonical_pair(23)
        ref_plane = G.pick_reference_plane(pair, (6, 8), seed=2)
        grid = G.grid_pixel_coords(6, 8, 4)
        n, _ = G.epipolar_normal_batch(pair, 0, grid)
        ref_angles = G.epipolar_angle(n, ref_plane)
        angles = F._angle(Tensor(n), ref_plane).data[:, 0]
        assert np.abs(angles - ref_angles).max() < 1e-12


class TestDegenerateSubstitution:
    def test_epipole_pixel_inherits_neighbor_normal(self):
        # camera 2 straight ahead of camera 1: the epipole is the exact
        # center pixel of a grid with odd dimensions
        k = np.array([[35.0, 0.0, 6.0], [0.0, 35.0, 6.0], [0.0, 0.0, 1.0]])
        pair = G.CameraPair(
            G.Camera(k=k, r=np.eye(3), t=np.zeros(3)),
            G.Camera(k=k, r=np.eye(3), t=[0.0, 0.0, -1.0]),
        )
        grid = G.grid_pixel_coords(3, 3, 4)  # centers at 2,6,10; epipole at (6,6)
        cams = (F.TapeCamera.from_camera(pair.cam1), F.TapeCamera.from_camera(pair.cam2))
        rays = F._rays(cams[0], grid)
        normals = F._epipolar_normals(cams, rays, grid, 1e-8).data
        _, degenerate = G.epipolar_normal_batch(pair, 0, grid)
        assert degenerate[4] and degenerate.sum() == 1
        assert abs(np.linalg.norm(normals[4]) - 1.0) < 1e-6
        neighbors = [normals[i] for i in (1, 3, 5, 7)]
        assert any(np.array_equal(normals[4], nb) for nb in neighbors)


class TestGradientFlowToPose:
    def test_translation_gradient_nonzero(self):
        cfg = F.FeaturizerConfig(camera=F.CAMERA_CENTER_RAY, epipolar=F.EPIPOLAR_NORMAL, d_rgb=4)
        store = make_store(cfg)
        pair = canonical_pair(30)
        t_leaf = Tensor(pair.cam2.t.copy(), requires_grad=True)
        cams = (
            F.TapeCamera(k=pair.cam1.k, r=Tensor(np.eye(3)), t=Tensor(np.zeros(3))),
            F.TapeCamera(k=pair.cam2.k, r=Tensor(pair.cam2.r.copy()), t=t_leaf),
        )
        f1, f2 = rgb_feats(6, 8, 4)
        im = F.build_inputs(cams, f1, f2, (6, 8), cfg, store, dtype=np.float64)
        tape.tsum(im.tokens).backward()
        assert t_leaf.grad is not None and np.abs(t_leaf.grad).max() > 0
