"""Assembly of per-pixel features and geometric embeddings into the
network's input and query matrices.

The geometric quantities are computed with tape ops so that gradients can
flow back into camera pose tensors (needed for localization by gradient
descent). During training the cameras are constants and the same code path
degenerates to plain numpy work.

Feature-grid cells sit on a stride-4 grid over the input image; cell
(gy, gx) is featurized at the centroid of its 4x4 receptive field,
(4*gx + 2, 4*gy + 2) in continuous image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from . import tape
from .geometry import (
    Camera,
    CameraPair,
    EmbeddingConfig,
    EpipolarRef,
    fourier_embed,
    fourier_frequencies,
    grid_pixel_coords,
    normalized_intrinsics,
)
from .params import ParamStore
from .tape import Tensor

CAMERA_NONE = "none"
CAMERA_CENTER_RAY = "center_ray"
CAMERA_MATRIX_PIXEL = "matrix_pixel"
ASSEMBLY_CHANNEL = "channel"
ASSEMBLY_TOKEN = "token"
EPIPOLAR_NONE = "none"
EPIPOLAR_NORMAL = "normal"
EPIPOLAR_ANGLE = "angle"
INDICATOR_FOURIER = "fourier"
INDICATOR_LEARNABLE = "learnable"

GRID_STRIDE = 4

PAD_PARAM = "feat.pad"
INDICATOR_PARAM = "feat.indicator"


class ShapeMismatch(Exception):
    """Feature grids of the two images disagree in shape."""


class TokenKind(IntEnum):
    PIXEL_IMAGE1 = 0
    PIXEL_IMAGE2 = 1
    CAMERA_IMAGE1 = 2
    CAMERA_IMAGE2 = 3


@dataclass(frozen=True)
class FeaturizerConfig:
    """How geometry is parameterized and attached to the input matrix.

    camera="none" drops the camera-specific embedding entirely and falls
    back to plain Fourier pixel-position channels plus an image indicator;
    it exists for the no-geometry baseline and cannot be combined with
    token assembly.
    """

    camera: str = CAMERA_CENTER_RAY
    assembly: str = ASSEMBLY_CHANNEL
    epipolar: str = EPIPOLAR_NONE
    query_rgb: bool = False
    query_epipolar: bool = True
    indicator: str = INDICATOR_FOURIER
    d_rgb: int = 64
    embed: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    def __post_init__(self):
        if self.camera not in (CAMERA_NONE, CAMERA_CENTER_RAY, CAMERA_MATRIX_PIXEL):
            raise ValueError(f"unknown camera mode {self.camera!r}")
        if self.assembly not in (ASSEMBLY_CHANNEL, ASSEMBLY_TOKEN):
            raise ValueError(f"unknown assembly {self.assembly!r}")
        if self.epipolar not in (EPIPOLAR_NONE, EPIPOLAR_NORMAL, EPIPOLAR_ANGLE):
            raise ValueError(f"unknown epipolar mode {self.epipolar!r}")
        if self.indicator not in (INDICATOR_FOURIER, INDICATOR_LEARNABLE):
            raise ValueError(f"unknown indicator mode {self.indicator!r}")
        if self.d_rgb <= 0:
            raise ValueError("d_rgb must be positive")
        if self.camera == CAMERA_NONE and self.assembly == ASSEMBLY_TOKEN:
            raise ValueError("token assembly requires a camera embedding")


@dataclass(frozen=True)
class FeatWidths:
    """Channel bookkeeping for one featurizer configuration."""

    d_pix: int
    d_cam: int
    d_ind: int
    d_epi: int
    d_row: int  # per-pixel token width (includes RGB)
    d_in: int  # final input token width after any padding
    d_q: int

    def num_tokens(self, gh: int, gw: int, assembly: str) -> int:
        n = 2 * gh * gw
        return n + 2 if assembly == ASSEMBLY_TOKEN else n


def widths(config: FeaturizerConfig) -> FeatWidths:
    e = config.embed
    if config.camera == CAMERA_CENTER_RAY:
        d_pix = 6 * e.bands_ray + 3
        d_cam = 6 * e.bands_center + 3
    elif config.camera == CAMERA_MATRIX_PIXEL:
        d_pix = 4 * e.bands_pixel + 2
        d_cam = 24 * e.bands_matrix + 12
    else:
        d_pix = 4 * e.bands_pixel + 2
        d_cam = 0
    if config.epipolar == EPIPOLAR_NORMAL:
        d_epi = 6 * e.bands_epipolar + 3
    elif config.epipolar == EPIPOLAR_ANGLE:
        d_epi = 2 * e.bands_epipolar + 1
    else:
        d_epi = 0
    use_ind = config.assembly == ASSEMBLY_TOKEN or config.camera == CAMERA_NONE
    d_ind = d_pix if use_ind else 0

    if config.assembly == ASSEMBLY_CHANNEL:
        d_row = config.d_rgb + d_pix + d_cam + d_ind + d_epi
        d_in = d_row
    else:
        d_row = config.d_rgb + d_pix + d_ind + d_epi
        d_in = max(d_row, d_cam)

    d_q = d_pix + (d_cam if config.camera != CAMERA_NONE else d_ind)
    if config.query_epipolar:
        d_q += d_epi
    if config.query_rgb:
        d_q += config.d_rgb
    return FeatWidths(d_pix=d_pix, d_cam=d_cam, d_ind=d_ind, d_epi=d_epi, d_row=d_row, d_in=d_in, d_q=d_q)


def init_featurizer_params(store: ParamStore, config: FeaturizerConfig, rng: np.random.Generator) -> None:
    """Create the featurizer's learnable tensors (padding, indicator)."""
    w = widths(config)
    if config.assembly == ASSEMBLY_TOKEN and w.d_in > min(w.d_row, w.d_cam):
        store.add(PAD_PARAM, rng.normal(0.0, 0.02, size=w.d_in).astype(np.float32))
    use_ind = config.assembly == ASSEMBLY_TOKEN or config.camera == CAMERA_NONE
    if use_ind and config.indicator == INDICATOR_LEARNABLE:
        store.add(INDICATOR_PARAM, rng.normal(0.0, 0.02, size=(2, w.d_pix)).astype(np.float32))


@dataclass
class TapeCamera:
    """Camera whose extrinsics may be differentiable tape tensors."""

    k: np.ndarray
    r: Tensor
    t: Tensor

    @classmethod
    def from_camera(cls, cam: Camera) -> "TapeCamera":
        return cls(k=cam.k, r=Tensor(cam.r), t=Tensor(cam.t))


@dataclass
class InputMatrix:
    tokens: Tensor  # [num_tokens, d_in] float32
    token_kind: np.ndarray  # [num_tokens] int8 of TokenKind


@dataclass
class QueryMatrix:
    queries: Tensor  # [2 * gh * gw, d_q] float32, image 1 first, row-major


def _pair_cameras(pair) -> tuple[TapeCamera, TapeCamera]:
    if isinstance(pair, CameraPair):
        cams = (TapeCamera.from_camera(pair.cam1), TapeCamera.from_camera(pair.cam2))
    else:
        cams = tuple(pair)
    c1 = cams[0]
    if np.abs(c1.r.data - np.eye(3)).max() > 1e-9 or np.abs(c1.t.data).max() > 1e-9:
        raise ValueError("pair must be canonicalized with relative_pose before featurization")
    return cams


def _fourier(x: Tensor, bands: int, mu: float) -> Tensor:
    """Tape twin of geometry.fourier_embed for inputs of shape [n, d]."""
    return tape.fourier_features(x, np.pi * fourier_frequencies(bands, mu))


def _rays(cam: TapeCamera, pixels: np.ndarray) -> Tensor:
    """Unit world-frame ray directions for continuous pixels [n, 2]."""
    homo = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    a = tape.matinv(tape.matmul(Tensor(cam.k), cam.r))
    d = tape.matmul(Tensor(homo), tape.transpose(a, (1, 0)))
    norm = tape.sqrt(tape.tsum(tape.mul(d, d), axis=-1, keepdims=True))
    return tape.div(d, norm)


def _center(cam: TapeCamera) -> Tensor:
    """Camera center as a [1, 3] tensor."""
    c = tape.matmul(tape.transpose(cam.r, (1, 0)), tape.reshape(cam.t, (3, 1)))
    return tape.reshape(tape.neg(c), (1, 3))


def _epipolar_normals(cams, rays: Tensor, grid: np.ndarray, eps: float) -> Tensor:
    """Sign-canonicalized plane normals with epipole pixels substituted.

    A pixel whose ray is parallel to the baseline has no epipolar plane;
    it inherits the normal of the nearest non-degenerate grid cell.
    """
    b = tape.sub(_center(cams[1]), _center(cams[0]))
    if np.linalg.norm(b.data) <= 1e-9:
        raise ValueError("camera baseline is numerically zero")
    v = tape.cross(tape.broadcast_to(b, rays.shape), rays)
    norm = tape.sqrt(tape.tsum(tape.mul(v, v), axis=-1, keepdims=True))
    sign = np.where(v.data[:, 0] >= 0.0, 1.0, -1.0)[:, None]
    n = tape.mul(v, tape.div(sign, tape.add(norm, eps)))
    degenerate = norm.data[:, 0] < 10.0 * eps
    if degenerate.any():
        if degenerate.all():
            raise ValueError("all rays are parallel to the baseline")
        perm = np.arange(len(grid))
        good = np.flatnonzero(~degenerate)
        for i in np.flatnonzero(degenerate):
            d2 = ((grid[good] - grid[i]) ** 2).sum(axis=1)
            perm[i] = good[np.argmin(d2)]
        n = tape.getitem(n, perm)
    return n


def _angle(normals: Tensor, ref: EpipolarRef) -> Tensor:
    dot = tape.matmul(normals, Tensor(ref.normal_ref[:, None]))
    theta = tape.arccos(tape.clip(dot, -1.0, 1.0))
    return tape.sub(tape.mul(theta, 2.0 / np.pi), 1.0)


def _indicator_vector(
    image_index: int, config: FeaturizerConfig, store: ParamStore, d_pix: int, dtype
) -> Tensor:
    if config.indicator == INDICATOR_LEARNABLE:
        return tape.reshape(tape.getitem(store[INDICATOR_PARAM], image_index), (1, d_pix))
    e = config.embed
    raw = fourier_embed(np.array([float(image_index)]), e.bands_pixel, e.mu_pixel)
    vec = np.zeros(d_pix, dtype=dtype)
    take = min(d_pix, raw.shape[0])
    vec[:take] = raw[:take].astype(dtype)
    return Tensor(vec[None, :])


class _GeometryBlocks:
    """Per-image geometric channel blocks cast to the network dtype."""

    def __init__(self, pix, cam, epi):
        self.pix = pix  # list of [n, d_pix]
        self.cam = cam  # list of [1, d_cam] or None
        self.epi = epi  # list of [n, d_epi] or None


def _geometry_blocks(
    cams, gh: int, gw: int, config: FeaturizerConfig, ref: EpipolarRef | None, dtype
) -> _GeometryBlocks:
    e = config.embed

    def _f32(t: Tensor) -> Tensor:
        return tape.cast(t, dtype)
    grid = grid_pixel_coords(gh, gw, GRID_STRIDE)
    height, width = GRID_STRIDE * gh, GRID_STRIDE * gw

    rays = None
    if config.camera == CAMERA_CENTER_RAY or config.epipolar != EPIPOLAR_NONE:
        rays = [_rays(c, grid) for c in cams]

    pix, cam_embeds = [], []
    for j, c in enumerate(cams):
        if config.camera == CAMERA_CENTER_RAY:
            pix.append(_f32(_fourier(rays[j], e.bands_ray, e.mu_geom)))
            cam_embeds.append(_f32(_fourier(_center(c), e.bands_center, e.mu_geom)))
        else:
            norm_grid = np.stack([2.0 * grid[:, 0] / width - 1.0, 2.0 * grid[:, 1] / height - 1.0], axis=1)
            pix.append(_f32(_fourier(Tensor(norm_grid), e.bands_pixel, e.mu_pixel)))
            if config.camera == CAMERA_MATRIX_PIXEL:
                kn = normalized_intrinsics(c.k, width, height)
                p = tape.matmul(Tensor(kn), tape.concat([c.r, tape.reshape(c.t, (3, 1))], axis=1))
                cam_embeds.append(_f32(_fourier(tape.reshape(p, (1, 12)), e.bands_matrix, e.mu_geom)))
            else:
                cam_embeds.append(None)

    epi = None
    if config.epipolar != EPIPOLAR_NONE:
        normals = [_epipolar_normals(cams, rays[j], grid, e.epsilon_norm) for j in range(2)]
        if config.epipolar == EPIPOLAR_NORMAL:
            epi = [_f32(_fourier(n, e.bands_epipolar, e.mu_epipolar)) for n in normals]
        else:
            if ref is None:
                raise ValueError("angle epipolar mode requires an EpipolarRef")
            epi = [_f32(_fourier(_angle(n, ref), e.bands_epipolar, e.mu_epipolar)) for n in normals]

    return _GeometryBlocks(pix=pix, cam=cam_embeds, epi=epi)


def _flatten_features(feats, d_rgb: int):
    out = []
    shape0 = None
    for f in feats:
        f = tape.as_tensor(f)
        if f.ndim == 3:
            f = tape.reshape(f, (f.shape[0] * f.shape[1], f.shape[2]))
        if shape0 is None:
            shape0 = f.shape
        elif f.shape != shape0:
            raise ShapeMismatch(f"feature grids disagree: {shape0} vs {f.shape}")
        if f.shape[1] != d_rgb:
            raise ShapeMismatch(f"expected {d_rgb} feature channels, got {f.shape[1]}")
        out.append(f)
    return out


def _assemble_inputs(
    blocks: _GeometryBlocks,
    feats,
    n: int,
    config: FeaturizerConfig,
    store: ParamStore,
    w: FeatWidths,
    dtype,
) -> InputMatrix:
    rows = []
    for j in range(2):
        parts = [feats[j], blocks.pix[j]]
        if config.assembly == ASSEMBLY_CHANNEL and config.camera != CAMERA_NONE:
            parts.append(tape.broadcast_to(blocks.cam[j], (n, w.d_cam)))
        if w.d_ind:
            parts.append(
                tape.broadcast_to(_indicator_vector(j, config, store, w.d_pix, dtype), (n, w.d_pix))
            )
        if blocks.epi is not None:
            parts.append(blocks.epi[j])
        rows.append(tape.concat(parts, axis=1))

    kinds = np.concatenate(
        [
            np.full(n, TokenKind.PIXEL_IMAGE1, dtype=np.int8),
            np.full(n, TokenKind.PIXEL_IMAGE2, dtype=np.int8),
        ]
    )
    if config.assembly == ASSEMBLY_CHANNEL:
        return InputMatrix(tokens=tape.concat(rows, axis=0), token_kind=kinds)

    def padded(t: Tensor, rows_n: int) -> Tensor:
        deficit = w.d_in - t.shape[1]
        if deficit == 0:
            return t
        fill = tape.reshape(tape.getitem(store[PAD_PARAM], slice(0, deficit)), (1, deficit))
        return tape.concat([t, tape.broadcast_to(fill, (rows_n, deficit))], axis=1)

    pixel_tokens = [padded(r, n) for r in rows]
    cam_tokens = [padded(blocks.cam[j], 1) for j in range(2)]
    tokens = tape.concat(pixel_tokens + cam_tokens, axis=0)
    kinds = np.concatenate(
        [kinds, np.array([TokenKind.CAMERA_IMAGE1, TokenKind.CAMERA_IMAGE2], dtype=np.int8)]
    )
    return InputMatrix(tokens=tokens, token_kind=kinds)


def _assemble_queries(
    blocks: _GeometryBlocks,
    feats,
    n: int,
    config: FeaturizerConfig,
    store: ParamStore,
    w: FeatWidths,
    dtype,
) -> QueryMatrix:
    rows = []
    for j in range(2):
        parts = []
        if config.query_rgb:
            parts.append(feats[j])
        parts.append(blocks.pix[j])
        if config.camera != CAMERA_NONE:
            parts.append(tape.broadcast_to(blocks.cam[j], (n, w.d_cam)))
        else:
            parts.append(
                tape.broadcast_to(_indicator_vector(j, config, store, w.d_pix, dtype), (n, w.d_pix))
            )
        if config.query_epipolar and blocks.epi is not None:
            parts.append(blocks.epi[j])
        rows.append(tape.concat(parts, axis=1))
    return QueryMatrix(queries=tape.concat(rows, axis=0))


def _checked_setup(pair, feats1, feats2, grid_hw, config):
    cams = _pair_cameras(pair)
    gh, gw = grid_hw
    n = gh * gw
    feats = _flatten_features((feats1, feats2), config.d_rgb)
    if feats[0].shape[0] != n:
        raise ShapeMismatch(f"feature grid has {feats[0].shape[0]} cells, expected {n}")
    return cams, n, feats


def build_inputs(
    pair,
    feats1,
    feats2,
    grid_hw: tuple[int, int],
    config: FeaturizerConfig,
    store: ParamStore,
    ref: EpipolarRef | None = None,
    dtype=np.float32,
) -> InputMatrix:
    """Assemble the [num_tokens, d_in] input matrix for one sample.

    Channel assembly rows are [rgb | pixel | camera | epipolar?]; token
    assembly uses per-pixel rows [rgb | pixel | indicator | epipolar?] plus
    one camera token per image, everything padded to a common width with a
    single learnable padding vector.
    """
    cams, n, feats = _checked_setup(pair, feats1, feats2, grid_hw, config)
    w = widths(config)
    blocks = _geometry_blocks(cams, grid_hw[0], grid_hw[1], config, ref, dtype)
    return _assemble_inputs(blocks, feats, n, config, store, w, dtype)


def build_queries(
    pair,
    feats1,
    feats2,
    grid_hw: tuple[int, int],
    config: FeaturizerConfig,
    store: ParamStore,
    ref: EpipolarRef | None = None,
    dtype=np.float32,
) -> QueryMatrix:
    """One query per output-depth pixel at grid resolution, image 1 first.

    Queries carry the geometric embedding (pixel + camera parts, and the
    epipolar part when query_epipolar is set); RGB features are prepended
    only when query_rgb is set.
    """
    cams, n, feats = _checked_setup(pair, feats1, feats2, grid_hw, config)
    w = widths(config)
    block_cfg = config if config.query_epipolar else replace(config, epipolar=EPIPOLAR_NONE)
    blocks = _geometry_blocks(cams, grid_hw[0], grid_hw[1], block_cfg, ref, dtype)
    return _assemble_queries(blocks, feats, n, config, store, w, dtype)


def build_sample_matrices(
    pair,
    feats1,
    feats2,
    grid_hw: tuple[int, int],
    config: FeaturizerConfig,
    store: ParamStore,
    ref: EpipolarRef | None = None,
    dtype=np.float32,
) -> tuple[InputMatrix, QueryMatrix]:
    """Inputs and queries together, sharing one geometry computation."""
    cams, n, feats = _checked_setup(pair, feats1, feats2, grid_hw, config)
    w = widths(config)
    blocks = _geometry_blocks(cams, grid_hw[0], grid_hw[1], config, ref, dtype)
    return (
        _assemble_inputs(blocks, feats, n, config, store, w, dtype),
        _assemble_queries(blocks, feats, n, config, store, w, dtype),
    )
