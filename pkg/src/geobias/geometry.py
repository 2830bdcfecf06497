"""Pinhole camera algebra and the geometric quantities fed to the network.

Conventions used across the whole package:

- Extrinsics map world to camera coordinates: x_cam = R @ x_world + t.
  The camera looks along +z, x points right, y points down (OpenCV).
- Continuous image coordinates place the center of pixel (column u, row v)
  at (u + 0.5, v + 0.5), so a centered principal point is (W/2, H/2).
- Everything in this module is computed in float64. Casting to the network
  precision happens where inputs are assembled, not here.

All functions are pure; there is no shared mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ROT_TOL = 1e-9


class DegenerateRay(Exception):
    """Raised when a viewing ray is (numerically) parallel to the baseline."""


def _as_f64(a, shape, name):
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    return out


@dataclass(frozen=True)
class Camera:
    """One calibrated pinhole view.

    k: 3x3 intrinsics (pixels), upper triangular, k[2,2] == 1.
    r: 3x3 world-to-camera rotation, orthonormal with det +1.
    t: world-to-camera translation (meters).
    """

    k: np.ndarray
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "k", _as_f64(self.k, (3, 3), "k"))
        object.__setattr__(self, "r", _as_f64(self.r, (3, 3), "r"))
        object.__setattr__(self, "t", _as_f64(self.t, (3,), "t"))
        k, r = self.k, self.r
        if k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0 or k[2, 2] != 1.0:
            raise ValueError("k must be upper triangular with k[2,2] == 1")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        if np.abs(r.T @ r - np.eye(3)).max() > ROT_TOL:
            raise ValueError("r is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise ValueError("r must have determinant +1")

    def project(self, points):
        """World points (..., 3) -> continuous pixel coordinates (..., 2)."""
        cam = points @ self.r.T + self.t
        img = cam @ self.k.T
        return img[..., :2] / img[..., 2:3]

    def unproject(self, pixels, depth):
        """Pixels (..., 2) with z-depth (...) -> world points (..., 3).

        Depth is the camera-frame z of the point, not distance along the ray.
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        ones = np.ones(pixels.shape[:-1] + (1,))
        homo = np.concatenate([pixels, ones], axis=-1)
        cam = homo @ np.linalg.inv(self.k).T  # z component is exactly 1
        cam = cam * np.asarray(depth, dtype=np.float64)[..., None]
        return (cam - self.t) @ self.r


@dataclass(frozen=True)
class CameraPair:
    cam1: Camera
    cam2: Camera

    def baseline(self):
        return camera_center(self.cam2) - camera_center(self.cam1)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Fourier band counts and sampling rates for each geometric quantity."""

    bands_ray: int = 10
    bands_center: int = 10
    bands_matrix: int = 10
    bands_pixel: int = 10
    bands_epipolar: int = 20
    mu_geom: float = 60.0
    mu_epipolar: float = 120.0
    mu_pixel: float = 60.0
    epsilon_norm: float = 1e-8

    def __post_init__(self):
        for name in ("bands_ray", "bands_center", "bands_matrix", "bands_pixel", "bands_epipolar"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("mu_geom", "mu_epipolar", "mu_pixel"):
            if getattr(self, name) <= 2:
                raise ValueError(f"{name} must be > 2")
        if self.epsilon_norm <= 0:
            raise ValueError("epsilon_norm must be positive")


@dataclass(frozen=True)
class EpipolarRef:
    """Reference epipolar plane shared by both frames of a pair."""

    normal_ref: np.ndarray
    seed: int = 0

    def __post_init__(self):
        n = _as_f64(self.normal_ref, (3,), "normal_ref")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("normal_ref must be unit length")
        object.__setattr__(self, "normal_ref", n)


def camera_center(cam: Camera) -> np.ndarray:
    """World-space position of the pinhole, c = -R^T t."""
    return -cam.r.T @ cam.t


def projection_matrix(cam: Camera) -> np.ndarray:
    """3x4 matrix P = K [R | t] mapping homogeneous world to image points."""
    return cam.k @ np.concatenate([cam.r, cam.t[:, None]], axis=1)


def ray_direction(cam: Camera, pixel) -> np.ndarray:
    """Unit world-frame direction from the camera center through `pixel`.

    Accepts a single (2,) pixel or a batch (..., 2) of continuous pixel
    coordinates; returns matching (..., 3) unit vectors.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    ones = np.ones(pixel.shape[:-1] + (1,))
    homo = np.concatenate([pixel, ones], axis=-1)
    d = homo @ np.linalg.inv(cam.k @ cam.r).T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def fourier_frequencies(bands: int, mu: float) -> np.ndarray:
    """Band frequencies, linearly spaced from 1 to mu/2 inclusive."""
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if mu <= 2:
        raise ValueError("mu must be > 2")
    return np.linspace(1.0, mu / 2.0, bands)


def fourier_embed(v, bands: int, mu: float) -> np.ndarray:
    """Per-element Fourier features [x, sin(f1 pi x), cos(f1 pi x), ...].

    Input (..., d) maps to (..., (2*bands+1)*d); each element contributes a
    contiguous block of 2*bands+1 features.
    """
    v = np.asarray(v, dtype=np.float64)
    freqs = fourier_frequencies(bands, mu)
    ang = v[..., None] * (np.pi * freqs)  # (..., d, bands)
    block = np.empty(v.shape + (2 * bands + 1,))
    block[..., 0] = v
    block[..., 1::2] = np.sin(ang)
    block[..., 2::2] = np.cos(ang)
    return block.reshape(v.shape[:-1] + (v.shape[-1] * (2 * bands + 1),))


def epipolar_normal_batch(pair: CameraPair, cam_index: int, pixels, eps: float = 1e-8):
    """Sign-canonicalized epipolar plane normals for pixels (..., 2).

    Returns (normals, degenerate_mask). Degenerate entries (ray parallel to
    the baseline, i.e. the pixel sits on the epipole) are flagged rather than
    raised so vectorized callers can substitute a neighbor.
    """
    b = pair.baseline()
    if np.linalg.norm(b) <= 1e-9:
        raise ValueError("camera centers coincide; epipolar geometry undefined")
    cam = pair.cam1 if cam_index == 0 else pair.cam2
    rays = ray_direction(cam, pixels)
    v = np.cross(np.broadcast_to(b, rays.shape), rays)
    norm = np.linalg.norm(v, axis=-1)
    sign = np.where(v[..., 0] >= 0.0, 1.0, -1.0)  # sign(0) == +1
    n = v * (sign / (norm + eps))[..., None]
    return n, norm < 10.0 * eps


def epipolar_normal(pair: CameraPair, cam_index: int, pixel, eps: float = 1e-8) -> np.ndarray:
    """Normal of the epipolar plane through one pixel's viewing ray.

    Raises DegenerateRay at the epipole; callers that work on pixel grids
    substitute the nearest non-degenerate neighbor instead.
    """
    n, degenerate = epipolar_normal_batch(pair, cam_index, np.asarray(pixel, dtype=np.float64), eps)
    if degenerate.any():
        raise DegenerateRay("viewing ray is parallel to the baseline (pixel at epipole)")
    return n


def epipolar_angle(n, ref: EpipolarRef):
    """Scaled angle in [-1, 1] between a plane normal and the reference normal."""
    n = np.asarray(n, dtype=np.float64)
    dot = np.clip(n @ ref.normal_ref, -1.0, 1.0)
    return 2.0 * (np.arccos(dot) / np.pi - 0.5)


def relative_pose(pair: CameraPair) -> CameraPair:
    """Re-express the pair with camera 1 at the world origin.

    cam1 becomes (K1, I, 0); cam2 becomes (K2, R2 R1^T, t2 - R2 R1^T t1).
    Pairwise geometry (baseline, relative rotation) is unchanged.
    """
    r1, t1 = pair.cam1.r, pair.cam1.t
    r_rel = pair.cam2.r @ r1.T
    t_rel = pair.cam2.t - r_rel @ t1
    cam1 = replace(pair.cam1, r=np.eye(3), t=np.zeros(3))
    cam2 = replace(pair.cam2, r=nearest_rotation(r_rel), t=t_rel)
    return CameraPair(cam1, cam2)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    kmat = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * kmat + (1.0 - np.cos(angle)) * (kmat @ kmat)


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Uniform random axis, angle uniform in [0, max_angle]."""
    if max_angle == 0.0:
        return np.eye(3)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    return rotation_about_axis(axis, rng.uniform(0.0, max_angle))


def nearest_rotation(m) -> np.ndarray:
    """Closest rotation matrix in Frobenius norm (SVD projection)."""
    u, _, vh = np.linalg.svd(np.asarray(m, dtype=np.float64))
    if np.linalg.det(u @ vh) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ vh


def rotation_angle(r) -> float:
    """Rotation angle in radians, trace argument clamped to [-1, 1]."""
    c = np.clip((np.trace(np.asarray(r)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def pick_reference_plane(
    pair: CameraPair, grid_hw: tuple[int, int], seed: int, stride: int = 4, eps: float = 1e-8
) -> EpipolarRef:
    """Reference plane from a random pixel of image 1.

    The pixel is drawn uniformly from the feature grid of image 1 using a
    dedicated RNG stream, so the choice is reproducible from `seed` alone.
    Degenerate draws (epipole) are redrawn.
    """
    gh, gw = grid_hw
    rng = np.random.default_rng(np.random.SeedSequence([0x5EEDFACE, seed & 0xFFFFFFFFFFFFFFFF]))
    for _ in range(100):
        gy = int(rng.integers(gh))
        gx = int(rng.integers(gw))
        pixel = grid_pixel_coords(gh, gw, stride)[gy * gw + gx]
        n, degenerate = epipolar_normal_batch(pair, 0, pixel, eps)
        if not degenerate.any():
            return EpipolarRef(normal_ref=n / np.linalg.norm(n), seed=seed)
    raise DegenerateRay("could not find a non-degenerate reference pixel")


def grid_pixel_coords(gh: int, gw: int, stride: int = 4) -> np.ndarray:
    """Continuous image coordinates of feature-grid cell centers, row-major.

    A stride-s cell (gy, gx) covers input pixels [s*gx, s*gx+s) x [s*gy, ...);
    its centroid in continuous coordinates is (s*gx + s/2, s*gy + s/2).
    """
    xs = stride * np.arange(gw) + stride / 2.0
    ys = stride * np.arange(gh) + stride / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def normalized_intrinsics(k, width: int, height: int) -> np.ndarray:
    """Rescale intrinsics so image coordinates span [-1, 1] in both axes."""
    n = np.array([[2.0 / width, 0.0, -1.0], [0.0, 2.0 / height, -1.0], [0.0, 0.0, 1.0]])
    return n @ np.asarray(k, dtype=np.float64)
