"""Camera localization by gradient descent through a frozen depth model.

The first camera is fixed at the origin; the second camera's rotation is
overparameterized as an unconstrained 3x3 matrix that is projected onto
SO(3) by SVD inside the loss, plus a free translation (12 variables in
total). The objective is the masked log-depth error on both images plus
regularizers that keep the pose small; gradients reach the pose through
the geometric input embeddings of the frozen network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .featurizer import CAMERA_CENTER_RAY, EPIPOLAR_NORMAL, FeaturizerConfig, TapeCamera
from .geometry import relative_pose, rotation_angle
from .model import ModelConfig, conv_preprocess, forward_depth, scale_images
from .params import ParamStore
from .scenegen import SamplePair
from .tape import Tensor
from .training import cosine_lr, l1log_loss, valid_mask


class Degenerate(Exception):
    """Rotation projection is numerically singular for this estimate."""


class AllRestartsDegenerate(Exception):
    """Every random restart hit a degenerate rotation projection."""


@dataclass(frozen=True)
class LocalizerConfig:
    lambda_rot: float = 1.0
    lambda_trans: float = 20.0  # translation in native meters, errors reported in cm
    steps: int = 200
    lr_init: float = 5e-3
    restarts: int = 5
    init_noise_sigma: float = 0.1  # N(0, 0.01) entries

    def __post_init__(self):
        if min(self.lambda_rot, self.lambda_trans, self.steps, self.lr_init, self.init_noise_sigma) <= 0:
            raise ValueError("localizer config values must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class PoseEstimate:
    r_hat: np.ndarray  # unconstrained 3x3 optimization variables
    t: np.ndarray  # 3 translation variables
    r: np.ndarray  # SVD-projected rotation

    def __post_init__(self):
        if np.abs(self.r.T @ self.r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(self.r) - 1) > 1e-9:
            raise ValueError("projected pose rotation is not orthonormal")


def orthogonalize(r_hat: np.ndarray) -> np.ndarray:
    """Nearest proper rotation, R = U V^T from the SVD of r_hat.

    A reflection (det == -1) flips the last column of U. Raises Degenerate
    when the smallest singular value vanishes.
    """
    u, s, vh = np.linalg.svd(np.asarray(r_hat, dtype=np.float64))
    if s.min() < 1e-12:
        raise Degenerate("smallest singular value below 1e-12")
    if np.linalg.det(u @ vh) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ vh


def rotation_error(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """Minimum angle (degrees) aligning the two rotations."""
    return float(np.degrees(rotation_angle(r_gt.T @ r_est)))


def translation_error(c_est: np.ndarray, c_gt: np.ndarray) -> float:
    """Euclidean camera-center distance in centimeters."""
    return float(np.linalg.norm(np.asarray(c_est) - np.asarray(c_gt)) * 100.0)


@dataclass
class LocalizationContext:
    """Everything about one sample that does not depend on the pose."""

    store: ParamStore
    model_cfg: ModelConfig
    feat_cfg: FeaturizerConfig
    images: np.ndarray  # [1, 2, H, W, 3] uint8
    conv_feats: object  # cached eval-mode feature grids (constant tensor)
    gt_depth: np.ndarray  # [1, 2, H, W]
    k1: np.ndarray
    k2: np.ndarray
    r_gt: np.ndarray
    t_gt: np.ndarray
    mask: np.ndarray


def check_embedding_mode(feat_cfg: FeaturizerConfig) -> None:
    if feat_cfg.camera != CAMERA_CENTER_RAY or feat_cfg.epipolar != EPIPOLAR_NORMAL:
        raise ValueError(
            "localization requires a model trained with center+ray camera embeddings "
            f"and normal epipolar cues, got camera={feat_cfg.camera!r} epipolar={feat_cfg.epipolar!r}"
        )


def make_context(
    store: ParamStore, model_cfg: ModelConfig, feat_cfg: FeaturizerConfig, sample: SamplePair
) -> LocalizationContext:
    check_embedding_mode(feat_cfg)
    rel = relative_pose(sample.pair())
    images = np.stack([np.stack([sample.image1, sample.image2])])
    dtype = store["latents"].dtype
    h, w = sample.shape
    with tape.no_grad():
        flat = scale_images(images.reshape(2, h, w, 3), dtype)
        conv_feats = conv_preprocess(Tensor(flat), store, train=False)
    gt = np.stack([np.stack([sample.depth1, sample.depth2])])
    return LocalizationContext(
        store=store,
        model_cfg=model_cfg,
        feat_cfg=feat_cfg,
        images=images,
        conv_feats=conv_feats,
        gt_depth=gt,
        k1=rel.cam1.k,
        k2=rel.cam2.k,
        r_gt=rel.cam2.r,
        t_gt=rel.cam2.t,
        mask=valid_mask(gt),
    )


def localization_loss(r_hat: Tensor, t: Tensor, ctx: LocalizationContext, cfg: LocalizerConfig):
    """Masked L1Log on both images + lambda_rot * angle(R) + lambda_trans * |t|.

    r_hat/t may be tape leaves; the rotation applied to the camera is the
    SVD projection of r_hat, differentiated through the projection.
    """
    r_hat = tape.as_tensor(r_hat)
    t = tape.as_tensor(t)
    r2 = tape.svd_rotation(r_hat)
    cam1 = TapeCamera(k=ctx.k1, r=Tensor(np.eye(3)), t=Tensor(np.zeros(3)))
    cam2 = TapeCamera(k=ctx.k2, r=r2, t=t)
    depth = forward_depth(
        ctx.images,
        [(cam1, cam2)],
        ctx.store,
        ctx.model_cfg,
        ctx.feat_cfg,
        train=False,
        refs=[None],
        conv_feats=ctx.conv_feats,
    )
    depth_term = l1log_loss(depth, ctx.gt_depth, ctx.mask)
    trace = tape.add(tape.add(r2[0, 0], r2[1, 1]), r2[2, 2])
    rot_term = tape.arccos(tape.clip(tape.mul(tape.sub(trace, 1.0), 0.5), -1.0, 1.0))
    trans_term = tape.sqrt(tape.add(tape.tsum(tape.mul(t, t)), 1e-24))
    reg = tape.add(tape.mul(rot_term, cfg.lambda_rot), tape.mul(trans_term, cfg.lambda_trans))
    return tape.add(depth_term, tape.cast(reg, depth_term.dtype))


@dataclass
class LocalizeResult:
    pose: PoseEstimate
    chosen_restart: int
    final_loss: float
    init_rot_deg: float
    init_trans_cm: float
    final_rot_deg: float
    final_trans_cm: float
    restart_losses: list
    best_trajectory: list

    def record(self) -> dict:
        return {
            "init_rot_deg": self.init_rot_deg,
            "init_trans_cm": self.init_trans_cm,
            "final_rot_deg": self.final_rot_deg,
            "final_trans_cm": self.final_trans_cm,
            "final_loss": self.final_loss,
            "chosen_restart": self.chosen_restart,
        }


def _pose_errors(r_hat: np.ndarray, t: np.ndarray, ctx: LocalizationContext) -> tuple[float, float]:
    r = orthogonalize(r_hat)
    c_est = -r.T @ t
    c_gt = -ctx.r_gt.T @ ctx.t_gt
    return rotation_error(r, ctx.r_gt), translation_error(c_est, c_gt)


def localize(
    store: ParamStore,
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    sample: SamplePair,
    cfg: LocalizerConfig = LocalizerConfig(),
    zero_init: bool = False,
) -> LocalizeResult:
    """Recover the second camera's pose with random restarts.

    Each restart initializes t = eps and R_hat = I + eps (entries
    N(0, sigma^2)), runs `steps` ADAM iterations with a cosine learning
    rate on the 12 pose variables, and the restart with the lowest final
    total loss wins (ties broken by restart index). `zero_init` starts at
    the ground-truth pose instead (descent sanity checks).
    """
    ctx = make_context(store, model_cfg, feat_cfg, sample)
    best = None
    init_errors = None
    restart_losses: list = []

    for restart in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([7, sample.seed & 0xFFFFFFFFFFFFFFFF, restart]))
        eps_r = rng.normal(0.0, cfg.init_noise_sigma, size=(3, 3))
        eps_t = rng.normal(0.0, cfg.init_noise_sigma, size=3)
        if zero_init:
            r_hat = Tensor(ctx.r_gt.copy(), requires_grad=True)
            t = Tensor(ctx.t_gt.copy(), requires_grad=True)
        else:
            r_hat = Tensor(np.eye(3) + eps_r, requires_grad=True)
            t = Tensor(eps_t.copy(), requires_grad=True)
        if restart == 0:
            init_errors = _pose_errors(r_hat.data, t.data, ctx)

        m = {id(r_hat): np.zeros((3, 3)), id(t): np.zeros(3)}
        v = {id(r_hat): np.zeros((3, 3)), id(t): np.zeros(3)}
        trajectory = []
        failed = False
        for step in range(cfg.steps):
            try:
                loss = localization_loss(r_hat, t, ctx, cfg)
            except ValueError:
                failed = True
                break
            r_hat.grad = None
            t.grad = None
            loss.backward()
            trajectory.append(float(loss.data))
            lr = cosine_lr(step, cfg.steps, cfg.lr_init)
            k = step + 1
            for var in (r_hat, t):
                g = var.grad.astype(np.float64)
                m[id(var)] = 0.9 * m[id(var)] + 0.1 * g
                v[id(var)] = 0.999 * v[id(var)] + 0.001 * g * g
                mhat = m[id(var)] / (1.0 - 0.9**k)
                vhat = v[id(var)] / (1.0 - 0.999**k)
                var.data = var.data - lr * mhat / (np.sqrt(vhat) + 1e-8)
        if failed:
            restart_losses.append(None)
            continue
        with tape.no_grad():
            final_loss = float(localization_loss(Tensor(r_hat.data), Tensor(t.data), ctx, cfg).data)
        trajectory.append(final_loss)
        restart_losses.append(final_loss)
        if best is None or final_loss < best[0]:
            best = (final_loss, restart, r_hat.data.copy(), t.data.copy(), trajectory)

    if best is None:
        raise AllRestartsDegenerate(f"all {cfg.restarts} restarts hit degenerate rotations")

    final_loss, restart, r_hat_data, t_data, trajectory = best
    try:
        r_proj = orthogonalize(r_hat_data)
    except Degenerate as e:  # the winning restart still produced a valid loss
        raise AllRestartsDegenerate(str(e)) from e
    pose = PoseEstimate(r_hat=r_hat_data, t=t_data, r=r_proj)
    final_rot, final_trans = _pose_errors(r_hat_data, t_data, ctx)
    return LocalizeResult(
        pose=pose,
        chosen_restart=restart,
        final_loss=final_loss,
        init_rot_deg=init_errors[0],
        init_trans_cm=init_errors[1],
        final_rot_deg=final_rot,
        final_trans_cm=final_trans,
        restart_losses=restart_losses,
        best_trajectory=trajectory,
    )
