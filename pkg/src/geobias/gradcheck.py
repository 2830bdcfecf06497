"""Central finite-difference verification of every autodiff primitive,
plus the full 12-variable pose chain through a fresh tiny model.

Each registered case builds float64 inputs and a scalar loss; the analytic
gradient from the tape is compared against central differences with a
per-input relative error

    err = max|analytic - numeric| / (max(|analytic|, |numeric|) + 1e-9).

Primitives must stay below 1e-4; the pose chain (a long composition through
Fourier features and attention) gets 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

PRIMITIVE_TOL = 1e-4
POSE_TOL = 1e-3


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def numeric_gradient(f, arrays: list[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. arrays[index]."""
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(arrays)
        flat[i] = orig - step
        fm = f(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_case(build, corrupt: bool = False, h: float = 1e-6) -> float:
    """Compare tape gradients of one case against finite differences."""
    arrays, fn = build()
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    if corrupt:
        analytic = [a + 1e-2 for a in analytic]

    def scalar(arrs):
        with tape.no_grad():
            return float(fn(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i in range(len(arrays)):
        numeric = numeric_gradient(scalar, arrays, i, h)
        denom = max(np.abs(analytic[i]).max(), np.abs(numeric).max(), 0.0) + 1e-9
        worst = max(worst, float(np.abs(analytic[i] - numeric).max() / denom))
    return worst


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([11, tag]))


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return tape.tsum(tape.mul(t, w))


# --- case builders, one per primitive ---------------------------------------


def _case_add():
    r = _rng(1)
    w = r.normal(size=(3, 4))
    return [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: _weighted(tape.add(a, b), w)


def _case_sub():
    r = _rng(2)
    w = r.normal(size=(3, 4))
    return [r.normal(size=(3, 4)), r.normal(size=(3, 1))], lambda a, b: _weighted(tape.sub(a, b), w)


def _case_mul():
    r = _rng(3)
    w = r.normal(size=(2, 3, 4))
    return [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], lambda a, b: _weighted(tape.mul(a, b), w)


def _case_div():
    r = _rng(4)
    w = r.normal(size=(3, 4))
    return [r.normal(size=(3, 4)), 0.5 + r.uniform(0.2, 1.0, size=(4,))], lambda a, b: _weighted(
        tape.div(a, b), w
    )


def _case_neg():
    r = _rng(5)
    w = r.normal(size=(5,))
    return [r.normal(size=(5,))], lambda a: _weighted(tape.neg(a), w)


def _case_exp():
    r = _rng(6)
    w = r.normal(size=(3, 3))
    return [r.normal(size=(3, 3))], lambda a: _weighted(tape.exp(a), w)


def _case_log():
    r = _rng(7)
    w = r.normal(size=(3, 3))
    return [r.uniform(0.5, 3.0, size=(3, 3))], lambda a: _weighted(tape.log(a), w)


def _case_sqrt():
    r = _rng(8)
    w = r.normal(size=(3, 3))
    return [r.uniform(0.5, 3.0, size=(3, 3))], lambda a: _weighted(tape.sqrt(a), w)


def _case_sin():
    r = _rng(9)
    w = r.normal(size=(7,))
    return [r.normal(size=(7,))], lambda a: _weighted(tape.sin(a), w)


def _case_cos():
    r = _rng(10)
    w = r.normal(size=(7,))
    return [r.normal(size=(7,))], lambda a: _weighted(tape.cos(a), w)


def _case_abs():
    r = _rng(11)
    w = r.normal(size=(8,))
    x = r.normal(size=(8,))
    x = np.where(np.abs(x) < 0.2, 0.5, x)  # keep clear of the kink
    return [x], lambda a: _weighted(tape.absolute(a), w)


def _case_relu():
    r = _rng(12)
    w = r.normal(size=(8,))
    x = r.normal(size=(8,))
    x = np.where(np.abs(x) < 0.2, -0.5, x)
    return [x], lambda a: _weighted(tape.relu(a), w)


def _case_gelu():
    r = _rng(13)
    w = r.normal(size=(8,))
    return [r.normal(size=(8,))], lambda a: _weighted(tape.gelu(a), w)


def _case_arccos():
    r = _rng(14)
    w = r.normal(size=(6,))
    return [r.uniform(-0.8, 0.8, size=(6,))], lambda a: _weighted(tape.arccos(a), w)


def _case_clip():
    r = _rng(15)
    w = r.normal(size=(8,))
    x = r.uniform(-2.0, 2.0, size=(8,))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, 0.5, x)  # keep clear of the clamp edges
    return [x], lambda a: _weighted(tape.clip(a, -1.0, 1.0), w)


def _case_sum():
    r = _rng(16)
    w = r.normal(size=(3,))
    return [r.normal(size=(3, 4))], lambda a: _weighted(tape.tsum(a, axis=1), w)


def _case_mean():
    r = _rng(17)
    w = r.normal(size=(4,))
    return [r.normal(size=(3, 4))], lambda a: _weighted(tape.tmean(a, axis=0), w)


def _case_reshape():
    r = _rng(18)
    w = r.normal(size=(12,))
    return [r.normal(size=(3, 4))], lambda a: _weighted(tape.reshape(a, (12,)), w)


def _case_transpose():
    r = _rng(19)
    w = r.normal(size=(4, 2, 3))
    return [r.normal(size=(2, 3, 4))], lambda a: _weighted(tape.transpose(a, (2, 0, 1)), w)


def _case_broadcast_to():
    r = _rng(20)
    w = r.normal(size=(4, 3, 5))
    return [r.normal(size=(3, 1))], lambda a: _weighted(tape.broadcast_to(a, (4, 3, 5)), w)


def _case_getitem():
    r = _rng(21)
    idx = np.array([0, 2, 2, 1, 0])  # repeats exercise scatter-add
    w = r.normal(size=(5, 4))
    return [r.normal(size=(3, 4))], lambda a: _weighted(tape.getitem(a, idx), w)


def _case_concat():
    r = _rng(22)
    w = r.normal(size=(3, 7))
    return [r.normal(size=(3, 3)), r.normal(size=(3, 4))], lambda a, b: _weighted(
        tape.concat([a, b], axis=1), w
    )


def _case_stack():
    r = _rng(23)
    w = r.normal(size=(2, 3, 4))
    return [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: _weighted(
        tape.stack([a, b], axis=0), w
    )


def _case_cast():
    r = _rng(24)
    w = r.normal(size=(5,))
    return [r.normal(size=(5,))], lambda a: _weighted(tape.cast(a, np.float64), w)


def _case_matmul():
    r = _rng(25)
    w = r.normal(size=(2, 3, 5))
    return [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], lambda a, b: _weighted(
        tape.matmul(a, b), w
    )


def _case_linear():
    r = _rng(34)
    w = r.normal(size=(2, 3, 5))
    return [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))], (
        lambda x, wt, b: _weighted(tape.linear(x, wt, b), w)
    )


def _case_fourier_features():
    r = _rng(35)
    freqs = np.pi * np.linspace(1.0, 4.0, 3)
    w = r.normal(size=(4, 2 * (2 * 3 + 1)))
    return [r.normal(size=(4, 2))], lambda x: _weighted(tape.fourier_features(x, freqs), w)


def _case_matinv():
    r = _rng(26)
    w = r.normal(size=(3, 3))
    a = 2.0 * np.eye(3) + 0.3 * r.normal(size=(3, 3))
    return [a], lambda a_: _weighted(tape.matinv(a_), w)


def _case_cross():
    r = _rng(27)
    w = r.normal(size=(5, 3))
    return [r.normal(size=(5, 3)), r.normal(size=(5, 3))], lambda a, b: _weighted(tape.cross(a, b), w)


def _case_svd_rotation():
    from .geometry import random_rotation

    r = _rng(28)
    w = r.normal(size=(3, 3))
    a = random_rotation(r, 1.5) + 0.15 * r.normal(size=(3, 3))
    return [a], lambda a_: _weighted(tape.svd_rotation(a_), w)


def _case_softmax():
    r = _rng(29)
    w = r.normal(size=(3, 5))
    return [r.normal(size=(3, 5))], lambda a: _weighted(tape.softmax(a, axis=-1), w)


def _case_layer_norm():
    r = _rng(30)
    w = r.normal(size=(4, 6))
    return [r.normal(size=(4, 6)), r.uniform(0.5, 1.5, size=(6,)), r.normal(size=(6,))], (
        lambda x, g, b: _weighted(tape.layer_norm(x, g, b), w)
    )


def _case_conv2d():
    r = _rng(31)
    w = r.normal(size=(2, 3, 3, 4))
    return [
        r.normal(size=(2, 6, 6, 3)),
        0.2 * r.normal(size=(3, 3, 3, 4)),
        0.1 * r.normal(size=(4,)),
    ], lambda x, k, b: _weighted(tape.conv2d(x, k, b, stride=2, padding=1), w)


def _case_maxpool2x2():
    r = _rng(32)
    w = r.normal(size=(2, 2, 2, 3))
    return [r.normal(size=(2, 4, 4, 3))], lambda a: _weighted(tape.maxpool2x2(a), w)


class _TensorDict(dict):
    """Duck-typed stand-in for ParamStore in isolated block checks."""


def _case_batchnorm_eval():
    from .model import batchnorm

    r = _rng(33)
    w = r.normal(size=(2, 4, 4, 3))
    rm = r.normal(size=(3,))
    rv = r.uniform(0.5, 2.0, size=(3,))

    def fn(x, gain, bias):
        store = _TensorDict(
            {
                "bn.gain": gain,
                "bn.bias": bias,
                "bn.running_mean": Tensor(rm),
                "bn.running_var": Tensor(rv),
            }
        )
        return _weighted(batchnorm(x, store, "bn", train=False), w)

    return [r.normal(size=(2, 4, 4, 3)), r.uniform(0.5, 1.5, size=(3,)), r.normal(size=(3,))], fn


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg": _case_neg,
    "exp": _case_exp,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "sin": _case_sin,
    "cos": _case_cos,
    "abs": _case_abs,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "arccos": _case_arccos,
    "clip": _case_clip,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "broadcast_to": _case_broadcast_to,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "cast": _case_cast,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "fourier_features": _case_fourier_features,
    "matinv": _case_matinv,
    "cross": _case_cross,
    "svd_rotation": _case_svd_rotation,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "maxpool2x2": _case_maxpool2x2,
    "batchnorm_eval": _case_batchnorm_eval,
}


def tiny_pose_setup():
    """A fresh-init miniature model + sample for the pose-chain check."""
    from .featurizer import EPIPOLAR_NORMAL, FeaturizerConfig
    from .geometry import EmbeddingConfig
    from .localization import LocalizerConfig, make_context
    from .model import ModelConfig, init_params
    from .scenegen import SceneConfig, make_sample

    feat_cfg = FeaturizerConfig(
        camera="center_ray",
        epipolar=EPIPOLAR_NORMAL,
        d_rgb=8,
        embed=EmbeddingConfig(bands_ray=2, bands_center=2, bands_epipolar=2, bands_matrix=2, bands_pixel=2),
    )
    model_cfg = ModelConfig(
        num_latents=4, latent_dim=8, self_attn_layers=1, self_attn_heads=2, cross_attn_heads=1, d_rgb=8
    )
    scene_cfg = SceneConfig(height=8, width=8, primitive_count=(1, 2))
    sample = make_sample(seed=1234, config=scene_cfg)
    store = init_params(model_cfg, feat_cfg, _rng(99), dtype=np.float64)
    ctx = make_context(store, model_cfg, feat_cfg, sample)
    return ctx, LocalizerConfig(steps=1)


def check_pose_chain(corrupt: bool = False, h: float = 1e-5) -> float:
    """FD check of localization_loss w.r.t. the 12 pose variables (float64)."""
    from .localization import localization_loss

    ctx, loc_cfg = tiny_pose_setup()
    r = _rng(77)
    r_hat0 = np.eye(3) + r.normal(0.0, 0.1, size=(3, 3))
    t0 = r.normal(0.0, 0.1, size=3)

    r_hat = Tensor(r_hat0.copy(), requires_grad=True)
    t = Tensor(t0.copy(), requires_grad=True)
    loss = localization_loss(r_hat, t, ctx, loc_cfg)
    loss.backward()
    analytic = [r_hat.grad.copy(), t.grad.copy()]
    if corrupt:
        analytic = [a + 1e-2 for a in analytic]

    def scalar(arrs):
        with tape.no_grad():
            return float(localization_loss(Tensor(arrs[0]), Tensor(arrs[1]), ctx, loc_cfg).data)

    arrays = [r_hat0.copy(), t0.copy()]
    worst = 0.0
    for i in range(2):
        numeric = numeric_gradient(scalar, arrays, i, h)
        denom = max(np.abs(analytic[i]).max(), np.abs(numeric).max(), 0.0) + 1e-9
        worst = max(worst, float(np.abs(analytic[i] - numeric).max() / denom))
    return worst


def run_all(corrupt: str | None = None, include_pose: bool = True) -> list[CheckRow]:
    """Every primitive exactly once, then the pose chain."""
    rows = []
    for name, case in PRIMITIVE_CASES.items():
        err = check_case(case, corrupt=(corrupt == name))
        rows.append(CheckRow(name=name, max_rel_err=err, tol=PRIMITIVE_TOL))
    if include_pose:
        err = check_pose_chain(corrupt=(corrupt == "pose_chain"))
        rows.append(CheckRow(name="pose_chain", max_rel_err=err, tol=POSE_TOL))
    return rows
