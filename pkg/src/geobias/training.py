"""Training loop, loss, depth metrics, augmentations, and the optimizer.

All randomness is derived statelessly from (seed, epoch, index) seed
sequences, so a run resumed from an epoch checkpoint continues bit-for-bit
like the uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import configio, tape
from .geometry import EpipolarRef, pick_reference_plane, relative_pose
from .model import DepthMap, ModelConfig, forward_depth, init_params
from .params import ParamStore, load_checkpoint, save_checkpoint
from .featurizer import EPIPOLAR_ANGLE, FeaturizerConfig
from .scenegen import SamplePair

DEPTH_VALID_MIN = 0.1
DEPTH_VALID_MAX = 10.0

CSV_HEADER = "epoch,train_loss,val_abs_rel,val_rmse,val_delta125"


class EmptyMask(Exception):
    """No valid pixels to average over."""


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    # augmentation toggles + crop geometry (crop sizes must be multiples of 4)
    color_jitter: bool = True
    crop: bool = True
    flip: bool = True
    rot180: bool = True
    crop_height: int = 20
    crop_width: int = 28

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop and (self.crop_height % 4 or self.crop_width % 4):
            raise ValueError("crop size must be divisible by 4")


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    rmse: float
    delta_125: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss + metrics
# ---------------------------------------------------------------------------


def valid_mask(depth_gt: np.ndarray) -> np.ndarray:
    """True where ground truth is usable: inside [0.1, 10] m (sentinel 0 is out)."""
    return (depth_gt >= DEPTH_VALID_MIN) & (depth_gt <= DEPTH_VALID_MAX)


def l1log_loss(pred, depth_gt: np.ndarray, mask: np.ndarray | None = None):
    """Mean |log d - log d*| over valid pixels; gradients are exactly zero
    at masked pixels. `pred` may be a tape tensor (positive everywhere)."""
    if mask is None:
        mask = valid_mask(depth_gt)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no valid pixels in the ground-truth depth")
    pred = tape.as_tensor(pred)
    gt_log = np.log(np.where(mask, depth_gt, 1.0)).astype(pred.dtype)
    m = mask.astype(pred.dtype)
    diff = tape.absolute(tape.sub(tape.log(pred), gt_log))
    return tape.div(tape.tsum(tape.mul(diff, m)), float(count))


def compute_metrics(pred: np.ndarray, depth_gt: np.ndarray) -> MetricsReport:
    """abs_rel / rmse / delta<1.25 over valid pixels of `depth_gt`."""
    mask = valid_mask(depth_gt)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("no valid pixels in the ground-truth depth")
    d = pred[mask].astype(np.float64)
    g = depth_gt[mask].astype(np.float64)
    abs_rel = float(np.mean(np.abs(d - g) / g))
    rmse = float(np.sqrt(np.mean((d - g) ** 2)))
    delta = float(np.mean(np.maximum(d / g, g / d) < 1.25))
    return MetricsReport(abs_rel=abs_rel, rmse=rmse, delta_125=delta, count=n)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPlan:
    jitter: tuple | None  # (brightness, contrast, saturation, hue_turns)
    rot180: bool
    flip: bool
    crop1: tuple | None  # (y0, x0)
    crop2: tuple | None
    crop_hw: tuple | None


def make_augment_plan(seed: int, shape: tuple, cfg: TrainConfig) -> AugmentPlan:
    rng = np.random.default_rng(np.random.SeedSequence([8, cfg.seed, seed & 0xFFFFFFFFFFFFFFFF]))
    h, w = shape
    jitter = None
    if cfg.color_jitter:
        jitter = (
            rng.uniform(0.8, 1.2),
            rng.uniform(0.8, 1.2),
            rng.uniform(0.8, 1.2),
            rng.uniform(-0.05, 0.05),
        )
    rot = bool(cfg.rot180 and rng.random() < 0.5)
    flip = bool(cfg.flip and rng.random() < 0.5)
    crop1 = crop2 = crop_hw = None
    if cfg.crop and (cfg.crop_height < h or cfg.crop_width < w):
        crop_hw = (cfg.crop_height, cfg.crop_width)
        crop1 = (int(rng.integers(h - cfg.crop_height + 1)), int(rng.integers(w - cfg.crop_width + 1)))
        crop2 = (int(rng.integers(h - cfg.crop_height + 1)), int(rng.integers(w - cfg.crop_width + 1)))
    return AugmentPlan(jitter=jitter, rot180=rot, flip=flip, crop1=crop1, crop2=crop2, crop_hw=crop_hw)


_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.595716, -0.274453, -0.321263], [0.211456, -0.522591, 0.311135]]
)
_YIQ_INV = np.linalg.inv(_YIQ)


def _apply_jitter(img_u8: np.ndarray, jitter: tuple) -> np.ndarray:
    b, c, s, hue = jitter
    x = img_u8.astype(np.float64) / 255.0
    x = x * b
    x = (x - x.mean()) * c + x.mean()
    gray = x @ _YIQ[0]
    x = gray[..., None] + (x - gray[..., None]) * s
    ang = 2.0 * np.pi * hue
    rot = np.array([[1, 0, 0], [0, np.cos(ang), -np.sin(ang)], [0, np.sin(ang), np.cos(ang)]])
    x = (x @ _YIQ.T) @ rot.T @ _YIQ_INV.T
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _flip_k(k32: np.ndarray, width: float) -> np.ndarray:
    out = k32.copy()
    out[0, 2] = np.float32(width) - k32[0, 2]
    return out


def _rot180_k(k32: np.ndarray, width: float, height: float) -> np.ndarray:
    out = k32.copy()
    out[0, 2] = np.float32(width) - k32[0, 2]
    out[1, 2] = np.float32(height) - k32[1, 2]
    return out


_FLIP_X = np.diag([-1.0, 1.0, 1.0]).astype(np.float32)
_FLIP_XY = np.diag([-1.0, -1.0, 1.0]).astype(np.float32)


def _conjugate(r32, t32, m):
    """World and camera frames mirrored together: R -> M R M, t -> M t.

    Both reflections compose to a determinant +1 transform, so the result
    is still a proper rotation, exactly (entry sign flips only).
    """
    return m @ r32 @ m, m @ t32


def augment(sample: SamplePair, seed: int, cfg: TrainConfig) -> SamplePair:
    """Photometric + geometric augmentation with exactly consistent cameras.

    Flip and 180-degree rotation mirror the world together with the image
    axes (pure sign flips, exact in float32); cropping shifts the
    principal point. Depth values are never resampled.
    """
    plan = make_augment_plan(seed, sample.shape, cfg)
    return apply_augment(sample, plan)


def apply_augment(sample: SamplePair, plan: AugmentPlan) -> SamplePair:
    img1, img2 = sample.image1, sample.image2
    dep1, dep2 = sample.depth1, sample.depth2
    k1, k2 = sample.k1, sample.k2
    r1, t1 = sample.r1, sample.t1
    r2, t2 = sample.r2, sample.t2
    h, w = dep1.shape

    if plan.jitter is not None:
        img1 = _apply_jitter(img1, plan.jitter)
        img2 = _apply_jitter(img2, plan.jitter)
    if plan.rot180:
        img1, img2 = img1[::-1, ::-1], img2[::-1, ::-1]
        dep1, dep2 = dep1[::-1, ::-1], dep2[::-1, ::-1]
        k1, k2 = _rot180_k(k1, w, h), _rot180_k(k2, w, h)
        r1, t1 = _conjugate(r1, t1, _FLIP_XY)
        r2, t2 = _conjugate(r2, t2, _FLIP_XY)
    if plan.flip:
        img1, img2 = img1[:, ::-1], img2[:, ::-1]
        dep1, dep2 = dep1[:, ::-1], dep2[:, ::-1]
        k1, k2 = _flip_k(k1, w), _flip_k(k2, w)
        r1, t1 = _conjugate(r1, t1, _FLIP_X)
        r2, t2 = _conjugate(r2, t2, _FLIP_X)
    if plan.crop_hw is not None:
        ch, cw = plan.crop_hw
        (y1, x1), (y2, x2) = plan.crop1, plan.crop2
        img1, dep1 = img1[y1 : y1 + ch, x1 : x1 + cw], dep1[y1 : y1 + ch, x1 : x1 + cw]
        img2, dep2 = img2[y2 : y2 + ch, x2 : x2 + cw], dep2[y2 : y2 + ch, x2 : x2 + cw]
        k1, k2 = k1.copy(), k2.copy()
        k1[0, 2] -= np.float32(x1)
        k1[1, 2] -= np.float32(y1)
        k2[0, 2] -= np.float32(x2)
        k2[1, 2] -= np.float32(y2)

    return SamplePair(
        seed=sample.seed,
        k1=k1, k2=k2,
        r1=np.ascontiguousarray(r1), t1=np.ascontiguousarray(t1),
        r2=np.ascontiguousarray(r2), t2=np.ascontiguousarray(t2),
        image1=np.ascontiguousarray(img1), image2=np.ascontiguousarray(img2),
        depth1=np.ascontiguousarray(dep1), depth2=np.ascontiguousarray(dep2),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """lr(t) = lr_max * 0.5 * (1 + cos(pi * t / T)); no warmup."""
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamState:
    """First/second moment buffers keyed like the parameter store."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, name: str, grad, beta1: float, beta2: float):
        if name not in self.m:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
        self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * grad
        self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * grad * grad
        return self.m[name], self.v[name]


def adamw_step(store: ParamStore, state: AdamState, lr: float, cfg: TrainConfig, eps: float = 1e-8):
    """One decoupled-weight-decay ADAM update over every trainable tensor."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in store.trainable_items():
        if p.grad is None:
            continue
        m, v = state.update(name, p.grad, cfg.beta1, cfg.beta2)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * (update + cfg.weight_decay * p.data).astype(p.dtype)


# ---------------------------------------------------------------------------
# batch assembly + forward wrappers
# ---------------------------------------------------------------------------


def _train_ref_seed(cfg_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([9, cfg_seed, epoch, index]).generate_state(1)[0])


def _prepare_batch(samples: list[SamplePair], feat_cfg: FeaturizerConfig, ref_seeds: list[int]):
    images = np.stack([np.stack([s.image1, s.image2]) for s in samples])
    pairs, refs, gts = [], [], []
    gh = samples[0].shape[0] // 4
    gw = samples[0].shape[1] // 4
    for s, rseed in zip(samples, ref_seeds):
        pair = relative_pose(s.pair())
        pairs.append(pair)
        if feat_cfg.epipolar == EPIPOLAR_ANGLE:
            refs.append(pick_reference_plane(pair, (gh, gw), seed=rseed))
        else:
            refs.append(None)
        gts.append(np.stack([s.depth1, s.depth2]))
    return images, pairs, refs, np.stack(gts)


def predict_pair(
    store: ParamStore,
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    sample: SamplePair,
    train: bool = False,
    ref_seed: int = 0,
) -> tuple[DepthMap, DepthMap]:
    """Depth for both images of one sample (eval is deterministic)."""
    images, pairs, refs, _ = _prepare_batch([sample], feat_cfg, [ref_seed])
    with tape.no_grad():
        depth = forward_depth(images, pairs, store, model_cfg, feat_cfg, train=train, refs=refs)
    values = depth.data[0].astype(np.float32)
    full = np.ones(values.shape[1:], dtype=bool)
    return DepthMap(values=values[0], valid=full), DepthMap(values=values[1], valid=full.copy())


def evaluate_store(
    store: ParamStore,
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    samples: list[SamplePair],
    batch_size: int = 16,
) -> MetricsReport:
    """Pixel-pooled metrics over a dataset, eval mode, reference planes
    seeded by sample index."""
    sums = np.zeros(3, dtype=np.float64)
    count = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        ref_seeds = list(range(start, start + len(chunk)))
        images, pairs, refs, gt = _prepare_batch(chunk, feat_cfg, ref_seeds)
        with tape.no_grad():
            depth = forward_depth(images, pairs, store, model_cfg, feat_cfg, train=False, refs=refs)
        mask = valid_mask(gt)
        d = depth.data[mask].astype(np.float64)
        g = gt[mask].astype(np.float64)
        sums[0] += float(np.sum(np.abs(d - g) / g))
        sums[1] += float(np.sum((d - g) ** 2))
        sums[2] += float(np.sum(np.maximum(d / g, g / d) < 1.25))
        count += d.size
    if count == 0:
        raise EmptyMask("validation set has no valid pixels")
    return MetricsReport(
        abs_rel=sums[0] / count,
        rmse=float(np.sqrt(sums[1] / count)),
        delta_125=sums[2] / count,
        count=count,
    )


# ---------------------------------------------------------------------------
# checkpoint plumbing (model params + optimizer state + epoch)
# ---------------------------------------------------------------------------


def write_training_checkpoint(
    path,
    store: ParamStore,
    adam: AdamState,
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    train_cfg: TrainConfig,
    epoch: int,
) -> None:
    combined = ParamStore()
    for name, t in store.items():
        combined.add(name, t.data, buffer=store.is_buffer(name))
    for name, arr in adam.m.items():
        combined.add(f"opt.m.{name}", arr, buffer=True)
    for name, arr in adam.v.items():
        combined.add(f"opt.v.{name}", arr, buffer=True)
    config = {
        "model": configio.model_cfg_to_dict(model_cfg),
        "featurizer": configio.feat_cfg_to_dict(feat_cfg),
        "train": asdict(train_cfg),
        "epoch": epoch,
        "opt_step": adam.step,
    }
    save_checkpoint(path, combined, config)


def load_model(path) -> tuple[ParamStore, ModelConfig, FeaturizerConfig, dict]:
    """Model weights + configs from a checkpoint (optimizer state dropped)."""
    combined, config = load_checkpoint(path)
    store = ParamStore()
    for name, t in combined.items():
        if not name.startswith("opt."):
            store.add(name, t.data, buffer=combined.is_buffer(name))
    model_cfg = configio.model_cfg_from_dict(config["model"])
    feat_cfg = configio.feat_cfg_from_dict(config["featurizer"])
    return store, model_cfg, feat_cfg, config


def load_training_state(path) -> tuple[ParamStore, AdamState, ModelConfig, FeaturizerConfig, TrainConfig, int]:
    combined, config = load_checkpoint(path)
    store = ParamStore()
    adam = AdamState()
    for name, t in combined.items():
        if name.startswith("opt.m."):
            adam.m[name[len("opt.m.") :]] = t.data
        elif name.startswith("opt.v."):
            adam.v[name[len("opt.v.") :]] = t.data
        else:
            store.add(name, t.data, buffer=combined.is_buffer(name))
    adam.step = int(config["opt_step"])
    model_cfg = configio.model_cfg_from_dict(config["model"])
    feat_cfg = configio.feat_cfg_from_dict(config["featurizer"])
    train_cfg = TrainConfig(**config["train"])
    return store, adam, model_cfg, feat_cfg, train_cfg, int(config["epoch"])


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    store: ParamStore
    curve: list[tuple]  # (epoch, train_loss, abs_rel, rmse, delta_125)
    final_metrics: MetricsReport


def curve_to_csv(curve: list[tuple]) -> str:
    lines = [CSV_HEADER]
    for epoch, loss, abs_rel, rmse, delta in curve:
        lines.append(f"{epoch},{loss:.6f},{abs_rel:.6f},{rmse:.6f},{delta:.6f}")
    return "\n".join(lines) + "\n"


def train(
    train_samples: list[SamplePair],
    val_samples: list[SamplePair],
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    train_cfg: TrainConfig,
    checkpoint_path=None,
    curve_path=None,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Deterministic training given the config seed (single-threaded path).

    Emits one loss-curve row per epoch; if `checkpoint_path` is set, a
    resumable checkpoint is (re)written after every epoch.
    """
    if not train_samples:
        raise ValueError("empty training set")
    if resume_from is not None:
        store, adam, m_cfg, f_cfg, t_cfg, start_epoch = load_training_state(resume_from)
        if (m_cfg, f_cfg) != (model_cfg, feat_cfg):
            raise ValueError("resume checkpoint configs disagree with the requested configs")
        train_cfg = t_cfg
    else:
        rng = np.random.default_rng(np.random.SeedSequence([5, train_cfg.seed]))
        store = init_params(model_cfg, feat_cfg, rng)
        adam = AdamState()
        start_epoch = 0

    n = len(train_samples)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch

    curve: list[tuple] = []
    for epoch in range(start_epoch, train_cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([6, train_cfg.seed, epoch])
        ).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            batch = [
                augment(train_samples[i], seed=epoch * n + int(i), cfg=train_cfg) for i in idx
            ]
            ref_seeds = [_train_ref_seed(train_cfg.seed, epoch, int(i)) for i in idx]
            images, pairs, refs, gt = _prepare_batch(batch, feat_cfg, ref_seeds)
            depth = forward_depth(images, pairs, store, model_cfg, feat_cfg, train=True, refs=refs)
            loss = l1log_loss(depth, gt)
            store.zero_grad()
            loss.backward()
            adamw_step(store, adam, cosine_lr(adam.step, total_steps, train_cfg.lr_max), train_cfg)
            losses.append(float(loss.data))
        metrics = evaluate_store(store, model_cfg, feat_cfg, val_samples) if val_samples else None
        row = (
            epoch,
            float(np.mean(losses)),
            metrics.abs_rel if metrics else float("nan"),
            metrics.rmse if metrics else float("nan"),
            metrics.delta_125 if metrics else float("nan"),
        )
        curve.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  train {row[1]:.4f}  val abs_rel {row[2]:.4f}")
        if checkpoint_path is not None:
            write_training_checkpoint(
                checkpoint_path, store, adam, model_cfg, feat_cfg, train_cfg, epoch + 1
            )
        if curve_path is not None:
            with open(curve_path, "w") as f:
                f.write(curve_to_csv(curve))

    final = evaluate_store(store, model_cfg, feat_cfg, val_samples) if val_samples else None
    if final is None:
        final = MetricsReport(abs_rel=float("nan"), rmse=float("nan"), delta_125=float("nan"), count=0)
    return TrainResult(store=store, curve=curve, final_metrics=final)


def evaluate_checkpoint(checkpoint_path, samples: list[SamplePair]) -> MetricsReport:
    store, model_cfg, feat_cfg, _ = load_model(checkpoint_path)
    return evaluate_store(store, model_cfg, feat_cfg, samples)
