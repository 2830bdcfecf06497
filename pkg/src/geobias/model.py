"""The depth network: a latent-bottleneck attention model.

Dataflow per image pair: a shared convolutional preprocessor turns each
RGB image into a stride-4 feature grid; the featurizer attaches geometric
embeddings; one cross-attention compresses all input tokens into a fixed
set of latents; a stack of self-attention layers runs on the latents; a
final cross-attention against per-pixel queries emits, for every coarse
cell, a log-depth value plus convex-upsampling mask logits that lift the
coarse map back to input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import featurizer as ftz
from . import tape
from .geometry import EpipolarRef, relative_pose
from .params import ParamStore
from .tape import Tensor

UPSAMPLE = 4
MASK_CHANNELS = 9 * UPSAMPLE * UPSAMPLE  # 3x3 neighborhood x 16 subpixels
HEAD_CHANNELS = 1 + MASK_CHANNELS
LOGDEPTH_CLIP = 30.0  # numerical guard on exp()


class ShapeError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; the full-scale setting would be 2048x512 latents."""

    num_latents: int = 64
    latent_dim: int = 32
    self_attn_layers: int = 8
    self_attn_heads: int = 8
    cross_attn_heads: int = 1
    d_rgb: int = 64
    ff_mult: int = 2
    upsample_factor: int = 4

    def __post_init__(self):
        if self.latent_dim % self.self_attn_heads or self.latent_dim % self.cross_attn_heads:
            raise ValueError("latent_dim must be divisible by the head counts")
        if self.upsample_factor != UPSAMPLE:
            raise ValueError("only x4 upsampling is supported")


@dataclass
class DepthMap:
    values: np.ndarray  # [H, W] float32 meters
    valid: np.ndarray  # [H, W] bool


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _init_linear(store, rng, name, d_in, d_out, dtype):
    store.add(f"{name}.w", rng.normal(0.0, 0.02, size=(d_in, d_out)).astype(dtype))
    store.add(f"{name}.b", np.zeros(d_out, dtype=dtype))


def _init_layernorm(store, name, dim, dtype):
    store.add(f"{name}.gain", np.ones(dim, dtype=dtype))
    store.add(f"{name}.bias", np.zeros(dim, dtype=dtype))


def _init_attention(store, rng, prefix, d_q, d_kv, d_inner, ff_mult, dtype, cross: bool):
    _init_layernorm(store, f"{prefix}.ln_q", d_q, dtype)
    if cross:
        _init_layernorm(store, f"{prefix}.ln_kv", d_kv, dtype)
    _init_linear(store, rng, f"{prefix}.q", d_q, d_inner, dtype)
    _init_linear(store, rng, f"{prefix}.k", d_kv, d_inner, dtype)
    _init_linear(store, rng, f"{prefix}.v", d_kv, d_inner, dtype)
    _init_linear(store, rng, f"{prefix}.o", d_inner, d_q, dtype)
    _init_layernorm(store, f"{prefix}.ln_ff", d_q, dtype)
    _init_linear(store, rng, f"{prefix}.ff1", d_q, ff_mult * d_q, dtype)
    _init_linear(store, rng, f"{prefix}.ff2", ff_mult * d_q, d_q, dtype)


def init_params(
    model_cfg: ModelConfig,
    feat_cfg: ftz.FeaturizerConfig,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ParamStore:
    """All trainable tensors (and batch-norm buffers) for one model."""
    if model_cfg.d_rgb != feat_cfg.d_rgb:
        raise ValueError("model and featurizer disagree on d_rgb")
    w = ftz.widths(feat_cfg)
    store = ParamStore()
    store.add("conv.w", rng.normal(0.0, 0.02, size=(7, 7, 3, model_cfg.d_rgb)).astype(dtype))
    store.add("conv.b", np.zeros(model_cfg.d_rgb, dtype=dtype))
    _init_layernorm(store, "conv.bn", model_cfg.d_rgb, dtype)
    store.add("conv.bn.running_mean", np.zeros(model_cfg.d_rgb, dtype=dtype), buffer=True)
    store.add("conv.bn.running_var", np.ones(model_cfg.d_rgb, dtype=dtype), buffer=True)

    d = model_cfg.latent_dim
    store.add("latents", rng.normal(0.0, 0.02, size=(model_cfg.num_latents, d)).astype(dtype))
    _init_attention(store, rng, "enc", d, w.d_in, d, model_cfg.ff_mult, dtype, cross=True)
    for i in range(model_cfg.self_attn_layers):
        _init_attention(store, rng, f"self{i}", d, d, d, model_cfg.ff_mult, dtype, cross=False)
    _init_linear(store, rng, "dec.proj", w.d_q, d, dtype)
    _init_attention(store, rng, "dec", d, d, d, model_cfg.ff_mult, dtype, cross=True)
    _init_linear(store, rng, "head", d, HEAD_CHANNELS, dtype)
    ftz.init_featurizer_params(store, feat_cfg, rng)
    return store


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, store: ParamStore, prefix: str, train: bool, momentum: float = 0.9) -> Tensor:
    """Channel-wise batch norm over (batch, height, width) of NHWC input.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running statistics.
    """
    gain, bias = store[f"{prefix}.gain"], store[f"{prefix}.bias"]
    rm, rv = store[f"{prefix}.running_mean"], store[f"{prefix}.running_var"]
    eps = 1e-5
    if train:
        mu = tape.tmean(x, axis=(0, 1, 2), keepdims=True)
        xc = tape.sub(x, mu)
        var = tape.tmean(tape.mul(xc, xc), axis=(0, 1, 2), keepdims=True)
        rm.data = momentum * rm.data + (1.0 - momentum) * mu.data.reshape(-1).astype(rm.dtype)
        rv.data = momentum * rv.data + (1.0 - momentum) * var.data.reshape(-1).astype(rv.dtype)
        inv = tape.div(1.0, tape.sqrt(tape.add(var, eps)))
        xhat = tape.mul(xc, inv)
    else:
        inv = 1.0 / np.sqrt(rv.data + eps)
        xhat = tape.mul(tape.sub(x, rm.data), inv)
    return tape.add(tape.mul(xhat, gain), bias)


def conv_preprocess(images: Tensor, store: ParamStore, train: bool) -> Tensor:
    """RGB [B, H, W, 3] in [-1, 1] -> stride-4 feature grid [B, H/4, W/4, D].

    7x7 stride-2 convolution, batch norm, ReLU, then 2x2 stride-2 max pool.
    """
    _, h, w, _ = images.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image size {h}x{w} must be divisible by 4")
    x = tape.conv2d(images, store["conv.w"], store["conv.b"], stride=2, padding=3)
    x = batchnorm(x, store, "conv.bn", train)
    return tape.maxpool2x2(tape.relu(x))


def _attention_core(x_q: Tensor, x_kv: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Pre-norm attention with a residual on the query pathway + feed-forward."""
    q_in = tape.layer_norm(x_q, store[f"{prefix}.ln_q.gain"], store[f"{prefix}.ln_q.bias"])
    if x_kv is x_q:
        kv_in = q_in
    else:
        kv_in = tape.layer_norm(x_kv, store[f"{prefix}.ln_kv.gain"], store[f"{prefix}.ln_kv.bias"])
    q = tape.linear(q_in, store[f"{prefix}.q.w"], store[f"{prefix}.q.b"])
    k = tape.linear(kv_in, store[f"{prefix}.k.w"], store[f"{prefix}.k.b"])
    v = tape.linear(kv_in, store[f"{prefix}.v.w"], store[f"{prefix}.v.b"])

    b, m, di = q.shape
    n = k.shape[1]
    dh = di // heads
    q = tape.transpose(tape.reshape(q, (b, m, heads, dh)), (0, 2, 1, 3))
    k = tape.transpose(tape.reshape(k, (b, n, heads, dh)), (0, 2, 1, 3))
    v = tape.transpose(tape.reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))
    logits = tape.matmul(tape.mul(q, 1.0 / float(np.sqrt(dh))), tape.transpose(k, (0, 1, 3, 2)))
    attn = tape.softmax(logits, axis=-1)
    out = tape.matmul(attn, v)  # [b, heads, m, dh]
    out = tape.reshape(tape.transpose(out, (0, 2, 1, 3)), (b, m, di))
    out = tape.linear(out, store[f"{prefix}.o.w"], store[f"{prefix}.o.b"])

    x = tape.add(x_q, out)
    ff_in = tape.layer_norm(x, store[f"{prefix}.ln_ff.gain"], store[f"{prefix}.ln_ff.bias"])
    h1 = tape.gelu(tape.linear(ff_in, store[f"{prefix}.ff1.w"], store[f"{prefix}.ff1.b"]))
    ff = tape.linear(h1, store[f"{prefix}.ff2.w"], store[f"{prefix}.ff2.b"])
    return tape.add(x, ff)


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return tape.reshape(t, (1,) + t.shape), True
    return t, False


def cross_attention(queries_in, context, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Attend from [M, D_q] (or [B, M, D_q]) queries into context tokens."""
    q, squeeze = _batched(tape.as_tensor(queries_in))
    kv, _ = _batched(tape.as_tensor(context))
    out = _attention_core(q, kv, store, prefix, heads)
    return tape.reshape(out, out.shape[1:]) if squeeze else out


def self_attention_block(latents, store: ParamStore, prefix: str, heads: int) -> Tensor:
    x, squeeze = _batched(tape.as_tensor(latents))
    out = _attention_core(x, x, store, prefix, heads)
    return tape.reshape(out, out.shape[1:]) if squeeze else out


def encode(inputs: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Input tokens [B, N, d_in] -> latents [B, L, D]."""
    b = inputs.shape[0]
    lat = tape.broadcast_to(store["latents"], (b,) + store["latents"].shape)
    lat = _attention_core(lat, inputs, store, "enc", cfg.cross_attn_heads)
    for i in range(cfg.self_attn_layers):
        lat = _attention_core(lat, lat, store, f"self{i}", cfg.self_attn_heads)
    return lat


def decode(queries: Tensor, latents: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Queries [B, M, d_q] -> per-query head outputs [B, M, 145].

    Queries are first projected to the latent width, then one
    cross-attention block reads from the latents, and a final linear layer
    emits channel 0 as the raw log-depth plus 144 convex-upsampling mask
    logits (9 neighbors x 16 subpixel positions).
    """
    q, squeeze = _batched(queries)
    latents, _ = _batched(latents)
    q = tape.linear(q, store["dec.proj.w"], store["dec.proj.b"])
    x = _attention_core(q, latents, store, "dec", cfg.cross_attn_heads)
    out = tape.linear(x, store["head.w"], store["head.b"])
    return tape.reshape(out, out.shape[1:]) if squeeze else out


_NEIGHBOR_IDX_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _neighbor_indices(gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    """3x3 neighborhoods with edge replication: index arrays [gh, gw, 9]."""
    key = (gh, gw)
    if key not in _NEIGHBOR_IDX_CACHE:
        ys, xs = np.arange(gh), np.arange(gw)
        iy = np.empty((gh, gw, 9), dtype=np.intp)
        ix = np.empty((gh, gw, 9), dtype=np.intp)
        k = 0
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                iy[:, :, k] = np.clip(ys + dy, 0, gh - 1)[:, None]
                ix[:, :, k] = np.clip(xs + dx, 0, gw - 1)[None, :]
                k += 1
        _NEIGHBOR_IDX_CACHE[key] = (iy, ix)
    return _NEIGHBOR_IDX_CACHE[key]


def convex_upsample(coarse, mask_logits) -> Tensor:
    """x4 upsampling by per-pixel convex combinations of 3x3 neighborhoods.

    coarse: [B, gh, gw] (or [gh, gw]); mask_logits: matching [..., 9, 16].
    Each fine pixel mixes its coarse 3x3 neighborhood (edge-replicated at
    borders) with softmax weights, so outputs stay inside the neighborhood's
    [min, max] range.
    """
    coarse = tape.as_tensor(coarse)
    mask_logits = tape.as_tensor(mask_logits)
    squeeze = coarse.ndim == 2
    if squeeze:
        coarse = tape.reshape(coarse, (1,) + coarse.shape)
        mask_logits = tape.reshape(mask_logits, (1,) + mask_logits.shape)
    b, gh, gw = coarse.shape
    if mask_logits.shape != (b, gh, gw, 9, UPSAMPLE * UPSAMPLE):
        raise ShapeError(f"mask logits shape {mask_logits.shape} inconsistent with coarse {coarse.shape}")
    iy, ix = _neighbor_indices(gh, gw)
    neighbors = tape.getitem(coarse, (slice(None), iy, ix))  # [b, gh, gw, 9]
    weights = tape.softmax(mask_logits, axis=3)
    mixed = tape.tsum(tape.mul(weights, tape.reshape(neighbors, (b, gh, gw, 9, 1))), axis=3)
    fine = tape.reshape(
        tape.transpose(tape.reshape(mixed, (b, gh, gw, UPSAMPLE, UPSAMPLE)), (0, 1, 3, 2, 4)),
        (b, gh * UPSAMPLE, gw * UPSAMPLE),
    )
    return tape.reshape(fine, fine.shape[1:]) if squeeze else fine


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


def scale_images(images_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 RGB -> [-1, 1]."""
    return (images_u8.astype(dtype) / 255.0) * 2.0 - 1.0


def forward_depth(
    images: np.ndarray,
    pairs: list,
    store: ParamStore,
    model_cfg: ModelConfig,
    feat_cfg: ftz.FeaturizerConfig,
    train: bool,
    refs: list[EpipolarRef | None] | None = None,
    conv_feats: Tensor | None = None,
) -> Tensor:
    """Batched forward pass.

    images: [B, 2, H, W, 3] uint8 (or pre-scaled float); pairs: B camera
    pairs, already canonicalized (or raw CameraPair, canonicalized here);
    refs: per-sample reference epipolar planes (angle mode only).
    Returns depth [B, 2, H, W] as a tape tensor, everything positive.
    """
    bsz, two, h, w, _ = images.shape
    if two != 2:
        raise ShapeError("expected image pairs along axis 1")
    gh, gw = h // UPSAMPLE, w // UPSAMPLE
    dtype = store["latents"].dtype
    if refs is None:
        refs = [None] * bsz

    if conv_feats is None:
        flat = images.reshape(bsz * 2, h, w, images.shape[-1])
        if flat.dtype == np.uint8:
            flat = scale_images(flat, dtype)
        conv_feats = conv_preprocess(Tensor(flat.astype(dtype)), store, train)

    inputs, queries = [], []
    for i in range(bsz):
        pair = pairs[i]
        if hasattr(pair, "cam1") and not isinstance(pair, tuple):
            pair = relative_pose(pair)
        f1 = tape.getitem(conv_feats, 2 * i)
        f2 = tape.getitem(conv_feats, 2 * i + 1)
        im, qm = ftz.build_sample_matrices(pair, f1, f2, (gh, gw), feat_cfg, store, refs[i], dtype=dtype)
        inputs.append(im.tokens)
        queries.append(qm.queries)
    in_batch = tape.stack(inputs, axis=0)
    q_batch = tape.stack(queries, axis=0)

    latents = encode(in_batch, store, model_cfg)
    head = decode(q_batch, latents, store, model_cfg)  # [B, 2*gh*gw, 145]

    logdepth = tape.clip(tape.reshape(head[:, :, 0:1], (bsz * 2, gh, gw)), -LOGDEPTH_CLIP, LOGDEPTH_CLIP)
    coarse = tape.exp(logdepth)
    logits = tape.reshape(head[:, :, 1:], (bsz * 2, gh, gw, 9, UPSAMPLE * UPSAMPLE))
    fine = convex_upsample(coarse, logits)
    return tape.reshape(fine, (bsz, 2, h, w))
