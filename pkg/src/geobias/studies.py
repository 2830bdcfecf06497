"""Experiment drivers shared by the scripts and the acceptance suite.

Trained checkpoints are cached on disk keyed by (tag, seed); reruns with
identical configs reuse them, which keeps the three-seed studies cheap to
iterate on. Training is deterministic, so a cache hit is equivalent to a
fresh run.
"""

from __future__ import annotations

import os
from dataclasses import replace
from statistics import median

from . import runconfig, training
from .featurizer import FeaturizerConfig
from .model import ModelConfig
from .params import ParamStore
from .scenegen import SamplePair
from .training import TrainConfig, TrainResult


def train_cached(
    cache_dir: str,
    tag: str,
    train_samples: list[SamplePair],
    val_samples: list[SamplePair],
    model_cfg: ModelConfig,
    feat_cfg: FeaturizerConfig,
    train_cfg: TrainConfig,
    log=None,
) -> tuple[ParamStore, float]:
    """Train (or reuse) one run; returns (weights, final val abs_rel)."""
    os.makedirs(cache_dir, exist_ok=True)
    ckpt = os.path.join(cache_dir, f"{tag}_seed{train_cfg.seed}.gbck")
    if os.path.exists(ckpt):
        store, m_cfg, f_cfg, _ = training.load_model(ckpt)
        if (m_cfg, f_cfg) == (model_cfg, feat_cfg):
            metrics = training.evaluate_store(store, model_cfg, feat_cfg, val_samples)
            if log:
                log(f"[{tag} seed={train_cfg.seed}] cached: abs_rel {metrics.abs_rel:.4f}")
            return store, metrics.abs_rel
    result: TrainResult = training.train(
        train_samples, val_samples, model_cfg, feat_cfg, train_cfg, checkpoint_path=ckpt
    )
    if log:
        log(f"[{tag} seed={train_cfg.seed}] trained: abs_rel {result.final_metrics.abs_rel:.4f}")
    return result.store, result.final_metrics.abs_rel


def ablation_study(
    train_samples,
    val_samples,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2),
    presets=("none", "camera", "epipolar", "both"),
    cache_dir: str = "ablation_cache",
    log=None,
) -> dict[str, list[float]]:
    """Final validation abs_rel per preset and seed (three-seed protocol)."""
    out: dict[str, list[float]] = {}
    for preset in presets:
        feat_cfg = runconfig.PRESETS[preset]
        out[preset] = []
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            _, abs_rel = train_cached(
                cache_dir, preset, train_samples, val_samples, model_cfg, feat_cfg, cfg, log
            )
            out[preset].append(abs_rel)
    return out


def median_abs_rel(values: list[float]) -> float:
    return median(values)


def query_study(
    train_samples,
    val_samples,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2),
    cache_dir: str = "query_cache",
    log=None,
) -> dict[str, dict[str, list[float]]]:
    """Geometry-only vs RGB-included queries on the best embedding setup.

    Returns per-variant lists of final train losses and final val abs_rel
    (one entry per seed).
    """
    base = runconfig.PRESETS["both"]
    variants = {
        "geometry_only": base,
        "rgb_queries": replace(base, query_rgb=True),
    }
    out: dict[str, dict[str, list[float]]] = {}
    for name, feat_cfg in variants.items():
        out[name] = {"train_loss": [], "val_abs_rel": []}
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            ckpt = os.path.join(cache_dir, f"{name}_seed{seed}.gbck")
            curve_path = os.path.join(cache_dir, f"{name}_seed{seed}_curve.csv")
            os.makedirs(cache_dir, exist_ok=True)
            if os.path.exists(ckpt) and os.path.exists(curve_path):
                with open(curve_path) as f:
                    last = f.read().strip().splitlines()[-1].split(",")
                train_loss, abs_rel = float(last[1]), float(last[2])
                if log:
                    log(f"[{name} seed={seed}] cached: train {train_loss:.4f} val {abs_rel:.4f}")
            else:
                result = training.train(
                    train_samples, val_samples, model_cfg, feat_cfg, cfg,
                    checkpoint_path=ckpt, curve_path=curve_path,
                )
                train_loss = result.curve[-1][1]
                abs_rel = result.final_metrics.abs_rel
                if log:
                    log(f"[{name} seed={seed}] trained: train {train_loss:.4f} val {abs_rel:.4f}")
            out[name]["train_loss"].append(train_loss)
            out[name]["val_abs_rel"].append(abs_rel)
    return out
