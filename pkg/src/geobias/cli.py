"""Command-line entry point.

Subcommands: generate, train, eval, localize, gradcheck. Every command is
deterministic given --seed. Exit codes: 0 success, 1 user/config error,
2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from statistics import mean, median

import numpy as np

from . import gradcheck, runconfig, scenegen, training
from .localization import LocalizerConfig, check_embedding_mode, localize

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are user errors, not internal ones
        self.print_usage(sys.stderr)
        raise UserError(message)


def _load_runconfig(path) -> runconfig.RunConfig:
    if path is None:
        return runconfig.RunConfig()
    try:
        return runconfig.load(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UserError(f"bad config file {path}: {e}") from e


def _require_file(path, what):
    if not os.path.exists(path):
        raise UserError(f"{what} not found: {path}")
    return path


def cmd_generate(args) -> int:
    cfg = _load_runconfig(args.config)
    scene_cfg = cfg.scene
    if args.height or args.width:
        scene_cfg = replace(
            scene_cfg,
            height=args.height or scene_cfg.height,
            width=args.width or scene_cfg.width,
        )
    digest = scenegen.generate_dataset(args.count, args.seed, args.out, scene_cfg)
    print(f"{digest}  {args.out}  ({args.count} samples, {scene_cfg.height}x{scene_cfg.width})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_runconfig(args.config)
    if args.preset:
        cfg = cfg.with_preset(args.preset)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    train_samples = scenegen.load_dataset(_require_file(args.data, "training dataset"))
    val_samples = scenegen.load_dataset(_require_file(args.val, "validation dataset")) if args.val else []
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.gbck")
    curve = os.path.join(args.out, "curve.csv")
    result = training.train(
        train_samples,
        val_samples,
        cfg.model,
        cfg.featurizer,
        cfg.train,
        checkpoint_path=ckpt,
        curve_path=curve,
        log=lambda msg: print(msg, flush=True),
    )
    print(json.dumps(result.final_metrics.to_dict(), sort_keys=True))
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _write_pgm(path, values: np.ndarray) -> None:
    """8-bit grayscale portable graymap, normalized per image."""
    v = values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((v - lo) * scale).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def cmd_eval(args) -> int:
    store, model_cfg, feat_cfg, _ = _load_model(args.ckpt)
    samples = scenegen.load_dataset(_require_file(args.data, "dataset"))
    report = training.evaluate_store(store, model_cfg, feat_cfg, samples)
    if args.dump_dir:
        os.makedirs(args.dump_dir, exist_ok=True)
        for i, s in enumerate(samples):
            d1, d2 = training.predict_pair(store, model_cfg, feat_cfg, s, ref_seed=i)
            _write_pgm(os.path.join(args.dump_dir, f"{i:04d}_depth1.pgm"), d1.values)
            _write_pgm(os.path.join(args.dump_dir, f"{i:04d}_depth2.pgm"), d2.values)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def _load_model(path):
    _require_file(path, "checkpoint")
    try:
        return training.load_model(path)
    except (ValueError, KeyError, TypeError) as e:
        raise UserError(f"bad checkpoint {path}: {e}") from e


def localization_report(results) -> dict:
    recs = [r.record() for r in results]

    def agg(rot_key, trans_key):
        rots = [r[rot_key] for r in recs]
        trans = [r[trans_key] for r in recs]
        return {
            "mean_rot_deg": mean(rots),
            "median_rot_deg": median(rots),
            "mean_trans_cm": mean(trans),
            "median_trans_cm": median(trans),
        }

    return {
        "samples": recs,
        "aggregate": {
            "init": agg("init_rot_deg", "init_trans_cm"),
            "optimized": agg("final_rot_deg", "final_trans_cm"),
        },
    }


def cmd_localize(args) -> int:
    store, model_cfg, feat_cfg, _ = _load_model(args.ckpt)
    try:
        check_embedding_mode(feat_cfg)
    except ValueError as e:
        raise UserError(str(e)) from e
    samples = scenegen.load_dataset(_require_file(args.data, "dataset"))
    if args.count:
        samples = samples[: args.count]
    loc_cfg = LocalizerConfig(restarts=args.restarts, steps=args.steps)
    results = []
    for i, s in enumerate(samples):
        res = localize(store, model_cfg, feat_cfg, s, loc_cfg)
        results.append(res)
        print(
            f"sample {i:3d}  init {res.init_rot_deg:6.2f}deg {res.init_trans_cm:6.1f}cm"
            f"  ->  {res.final_rot_deg:6.2f}deg {res.final_trans_cm:6.1f}cm"
            f"  (restart {res.chosen_restart}, loss {res.final_loss:.4f})",
            flush=True,
        )
    report = localization_report(results)
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_all(corrupt=args.corrupt)
    failed = False
    for r in rows:
        status = "PASS" if r.ok else "FAIL"
        failed |= not r.ok
        print(f"{status}  {r.name:20s} max rel err {r.max_rel_err:.3e}  (tol {r.tol:g})")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_USER
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geobias", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic stereo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=0)
    g.add_argument("--width", type=int, default=0)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a depth model")
    t.add_argument("--data", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--preset", choices=sorted(runconfig.PRESETS), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--dump-dir", default=None)
    e.set_defaults(fn=cmd_eval)

    l = sub.add_parser("localize", help="recover camera poses through a frozen model")
    l.add_argument("--ckpt", required=True)
    l.add_argument("--data", required=True)
    l.add_argument("--restarts", type=int, default=5)
    l.add_argument("--steps", type=int, default=200)
    l.add_argument("--count", type=int, default=0)
    l.add_argument("--out", default=None)
    l.set_defaults(fn=cmd_localize)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    c.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # negative-control hook
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # anything else is an internal invariant violation
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
