"""Command-line entry point.

Commands wire configuration files to the pipelines; every run is a batch
job whose outputs are files. All commands honor --seed and drop a resolved
config snapshot (with the code version) next to their outputs.

Exit codes: 0 success, 1 runtime failure (divergence, failed checks),
2 validation error (bad arguments, malformed files, inconsistent configs).

VCO_THREADS bounds worker parallelism for sampling; the default of 1 keeps
runs bitwise deterministic on any machine, and sharded RNG keeps them
deterministic at any thread count anyway.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, config as C
from . import data as D
from . import evaluate as E
from . import sampler as SM
from . import schedule, serialization, structconf, teacher as TE
from . import trainer as TR
from . import verify as V
from .rng import Rng


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VCO_THREADS", "1")))
    except ValueError:
        return 1


def _write_snapshot(target: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["version"] = __version__
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _snapshot_for(out_path: Path) -> Path:
    if out_path.suffix:
        return out_path.with_suffix(out_path.suffix + ".config.json")
    return out_path / "resolved_config.json"


# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = D.DatasetSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = structconf.from_dict(D.DatasetSpec, json.load(fh))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dataset = D.generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save(dataset, out)
    _write_snapshot(_snapshot_for(out), {"data": structconf.to_dict(spec)})
    print(f"wrote {len(dataset)} samples "
          f"({spec.n_classes} classes x {spec.samples_per_class}, "
          f"{spec.channels}x{spec.height}x{spec.width}, {spec.generator}) "
          f"to {out}")
    return 0


def cmd_stats(args) -> int:
    dataset = D.load(args.data)
    encoder = TE.TeacherEncoder(patch_size=args.patch_size,
                                in_channels=dataset.spec.channels,
                                feature_dim=args.feature_dim,
                                seed=args.teacher_seed)
    stats = TE.fit_stats(encoder, dataset.images)
    if float(stats.std.min()) <= TE.STD_FLOOR:
        print("warning: degenerate feature dimensions hit the std floor",
              file=sys.stderr)
    calib = TE.fit_calibration(encoder, dataset.images, stats)
    scaled = TE.prepare_semantics(encoder, stats, calib, dataset.images)
    rms_scaled = schedule.rms(scaled)
    rms_pixels = schedule.rms(dataset.images)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    serialization.write_records(out, {
        "stats/mean": stats.mean, "stats/std": stats.std,
        "calib/rms_pixels": np.array([calib.rms_pixels], np.float32),
        "calib/rms_features": np.array([calib.rms_features], np.float32),
        "teacher/seed": np.array([encoder.seed], np.int64),
        "teacher/patch_size": np.array([encoder.patch_size], np.int64),
        "teacher/feature_dim": np.array([encoder.feature_dim], np.int64),
        "teacher/in_channels": np.array([encoder.in_channels], np.int64),
    })
    _write_snapshot(_snapshot_for(out), {
        "data": structconf.to_dict(dataset.spec),
        "teacher": {"patch_size": encoder.patch_size,
                    "in_channels": encoder.in_channels,
                    "feature_dim": encoder.feature_dim,
                    "seed": encoder.seed}})
    print(f"alpha = {calib.alpha:.6f} "
          f"(pixel rms {calib.rms_pixels:.6f}, feature rms {calib.rms_features:.6f})")
    print(f"rms(alpha*d) = {rms_scaled:.6f} vs rms(x) = {rms_pixels:.6f} "
          f"(rel diff {abs(rms_scaled - rms_pixels) / rms_pixels:.2e})")
    print(f"wrote stats sidecar to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = C.override(cfg, **overrides)
    if args.epochs is not None:
        cfg = C.override(cfg, train=replace(cfg.train, epochs=args.epochs))
    C.validate(cfg)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.data:
        dataset = D.load(args.data)
    else:
        dataset = D.generate(cfg.data)
        D.save(dataset, out_dir / "dataset.vcd")
    encoder = TE.TeacherEncoder(patch_size=cfg.teacher.patch_size,
                                in_channels=cfg.teacher.in_channels,
                                feature_dim=cfg.teacher.feature_dim,
                                seed=cfg.teacher.seed)

    if args.resume:
        trainer = TR.Trainer.load(args.resume, dataset)
    else:
        trainer = TR.Trainer(cfg.model, cfg.train, dataset, encoder, cfg.seed)

    _write_snapshot(out_dir / "resolved_config.json", C.to_dict(cfg))
    metrics_path = out_dir / "metrics.jsonl"
    if not args.resume and metrics_path.exists():
        metrics_path.unlink()

    total = trainer.total_steps
    print(f"training {cfg.model.variant} for {total} steps "
          f"({trainer.steps_per_epoch} steps/epoch x {cfg.train.epochs} epochs), "
          f"losses {list(cfg.train.losses)}")
    records = trainer.run(metrics_path=metrics_path)
    ckpt = out_dir / "ckpt_final.vco"
    trainer.save(ckpt)
    if records:
        last = records[-1]
        print(f"final step {last['step']}: loss {last['loss_total']:.4f} "
              f"(vx {last['loss_vx']:.4f}, vd {last['loss_vd']:.4f}, "
              f"aux {last['loss_aux']:.4f})")
    print(f"wrote checkpoint to {ckpt} and metrics to {metrics_path}")
    return 0


def _class_ids_for(n: int, which: str, n_classes: int) -> np.ndarray:
    if which == "all":
        return np.arange(n, dtype=np.int64) % n_classes
    cls = int(which)
    if not 0 <= cls < n_classes:
        raise ValueError(f"class {cls} out of range [0, {n_classes})")
    return np.full(n, cls, dtype=np.int64)


def _sampler_config(bundle: TR.CheckpointBundle, cfg_scale: float,
                    steps: int | None, uncond: str | None) -> SM.SamplerConfig:
    alpha = None
    if bundle.train_cfg.calibration == "time_shift" and bundle.calibration:
        alpha = bundle.calibration.alpha
    return SM.SamplerConfig(
        steps=steps or 50, cfg_scale=cfg_scale,
        uncond_type=uncond or bundle.train_cfg.uncond_type,
        clip=bundle.train_cfg.clip, time_shift_alpha=alpha)


def cmd_sample(args) -> int:
    bundle = TR.load_checkpoint_bundle(args.ckpt)
    params = bundle.select_params(args.weights)
    class_ids = _class_ids_for(args.n, args.klass, bundle.model_cfg.n_classes)
    scfg = _sampler_config(bundle, args.cfg, args.steps, args.uncond)
    images, feats = SM.sample_many(bundle.model_cfg, params, scfg, class_ids,
                                   seed=args.seed, threads=_threads())

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "samples.f32").write_bytes(images.astype("<f4").tobytes())
    manifest = {
        "images": {"file": "samples.f32", "dtype": "float32-le",
                   "shape": list(images.shape)},
        "class_ids": class_ids.tolist(),
        "cfg_scale": args.cfg, "steps": scfg.steps, "seed": args.seed,
        "uncond_type": scfg.uncond_type, "weights": args.weights,
        "checkpoint": str(args.ckpt),
    }
    if feats is not None:
        (out_dir / "semantics.f32").write_bytes(feats.astype("<f4").tobytes())
        manifest["semantics"] = {"file": "semantics.f32", "dtype": "float32-le",
                                 "shape": list(feats.shape)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_snapshot(out_dir / "resolved_config.json",
                    {"sample": manifest, "train": bundle.config})
    print(f"wrote {images.shape[0]} samples to {out_dir}")
    return 0


def evaluate_checkpoint(bundle: TR.CheckpointBundle, dataset: D.Dataset,
                        cfg_sweep, n_samples: int, seed: int,
                        weights: str = "final", steps: int | None = None,
                        threads: int = 1, sample_batch: int = 64) -> dict:
    """toy feature-space distance and class-mean error per guidance scale."""
    params = bundle.select_params(weights)
    holdout = bundle.train_cfg.holdout
    real = dataset.images[-holdout:] if holdout else dataset.images
    real_labels = dataset.labels[-holdout:] if holdout else dataset.labels
    n = (n_samples // bundle.model_cfg.n_classes) * bundle.model_cfg.n_classes
    class_ids = np.arange(n, dtype=np.int64) % bundle.model_cfg.n_classes

    results = {}
    for s in cfg_sweep:
        scfg = _sampler_config(bundle, float(s), steps, None)
        images, _ = SM.sample_many(bundle.model_cfg, params, scfg, class_ids,
                                   seed=seed, threads=threads,
                                   shard_size=sample_batch)
        results[f"{float(s):g}"] = E.evaluate_samples(
            images, class_ids, real, real_labels, bundle.encoder, bundle.stats)
    return results


def cmd_eval(args) -> int:
    bundle = TR.load_checkpoint_bundle(args.ckpt)
    if bundle.stats is None:
        raise ValueError("checkpoint carries no teacher statistics")
    dataset = D.load(args.data)
    sweep = [float(x) for x in args.cfg_sweep.split(",") if x.strip()]
    if not sweep:
        raise ValueError("empty --cfg-sweep")
    results = evaluate_checkpoint(bundle, dataset, sweep, args.n, args.seed,
                                  weights=args.weights, steps=args.steps,
                                  threads=_threads())
    for key, metrics in results.items():
        print(f"cfg {key}: toy_fd {metrics['toy_fd']:.4f}, "
              f"class_mean_err {metrics['class_mean_err']:.4f}")
    best = min(results, key=lambda k: results[k]["toy_fd"])
    print(f"best cfg {best} (toy_fd {results[best]['toy_fd']:.4f})")
    payload = {"results": results, "best_cfg": best, "n_samples": args.n,
               "seed": args.seed, "weights": args.weights,
               "checkpoint": str(args.ckpt), "data": str(args.data)}
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n")
        _write_snapshot(_snapshot_for(out), payload)
        print(f"wrote metrics to {out}")
    return 0


def cmd_verify(args) -> int:
    results = V.run_all(grad_seeds=args.seeds)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
        failed += not r.passed
    if failed:
        print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_shift(args) -> int:
    print(f"{schedule.time_shift(args.alpha, args.t):.6f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vco",
        description="two-stream flow-matching diffusion on synthetic data")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--spec", help="JSON file with dataset spec keys")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    st = sub.add_parser("stats", help="fit teacher feature stats and RMS calibration")
    st.add_argument("--data", required=True)
    st.add_argument("--teacher-seed", type=int, default=1234)
    st.add_argument("--patch-size", type=int, default=4)
    st.add_argument("--feature-dim", type=int, default=8)
    st.add_argument("--out", required=True)
    st.set_defaults(fn=cmd_stats)

    tr = sub.add_parser("train", help="train a model from a run config")
    tr.add_argument("--config", help="run config JSON (defaults when omitted)")
    tr.add_argument("--data", help="dataset file (generated from config otherwise)")
    tr.add_argument("--out", help="output directory (overrides config)")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.set_defaults(fn=cmd_train)

    sa = sub.add_parser("sample", help="generate samples from a checkpoint")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--class", dest="klass", default="all",
                    help="class id or 'all' (balanced)")
    sa.add_argument("--cfg", type=float, default=1.0, help="guidance scale")
    sa.add_argument("--n", type=int, default=64)
    sa.add_argument("--steps", type=int)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", default="samples")
    sa.add_argument("--weights", default="final", help="'final' or 'ema:<decay>'")
    sa.add_argument("--uncond", help="override the unconditional branch type")
    sa.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="guidance-scale sweep of sample quality")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--cfg-sweep", default="1.0,1.5,2.0,3.0")
    ev.add_argument("--n", type=int, default=256)
    ev.add_argument("--steps", type=int)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--weights", default="final")
    ev.add_argument("--out", help="metrics JSON output path")
    ev.set_defaults(fn=cmd_eval)

    vf = sub.add_parser("verify", help="run the full invariant suite")
    vf.add_argument("--seeds", type=int, default=100,
                    help="seeds per gradient check")
    vf.set_defaults(fn=cmd_verify)

    sh = sub.add_parser("shift", help="print the SNR-equivalent shifted time")
    sh.add_argument("--alpha", type=float, required=True)
    sh.add_argument("--t", type=float, required=True)
    sh.set_defaults(fn=cmd_shift)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
