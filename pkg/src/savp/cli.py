"""Command-line pipeline: gen-data, train, sample, eval.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
failure, 5 data mismatch.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import Optional

import numpy as np

from . import records
from .config import RunConfig
from .data import DATASET_MAGIC, encode_dataset, gen_stochastic_videos, read_dataset, split
from .metrics import FeatureExtractor, FeatureExtractorSpec, averaged_prediction, dump_frames, evaluate, report_write
from .train import (
    ConfigError,
    TrainConfig,
    Trainer,
    build_models,
    load_checkpoint,
    read_loss_log,
    sample_predictions,
    save_checkpoint,
    substream,
    write_loss_log,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5


class DataMismatch(Exception):
    pass


def _atomic_write(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _splits(cfg: RunConfig, ds):
    return split(ds, cfg.data.fractions, cfg.data.split_seed)


def _check_scene(cfg: RunConfig, ds) -> None:
    if ds.spec != cfg.scene:
        raise DataMismatch("dataset was generated with a different scene/seed than this config")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = gen_stochastic_videos(cfg.scene, cfg.data.n_videos, cfg.data.length)
    _atomic_write(args.out, encode_dataset(ds))
    print(f"wrote {len(ds)} videos of {ds.length} frames to {args.out}; config digest {cfg.digest()[:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = read_dataset(args.data)
    _check_scene(cfg, ds)
    train_set, _, _ = _splits(cfg, ds)
    if len(train_set) == 0:
        raise DataMismatch("training split is empty")
    tcfg = cfg.train
    if ds.length < tcfg.horizon + 1:
        raise DataMismatch(f"videos have {ds.length} frames; horizon {tcfg.horizon} needs {tcfg.horizon + 1}")
    os.makedirs(args.out, exist_ok=True)
    trainer = Trainer(tcfg, train_set.frames, train_set.actions)
    log_path = os.path.join(args.out, "losses.csv")
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_digest=tcfg.digest())
        trainer.restore(ckpt)
        if os.path.exists(log_path):
            trainer.log = [row for row in read_loss_log(log_path) if row[0] < ckpt.iteration]

    def periodic(tr: Trainer):
        every = tcfg.checkpoint_every
        if every and tr.iteration % every == 0 and tr.iteration < tcfg.iterations:
            save_checkpoint(os.path.join(args.out, f"ckpt_{tr.iteration:06d}.svpc"), tr)
            write_loss_log(log_path, tr.log)

    try:
        trainer.run(args.iterations, on_step=periodic)
    finally:
        write_loss_log(log_path, trainer.log)
    save_checkpoint(os.path.join(args.out, "final.svpc"), trainer)
    print(f"trained {tcfg.variant} to iteration {trainer.iteration}; outputs in {args.out}")
    return EXIT_OK


def _models_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    try:
        tcfg = TrainConfig.from_dict(ckpt.config)
    except (TypeError, ValueError) as exc:
        raise records.FormatError(f"checkpoint carries an unusable config: {exc}") from exc
    if tcfg.digest() != ckpt.digest:
        raise records.FormatError("checkpoint config does not match its digest")
    models = build_models(tcfg)
    for name, module in models.named().items():
        prefix = f"{name}."
        module.load_state_dict({k[len(prefix) :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
    return tcfg, models


def _sample_header(n_samples: int, index: int, tcfg: TrainConfig) -> bytes:
    meta = {"kind": "samples", "n_samples": n_samples, "sample": index, "context": tcfg.context, "horizon": tcfg.horizon}
    return json.dumps(meta, sort_keys=True).encode()


def cmd_sample(args) -> int:
    tcfg, models = _models_from_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    _, _, test = split(ds, args.fractions, args.split_seed)
    m = tcfg.model
    if ds.frames.shape[2:] != (m.channels, m.height, m.width):
        raise DataMismatch(f"dataset frames {ds.frames.shape[2:]} do not fit the model {(m.channels, m.height, m.width)}")
    if m.n_a and test.actions is None:
        raise DataMismatch("model is action-conditioned but the dataset has no actions")
    horizon = args.horizon or tcfg.horizon
    if ds.length < horizon + 1:
        raise DataMismatch(f"videos have {ds.length} frames; horizon {horizon} needs {horizon + 1}")
    if len(test) == 0:
        raise DataMismatch("test split is empty")
    rng = substream(tcfg.seed, "sampling")
    acts = None if not m.n_a else test.actions[:, :horizon]
    preds = sample_predictions(models, test.frames, tcfg.context, horizon, args.n_samples, rng, acts)
    if not (np.all(preds >= 0.0) and np.all(preds <= 1.0)):
        raise FloatingPointError("sampled frames left [0, 1]")
    os.makedirs(args.out, exist_ok=True)
    for s in range(args.n_samples):
        rf = records.RecordFile(
            DATASET_MAGIC,
            _sample_header(args.n_samples, s, tcfg),
            {"frames": preds[s].astype(np.float32), "ids": test.ids},
        )
        _atomic_write(os.path.join(args.out, f"sample_{s:03d}.svpd"), records.encode(rf))
        if args.frames:
            for v, vid in enumerate(test.ids):
                dump_frames(os.path.join(args.out, "frames", f"video_{vid:04d}", f"sample_{s:03d}"), preds[s, v])
    print(f"wrote {args.n_samples} x {len(test)} predicted videos to {args.out}")
    return EXIT_OK


def load_samples(directory) -> tuple[np.ndarray, np.ndarray, dict]:
    """Stack ``sample_*.svpd`` files into ``[S, n, T, C, H, W]``; the set must be complete."""
    paths = sorted(glob.glob(os.path.join(directory, "sample_*.svpd")))
    if not paths:
        raise DataMismatch(f"no sample files in {directory}")
    frames, ids, metas = {}, None, []
    for p in paths:
        rf = records.read_file(p, DATASET_MAGIC)
        meta = json.loads(rf.header)
        if meta.get("kind") != "samples":
            raise DataMismatch(f"{p} is not a sample file")
        metas.append(meta)
        frames[meta["sample"]] = rf.records["frames"]
        if ids is None:
            ids = rf.records["ids"]
        elif not np.array_equal(ids, rf.records["ids"]):
            raise DataMismatch(f"{p} covers different videos than the other sample files")
    n = metas[0]["n_samples"]
    if any(m["n_samples"] != n for m in metas) or sorted(frames) != list(range(n)):
        raise DataMismatch(f"expected samples 0..{n - 1}, found {sorted(frames)}")
    shapes = {f.shape for f in frames.values()}
    if len(shapes) != 1:
        raise DataMismatch(f"sample files disagree on shape: {sorted(shapes)}")
    return np.stack([frames[s] for s in range(n)]), ids, metas[0]


def cmd_eval(args) -> int:
    samples, ids, meta = load_samples(args.samples)
    ds = read_dataset(args.data)
    index = {int(v): i for i, v in enumerate(ds.ids)}
    missing = [int(v) for v in ids if int(v) not in index]
    if missing:
        raise DataMismatch(f"sample videos {missing[:5]} are not in the dataset")
    horizon = samples.shape[2]
    if ds.length < horizon + 1:
        raise DataMismatch(f"samples predict {horizon} frames but videos have only {ds.length}")
    truth = ds.frames[[index[int(v)] for v in ids], 1 : horizon + 1]
    if truth.shape != samples.shape[1:]:
        raise DataMismatch(f"samples {samples.shape[1:]} do not align with ground truth {truth.shape}")
    best_of = args.best_of or samples.shape[0]
    if best_of > samples.shape[0]:
        raise DataMismatch(f"--best-of {best_of} but only {samples.shape[0]} samples")
    extractor = FeatureExtractor(FeatureExtractorSpec(seed=args.feature_seed, channels=truth.shape[2]))
    report = evaluate(truth, samples, extractor=extractor, best_of=best_of)
    report_write(report, args.out)
    for v, vid in enumerate(ids):
        dump_frames(os.path.join(args.out, "averaged", f"video_{int(vid):04d}"), averaged_prediction(samples[:best_of, v]))
    print(f"evaluated {len(ids)} videos, best of {best_of}; reports in {args.out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="savp", description="Stochastic video prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, help="stop after this many iterations (default: run to the end)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw prior-code predictions for the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n-samples", type=int, default=20)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--frames", action="store_true", help="also dump PGM frames")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score samples against ground truth")
    e.add_argument("--samples", required=True, help="directory written by 'sample'")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--best-of", type=int)
    e.add_argument("--feature-seed", type=int, default=1234)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataMismatch as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, records.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
