"""Command-line pipeline: synth -> split -> train_clip -> extract -> train_seq -> eval.

Every stage reads its inputs from disk and writes its outputs to disk. Exit
codes: 0 on success, 1 on runtime failure, 2 on bad arguments.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import backbone_extractor, extract_features, feature_file_name, load_features, save_features
from .dataset import SCHEMES, clip_labels_for_video, load_manifest, load_split, make_split, save_split
from .metrics import REPORT_FORMATS, build_report, emit_report
from .seqmodel import SequenceModelConfig, TGMLayerConfig
from .synthgen import DEFAULT_NOISE_SCALE, default_profile, generate_dataset, load_profile
from .trainer import (TrainConfig, TrainHistory, build_model, clip_fit, collect_predictions, load_checkpoint,
                      save_checkpoint, sequence_fit)

logger = logging.getLogger("orflow")

REPORT_SUFFIX = {"json": "json", "csv": "csv", "markdown_table": "md"}


class CommandError(Exception):
    """Runtime failure surfaced with exit code 1."""


def _seed_default() -> int:
    try:
        return int(os.environ.get("ORFLOW_SEED", "0"))
    except ValueError:
        return 0


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


def _echo_config(command: str, args: argparse.Namespace):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    print(f"effective-config {command}: {json.dumps(cfg, sort_keys=True, default=str)}")


def _data_paths(args):
    data = Path(args.data)
    manifest = _require(data / "manifest.json", "manifest")
    split_path = Path(args.split) if args.split else data / "split.json"
    return data, load_manifest(manifest), load_split(_require(split_path, "split file"))


def _features_dir(args, data: Path) -> Path:
    return Path(args.features) if args.features else data / "features"


def _load_video_set(manifest, ids, features_dir: Path):
    videos = {v.video_id: v for v in manifest.videos}
    out = []
    for vid in ids:
        seq = load_features(_require(features_dir / feature_file_name(vid), "feature file"))
        labels = np.asarray(clip_labels_for_video(videos[vid], seq.clip_len))
        if len(labels) != seq.T:
            raise CommandError(f"{vid}: {seq.T} feature rows but {len(labels)} clip labels")
        out.append((seq.features, labels))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    profile = load_profile(_require(args.profile, "profile")) if args.profile else default_profile(
        feature_dim=args.feature_dim, noise_scale=args.noise_scale, overlap=args.overlap)
    ds = generate_dataset(profile, args.cases, views=args.views, seed=args.seed, out_dir=args.out,
                          pixel=args.pixel, frame_size=args.frame_size, jobs=args.jobs)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    m = ds.manifest
    print(f"cases={len(m.cases)} videos={len(m.videos)} classes={m.num_classes} manifest_sha256={digest}")


def cmd_split(args):
    manifest = load_manifest(_require(Path(args.data) / "manifest.json", "manifest"))
    params = {}
    if args.scheme == "random":
        params["train_fraction"] = args.train_frac
    else:
        if args.train_groups:
            params["train_groups"] = args.train_groups
        if args.test_groups:
            params["test_groups"] = args.test_groups
        if not args.train_groups and not args.test_groups:
            params["test_fraction"] = args.test_frac
        if args.max_deviation is not None:
            params["max_deviation"] = args.max_deviation
    try:
        split = make_split(manifest, args.scheme, params, args.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.data) / "split.json"
    save_split(split, out)
    print(f"scheme={split.scheme} train={len(split.train_video_ids)} test={len(split.test_video_ids)} -> {out}")


def cmd_train_clip(args):
    data, manifest, split = _data_paths(args)
    frames_dir = data / "frames"
    frames = {vid: np.load(_require(frames_dir / f"{vid}.npy", "frame file")) for vid in split.train_video_ids}
    sample = next(iter(frames.values()))
    backbone = build_model("backbone", {"num_classes": manifest.num_classes, "feature_dim": args.feature_dim,
                                        "in_channels": sample.shape[-1], "input_size": sample.shape[1]},
                           seed=args.seed, dtype=torch.float32)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer, seed=args.seed,
                      batch_size=args.batch_size)
    backbone, history = clip_fit(manifest, split, frames, backbone, cfg, clip_len=args.clip_len)
    save_checkpoint(backbone, args.out, state={"train_config": cfg.to_dict()})
    if args.history:
        history.write_jsonl(args.history)
    print(f"final loss={history.records[-1]['loss']:.5f} accuracy={history.records[-1]['train_accuracy']:.4f}"
          f" -> {args.out}")


def cmd_extract(args):
    data = Path(args.data)
    manifest = load_manifest(_require(data / "manifest.json", "manifest"))
    frames_dir = _require(data / "frames", "frames directory")
    if args.backbone:
        backbone = load_checkpoint(_require(args.backbone, "backbone checkpoint"), expected_kind="backbone").model
    else:
        first = np.load(_require(frames_dir / f"{manifest.videos[0].video_id}.npy", "frame file"), mmap_mode="r")
        backbone = build_model("backbone", {"num_classes": manifest.num_classes, "feature_dim": args.feature_dim,
                                            "in_channels": first.shape[-1], "input_size": first.shape[1]},
                               seed=args.seed, dtype=torch.float32)
    extractor = backbone_extractor(backbone)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(video):
        frames = np.load(_require(frames_dir / f"{video.video_id}.npy", "frame file"))
        seq = extract_features(frames, extractor, args.clip_len, video.video_id)
        save_features(seq, out / feature_file_name(video.video_id))
        return seq.T

    # thread results come back in manifest order
    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        counts = list(pool.map(one, manifest.videos))
    print(f"extracted {len(counts)} videos, {sum(counts)} clips, D={backbone.feature_dim} -> {out}")


def _seq_config(args, K, D):
    return SequenceModelConfig(
        num_classes=K, feature_dim=D, proj_dim=args.proj_dim,
        tgm=[TGMLayerConfig(L=args.tgm_length, M=args.tgm_gaussians) for _ in range(args.tgm_layers)],
        lstm_hidden=args.lstm_hidden, bidirectional=not args.unidirectional,
        head_kernel=args.head_kernel, lstm_input=args.lstm_input,
    )


def cmd_train_seq(args):
    data, manifest, split = _data_paths(args)
    train = _load_video_set(manifest, split.train_video_ids, _features_dir(args, data))
    D = train[0][0].shape[1]
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer, seed=args.seed,
                      grad_clip_norm=args.grad_clip, loss_weights=(args.w_pre, args.w_post))
    start_epoch, opt_state, history = 0, None, None
    if args.resume:
        ckpt = load_checkpoint(_require(args.resume, "resume checkpoint"), num_classes=manifest.num_classes,
                               expected_kind=args.model)
        model, opt_state = ckpt.model, ckpt.optimizer_state
        start_epoch = int(ckpt.state.get("epoch", 0))
        history = TrainHistory(list(ckpt.state.get("history", [])))
    elif args.model == "sequence":
        model = build_model("sequence", _seq_config(args, manifest.num_classes, D), seed=args.seed)
    else:
        model = build_model("baseline", {"num_classes": manifest.num_classes, "feature_dim": D}, seed=args.seed)
    model, history, optimizer = sequence_fit(train, model, cfg, optimizer_state=opt_state,
                                             start_epoch=start_epoch, history=history)
    save_checkpoint(model, args.out, optimizer=optimizer,
                    state={"epoch": cfg.epochs, "history": history.records, "train_config": cfg.to_dict()})
    if args.history:
        history.write_jsonl(args.history)
    last = history.records[-1] if history.records else {}
    print(f"model={args.model} epochs={cfg.epochs} final loss={last.get('loss', float('nan')):.5f} -> {args.out}")


def cmd_eval(args):
    data, manifest, split = _data_paths(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"), num_classes=manifest.num_classes)
    if ckpt.kind != args.model:
        raise CommandError(f"checkpoint holds a {ckpt.kind} model but --model {args.model} was requested")
    test = _load_video_set(manifest, split.test_video_ids, _features_dir(args, data))
    scores, labels = collect_predictions(ckpt.model, test)
    report = build_report(manifest.class_names, scores.argmax(1), labels, scores,
                          split={"scheme": split.scheme, "seed": split.seed, "test_videos": len(test)},
                          model=args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in REPORT_FORMATS:
        emit_report(report, out / f"report_{args.model}.{REPORT_SUFFIX[fmt]}", fmt)
    print(f"model={args.model} mAP={report.mAP:.4f} accuracy={report.counts['accuracy']:.4f} -> {out}")


# --------------------------------------------------------------------------
# parser


def _add_data(p, split=True, features=True):
    p.add_argument("--data", default="data", help="dataset directory (holds manifest.json)")
    if split:
        p.add_argument("--split", help="split JSON (default: <data>/split.json)")
    if features:
        p.add_argument("--features", help="feature directory (default: <data>/features)")


def _add_train(p, epochs, lr):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"], default="adam")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"orflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags override it")
    common.add_argument("--seed", type=int, default=_seed_default(), help="default: $ORFLOW_SEED or 0")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", help="WorkflowProfile JSON (default: built-in profile)")
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-scale", type=float, default=DEFAULT_NOISE_SCALE)
    p.add_argument("--overlap", type=float, default=0.9)
    p.add_argument("--pixel", action="store_true", help="also render toy frames for the clip backbone")
    p.add_argument("--frame-size", type=int, default=16)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="make a train/test split")
    _add_data(p, split=False, features=False)
    p.add_argument("--scheme", choices=SCHEMES, required=True)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--train-groups", nargs="+")
    p.add_argument("--test-groups", nargs="+")
    p.add_argument("--max-deviation", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train_clip", aliases=["train-clip"], parents=[common], help="fine-tune the toy backbone")
    _add_data(p, features=False)
    _add_train(p, epochs=10, lr=1e-3)
    p.add_argument("--clip-len", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train_clip)

    p = sub.add_parser("extract", parents=[common], help="extract clip features from frames")
    _add_data(p, split=False, features=False)
    p.add_argument("--backbone", help="backbone checkpoint (default: seeded random init)")
    p.add_argument("--clip-len", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train_seq", aliases=["train-seq"], parents=[common], help="train a full-video model")
    _add_data(p)
    _add_train(p, epochs=30, lr=1e-3)
    p.add_argument("--model", choices=["sequence", "baseline"], default="sequence")
    p.add_argument("--proj-dim", type=int, default=64)
    p.add_argument("--tgm-layers", type=int, default=3)
    p.add_argument("--tgm-length", type=int, default=9)
    p.add_argument("--tgm-gaussians", type=int, default=16)
    p.add_argument("--lstm-hidden", type=int, default=32)
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--head-kernel", type=int, default=1)
    p.add_argument("--lstm-input", choices=["pre_logits", "concat_features"], default="pre_logits")
    p.add_argument("--w-pre", type=float, default=1.0)
    p.add_argument("--w-post", type=float, default=1.0)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write TrainHistory as JSON lines")
    p.set_defaults(func=cmd_train_seq)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model on the test split")
    _add_data(p)
    p.add_argument("--model", choices=["sequence", "baseline"], default="sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default="reports")
    p.set_defaults(func=cmd_eval)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            parser.error(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            parser.error(f"bad config file {path}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command.replace("-", "_")
    _echo_config(command, args)
    try:
        args.func(args)
    except (CommandError, ValueError, OSError, RuntimeError) as exc:
        print(f"orflow {command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
