"""Command line interface: generate, pretrain, train, eval.

Exit codes: 0 success, 2 usage or configuration errors, 3 unreadable or
invalid data (datasets, checkpoints), 4 numeric failures during training.
The default dataset location comes from --data-dir or the SCI3D_DATA_DIR
environment variable; every command writes its resolved configuration next
to its outputs so a run can be reproduced without the original flag line.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .backbone import EncoderConfig, InflationSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    MOTIONS,
    DataError,
    SceneSpec,
    generate_scene,
    read_dataset,
    write_dataset,
)
from .metrics import evaluate, write_report
from .models import ModelConfig, VideoClassifier, build_model
from .seeding import derive_seed
from .setpred import PretrainConfig, pretrain_encoder
from .train import NumericError, TrainConfig, load_into_model, train

DATA_ENV = "SCI3D_DATA_DIR"

# paper-style defaults: the atomic task trains hotter than the composite one
_DEFAULT_LR = {"atomic": 0.015, "composite": 0.0025}
_TASK_HEADS = {"atomic": "fc", "composite": "lstm"}

DSPN_VARIANTS = ("sci3d_single", "sci3d_nr", "sci3d")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of ints, got {text!r}")


def _add_data_dir(parser):
    parser.add_argument(
        "--data-dir",
        "--data",
        dest="data_dir",
        default=None,
        help=f"dataset directory (default: ${DATA_ENV})",
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sci3d",
        description="set-conditioned relational video models on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_data_dir(p)
    p.add_argument("--num-train", type=int, default=400)
    p.add_argument("--num-val", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dir")
    p.add_argument("--video-len", type=int, default=96)
    p.add_argument("--atomic-len", type=int, default=16)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--objects-min", type=int, default=2)
    p.add_argument("--objects-max", type=int, default=4)
    p.add_argument("--events-min", type=int, default=2)
    p.add_argument("--events-max", type=int, default=4)
    p.add_argument(
        "--motions", default="slide,pick_place,rotate", help="comma list from "
        + ",".join(MOTIONS)
    )
    p.add_argument(
        "--motion-classes-only",
        action="store_true",
        help="collapse atomic classes to motions, ignoring shape",
    )

    p = sub.add_parser("pretrain", help="set-prediction pretraining of a 2D encoder")
    _add_data_dir(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames-per-video", type=int, default=2)
    p.add_argument("--frozen", action="store_true", help="probe only, no updates")
    p.add_argument("--encoder-widths", type=_int_list, default=(16, 32))
    p.add_argument("--encoder-blocks", type=_int_list, default=(2, 2))
    p.add_argument("--stem-width", type=int, default=8)

    p = sub.add_parser("train", help="train a video model")
    _add_data_dir(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", required=True, choices=("atomic", "composite"))
    p.add_argument(
        "--variant",
        default="sci3d",
        choices=("r3d_nl", "sci3d_single", "sci3d_nr", "sci3d"),
    )
    p.add_argument(
        "--head",
        default=None,
        choices=("fc", "lstm"),
        help="defaults to the head the task requires",
    )
    p.add_argument("--pretrained", default=None, help="2d-pretrain checkpoint")
    p.add_argument(
        "--allow-random-init",
        action="store_true",
        help="let set-conditioned variants start from random weights",
    )
    p.add_argument("--resume", default=None, help="3d-finetune checkpoint to continue")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=None, help="base lr, default per task")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--drop-epochs", type=_int_list, default=(90, 100))
    p.add_argument("--drop-factor", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument(
        "--clip-grad-norm",
        type=float,
        default=0.0,
        help="cap the global gradient norm; 0 disables",
    )
    p.add_argument("--clip-len", type=int, default=16)
    p.add_argument(
        "--segment-stride",
        type=int,
        default=0,
        help="frame step between segment starts; 0 means clip-len",
    )
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lstm-hidden", type=int, default=64)
    p.add_argument("--lstm-layers", type=int, default=2)
    p.add_argument(
        "--relational",
        default="embedded_gaussian",
        choices=("dot_product", "gaussian", "embedded_gaussian"),
    )
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--encoder-widths", type=_int_list, default=(16, 32))
    p.add_argument("--encoder-blocks", type=_int_list, default=(2, 2))
    p.add_argument("--stem-width", type=int, default=8)
    p.add_argument("--temporal-extent", type=int, default=3)
    p.add_argument("--inflate-every", type=int, default=2)
    p.add_argument(
        "--temporal-pad",
        default="replicate",
        choices=("zeros", "replicate", "circular"),
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_dir(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--shuffle-segments", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="write the per-class report file")

    return parser


def _data_dir(args):
    path = args.data_dir or os.environ.get(DATA_ENV)
    if not path:
        raise UsageError(
            f"no dataset given: pass --data-dir or set {DATA_ENV}"
        )
    return path


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}")


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1))


def _cmd_generate(args):
    spec = SceneSpec(
        canvas=(args.canvas, args.canvas),
        video_len=args.video_len,
        atomic_len=args.atomic_len,
        num_objects_min=args.objects_min,
        num_objects_max=args.objects_max,
        events_min=args.events_min,
        events_max=args.events_max,
        motions=tuple(args.motions.split(",")),
        motion_classes_only=args.motion_classes_only,
    )
    spec.validate()
    if args.num_train < 1 or args.num_val < 0:
        raise UsageError("need num-train >= 1 and num-val >= 0")
    out = Path(_data_dir(args))
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    total = args.num_train + args.num_val
    videos = []
    splits = []
    for i in range(total):
        videos.append(generate_scene(derive_seed(args.seed, "video", i), spec))
        splits.append("train" if i < args.num_train else "val")
        if (i + 1) % 100 == 0 or i + 1 == total:
            print(f"generated {i + 1}/{total} videos", flush=True)
    write_dataset(videos, out, splits)
    _write_json(
        out / "generate_config.json",
        {
            "seed": args.seed,
            "num_train": args.num_train,
            "num_val": args.num_val,
            "scene_spec": spec.to_dict(),
        },
    )
    space = spec.label_space
    atomic_pos = sum(v.atomic for v in videos)
    composite_pos = sum(v.composite for v in videos)
    print(f"wrote {total} videos to {out}")
    print(f"atomic classes ({space.num_atomic}), positives per class:")
    for c in range(space.num_atomic):
        print(f"  {space.atomic_name(c)}: {int(atomic_pos[c])}")
    realized = int((composite_pos > 0).sum())
    print(
        f"composite classes: {realized} of {space.num_composite} realized, "
        f"{int(composite_pos.sum())} positives total"
    )
    return 0


def _cmd_pretrain(args):
    dataset = read_dataset(_data_dir(args))
    config = PretrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        frames_per_video=args.frames_per_video,
        frozen=args.frozen,
        encoder=EncoderConfig(
            stage_widths=args.encoder_widths,
            blocks_per_stage=args.encoder_blocks,
            stage_strides=tuple(2 for _ in args.encoder_widths),
            stem_width=args.stem_width,
        ),
    )
    _, history, ckpt = pretrain_encoder(dataset, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    _write_json(out.with_suffix(out.suffix + ".config.json"), config.to_dict())
    _write_json(out.with_suffix(out.suffix + ".history.json"), {"set_loss": history})
    if history:
        print(f"pretrain loss: first {history[0]:.4f}, last {history[-1]:.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_train(args):
    dataset = read_dataset(_data_dir(args))
    required_head = _TASK_HEADS[args.task]
    if args.head is not None and args.head != required_head:
        raise UsageError(
            f"task {args.task!r} trains with the {required_head!r} head, "
            f"got --head {args.head}"
        )
    if args.variant in DSPN_VARIANTS and not args.pretrained and not args.allow_random_init:
        raise UsageError(
            f"variant {args.variant!r} expects --pretrained; pass "
            "--allow-random-init to start its set stream from scratch"
        )
    space = dataset.label_space
    num_classes = space.num_atomic if args.task == "atomic" else space.num_composite
    model_config = ModelConfig(
        variant=args.variant,
        head=required_head,
        num_classes=num_classes,
        clip_len=args.clip_len,
        segment_stride=args.segment_stride,
        dropout=args.dropout,
        lstm_hidden=args.lstm_hidden,
        lstm_layers=args.lstm_layers,
        relational_variant=args.relational,
        freeze_backbone=args.freeze_backbone,
        seed=args.seed,
        encoder=EncoderConfig(
            stage_widths=args.encoder_widths,
            blocks_per_stage=args.encoder_blocks,
            stage_strides=tuple(2 for _ in args.encoder_widths),
            stem_width=args.stem_width,
        ),
        inflation=InflationSpec(
            temporal_extent=args.temporal_extent,
            inflate_every=args.inflate_every,
            temporal_pad=args.temporal_pad,
        ),
    )
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr if args.lr is not None else _DEFAULT_LR[args.task],
        momentum=args.momentum,
        lr_drop_epochs=args.drop_epochs,
        lr_drop_factor=args.drop_factor,
        dropout=args.dropout,
        weight_decay=args.weight_decay,
        clip_grad_norm=args.clip_grad_norm,
        seed=args.seed,
    )
    pretrained = _load_ckpt(args.pretrained) if args.pretrained else None
    resume = _load_ckpt(args.resume) if args.resume else None
    model = build_model(model_config, pretrained=pretrained)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "config.json",
        {
            "task": args.task,
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "pretrained": args.pretrained,
        },
    )
    result = train(model, dataset, train_config, task=args.task, resume_from=resume)
    save_checkpoint(result.final, out / "final.ckpt")
    save_checkpoint(result.best, out / "best.ckpt")
    _write_json(out / "history.json", result.history)
    if result.history["val_map"]:
        print(
            f"final val mAP: {100 * result.history['val_map'][-1]:.1f}% "
            f"(best {100 * max(result.history['val_map']):.1f}% "
            f"at epoch {result.best_epoch})"
        )
    print(f"wrote {out / 'final.ckpt'} and {out / 'best.ckpt'}")
    return 0


def _cmd_eval(args):
    dataset = read_dataset(_data_dir(args))
    ckpt = _load_ckpt(args.checkpoint)
    if "model" not in ckpt.config or "task" not in ckpt.config:
        raise DataError(
            f"{args.checkpoint}: not a trained model checkpoint (no model config)"
        )
    model_config = ModelConfig.from_dict(ckpt.config["model"])
    model = VideoClassifier(model_config)
    load_into_model(model, ckpt)
    task = ckpt.config["task"]
    report = evaluate(
        model,
        dataset,
        task=task,
        split=args.split,
        shuffle_segments=args.shuffle_segments,
        seed=args.seed,
    )
    print(f"mAP: {100 * report.map:.1f}%")
    evaluated = report.num_classes - len(report.skipped)
    print(
        f"task={task} split={args.split} videos={report.num_videos} "
        f"classes={evaluated} evaluated, {len(report.skipped)} skipped"
    )
    if args.report:
        write_report(report, args.report)
        print(f"wrote {args.report}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
