"""Multi-label evaluation: non-interpolated average precision and mAP.

Ranking ties are broken by ascending original index, which makes every AP
value an exact, reproducible rational rather than an artifact of sort
stability. Classes with no positives in the evaluated split are skipped and
reported, never silently counted as zero.
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .seeding import derive_seed


def _check_binary(labels, name="labels"):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return labels.astype(np.float64)


def average_precision(scores, labels):
    """Non-interpolated AP of one class.

    Items are ranked by descending score with ties broken by ascending
    index; AP is the mean of precision-at-rank over the positive items.
    Raises ValueError when the class has no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("average precision is undefined: no positive labels")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order] > 0.5
    precision = np.cumsum(hits) / np.arange(1, len(scores) + 1)
    return float(math.fsum(precision[hits]) / npos)


def mean_average_precision(scores, labels):
    """mAP over the classes that have at least one positive.

    Returns (map, per_class, skipped) where per_class holds one AP per
    column with None at skipped columns.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be matching (N, C) arrays")
    per_class = []
    skipped = []
    for c in range(scores.shape[1]):
        if labels[:, c].sum() == 0:
            per_class.append(None)
            skipped.append(c)
        else:
            per_class.append(average_precision(scores[:, c], labels[:, c]))
    evaluated = [ap for ap in per_class if ap is not None]
    if not evaluated:
        raise ValueError("no evaluable classes: every class lacks positives")
    return float(math.fsum(evaluated) / len(evaluated)), per_class, skipped


def chance_map(labels):
    """Prevalence baseline: the expected AP of a random ranking, per class.

    For a class with P positives out of N the expected AP is close to P/N;
    the mean over evaluated classes is the floor any trained model must beat.
    """
    labels = _check_binary(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be (N, C)")
    prev = [
        labels[:, c].mean() for c in range(labels.shape[1]) if labels[:, c].sum() > 0
    ]
    if not prev:
        raise ValueError("no class has positives")
    return float(math.fsum(prev) / len(prev))


@dataclass
class EvalReport:
    task: str
    split: str
    num_videos: int
    num_classes: int
    map: float
    per_class: list
    positives: list
    skipped: list
    shuffle_segments: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)


_REPORT_HEADER = "sci3d-eval v1"


def write_report(report, path):
    """Serialize a report as line-oriented text.

    One `class` line per class (id, AP or `-` when skipped, positive count)
    followed by a `map` summary line. Floats are written with enough digits
    to round-trip exactly through parse_report.
    """
    lines = [
        _REPORT_HEADER,
        f"task {report.task}",
        f"split {report.split}",
        f"videos {report.num_videos}",
        f"shuffled {'yes' if report.shuffle_segments else 'no'}",
        f"seed {report.seed}",
    ]
    for c in range(report.num_classes):
        ap = report.per_class[c]
        ap_txt = "-" if ap is None else format(ap, ".17g")
        lines.append(f"class {c} ap {ap_txt} positives {report.positives[c]}")
    evaluated = report.num_classes - len(report.skipped)
    lines.append(f"map {format(report.map, '.17g')} over {evaluated} classes")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_report(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: not a readable report ({exc})")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _REPORT_HEADER:
        raise ValueError(f"{path}: missing report header")
    fields = {}
    per_class = []
    positives = []
    summary = None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "class":
            if len(parts) != 6 or parts[2] != "ap" or parts[4] != "positives":
                raise ValueError(f"{path}: malformed class line {ln!r}")
            if int(parts[1]) != len(per_class):
                raise ValueError(f"{path}: class lines out of order at {ln!r}")
            per_class.append(None if parts[3] == "-" else float(parts[3]))
            positives.append(int(parts[5]))
        elif parts[0] == "map":
            summary = float(parts[1])
        elif len(parts) == 2:
            fields[parts[0]] = parts[1]
        else:
            raise ValueError(f"{path}: malformed report line {ln!r}")
    missing = {"task", "split", "videos", "shuffled", "seed"} - fields.keys()
    if missing:
        raise ValueError(f"{path}: report missing fields {sorted(missing)}")
    if summary is None:
        raise ValueError(f"{path}: report missing map summary line")
    if not per_class:
        raise ValueError(f"{path}: report has no class lines")
    return EvalReport(
        task=fields["task"],
        split=fields["split"],
        num_videos=int(fields["videos"]),
        num_classes=len(per_class),
        map=summary,
        per_class=per_class,
        positives=positives,
        skipped=[c for c, ap in enumerate(per_class) if ap is None],
        shuffle_segments=fields["shuffled"] == "yes",
        seed=int(fields["seed"]),
    )


def evaluate(
    model,
    dataset,
    task="atomic",
    split="val",
    shuffle_segments=False,
    seed=0,
    batch_videos=8,
):
    """Score every video of a split and compute the task mAP.

    Videos are cut into consecutive clip_len segments covering the whole
    duration, with no augmentation, so two calls with the same arguments
    produce the same report. shuffle_segments permutes each video's segment
    order (seeded per video) and exists to measure how much of a score rests
    on temporal structure rather than segment content.
    """
    from .models import video_segments  # deferred, models pulls in the heavy stack

    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    if task not in ("atomic", "composite"):
        raise ValueError(f"unknown task {task!r}")

    clip_len = model.config.clip_len
    label_rows = []
    score_rows = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for lo in range(0, len(ids), batch_videos):
                chunk = ids[lo : lo + batch_videos]
                seg_stack = []
                for offset, vid in enumerate(chunk):
                    video = dataset.load(vid)
                    label_rows.append(
                        video.atomic if task == "atomic" else video.composite
                    )
                    segs = video_segments(
                        video.frames, clip_len, model.config.effective_stride
                    )
                    if shuffle_segments:
                        rng = np.random.default_rng(
                            derive_seed(seed, "eval-shuffle", lo + offset)
                        )
                        segs = segs[rng.permutation(len(segs))]
                    seg_stack.append(segs)
                x = torch.from_numpy(np.stack(seg_stack))  # (B, S, T, H, W, 3)
                x = x.permute(0, 1, 5, 2, 3, 4).contiguous()
                scores = torch.sigmoid(model(x))
                score_rows.append(scores.numpy())
    finally:
        if was_training:
            model.train()

    scores = np.concatenate(score_rows, axis=0)
    labels = np.stack(label_rows)
    mean, per_class, skipped = mean_average_precision(scores, labels)
    return EvalReport(
        task=task,
        split=split,
        num_videos=len(ids),
        num_classes=int(labels.shape[1]),
        map=mean,
        per_class=per_class,
        positives=[int(labels[:, c].sum()) for c in range(labels.shape[1])],
        skipped=skipped,
        shuffle_segments=bool(shuffle_segments),
        seed=int(seed),
    )
