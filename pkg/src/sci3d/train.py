"""SGD training with a step schedule, deterministic resume, and checkpoints.

The optimizer is classic momentum SGD: v <- m v + g, p <- p - lr v. The
learning rate follows the linear scaling rule (base_lr scaled by
batch_size / reference_batch) and drops by a fixed factor at the configured
epochs. Every stochastic choice of an epoch is derived from (seed, epoch),
so training to epoch N in one run or in two runs joined by a checkpoint
produces bit-identical parameters.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import metrics
from .checkpoint import (
    STAGE_FINETUNE,
    Checkpoint,
    config_hash,
    load_params_into_module,
    params_from_module,
)
from .data import sample_clip
from .models import multilabel_loss
from .seeding import derive_seed


class NumericError(Exception):
    """Raised when training encounters a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe.

    dropout mirrors the rate the model was configured with so the recipe is
    self-describing; the layers themselves live in the model. weight_decay
    adds the usual L2 pull toward zero, and clip_grad_norm bounds the global
    gradient norm before each update (0 leaves gradients untouched).
    """

    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.015
    momentum: float = 0.9
    lr_drop_epochs: tuple = (90, 100)
    lr_drop_factor: float = 10.0
    reference_batch: int = 8
    dropout: float = 0.5
    weight_decay: float = 0.0
    clip_grad_norm: float = 0.0  # 0 disables clipping
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.reference_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must exceed 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.weight_decay < 0 or self.clip_grad_norm < 0:
            raise ValueError("weight_decay and clip_grad_norm must be non-negative")
        drops = tuple(self.lr_drop_epochs)
        if any(d < 0 for d in drops) or list(drops) != sorted(set(drops)):
            raise ValueError("lr_drop_epochs must be strictly increasing and >= 0")

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lr_drop_epochs"] = tuple(d["lr_drop_epochs"])
        return cls(**d)


def lr_at_epoch(config, epoch):
    """Effective learning rate: linear scaling, then the step drops.

    Piecewise constant in epoch with one discontinuity per configured drop;
    an epoch at or past the k-th drop runs at scaled_lr / factor^k.
    """
    epoch = int(epoch)
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    scaled = config.base_lr * config.batch_size / config.reference_batch
    k = sum(1 for d in config.lr_drop_epochs if epoch >= d)
    return scaled / config.lr_drop_factor**k


def sgd_step(param, grad, velocity, lr, momentum):
    """One momentum update; returns (new_param, new_velocity), inputs untouched.

    Accepts tensors or plain scalars; scalars are carried in float64.
    """

    def as_t(x):
        return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)

    param, grad, velocity = as_t(param), as_t(grad), as_t(velocity)
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("param, grad, velocity shapes must match")
    new_velocity = momentum * velocity + grad
    new_param = param - lr * new_velocity
    return new_param, new_velocity


@dataclass
class TrainResult:
    history: dict
    final: Checkpoint
    best: Checkpoint
    best_epoch: int


def load_into_model(model, ckpt):
    """Install checkpoint parameters into a model, config-checked.

    The model config stored in the checkpoint must hash-equal the requesting
    model's own config; a checkpoint from a different variant or shape fails
    here before any parameter is touched.
    """
    stored = ckpt.config.get("model")
    if stored is None:
        raise ValueError("checkpoint carries no model config")
    if config_hash(stored) != config_hash(model.config.to_dict()):
        raise ValueError(
            "checkpoint was written for a different model config "
            f"(checkpoint variant {stored.get('variant')!r}, requesting "
            f"model variant {model.config.variant!r})"
        )
    load_params_into_module(model, ckpt.params)


def _full_config(model, config, task):
    return {
        "model": model.config.to_dict(),
        "train": config.to_dict(),
        "task": task,
    }


def _resume_key(full_config):
    # epoch count is the one knob a resume may legitimately extend; every
    # other field changes what the shared epochs would compute
    cfg = json.loads(json.dumps(full_config))
    cfg.get("train", {}).pop("epochs", None)
    return config_hash(cfg)


def _snapshot(model, velocities, epoch, full_config):
    return Checkpoint(
        stage=STAGE_FINETUNE,
        epoch=epoch,
        config=full_config,
        params=params_from_module(model),
        optim={name: v.numpy().copy() for name, v in velocities.items()},
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )


def _augmented_segments(video, clip_len, task, rng):
    if task == "atomic":
        clip = sample_clip(video, clip_len, augment=True, rng=rng)
        return clip[None]  # one segment
    T = video.frames.shape[0]
    s = T // clip_len
    window = sample_clip(video, s * clip_len, augment=True, rng=rng)
    return window.reshape(s, clip_len, *window.shape[1:])


def train(model, dataset, config=None, task="atomic", resume_from=None):
    """Train a model on a dataset split, evaluating val mAP every epoch.

    Returns a TrainResult with the loss/mAP history, the final checkpoint,
    and the best-val checkpoint. resume_from must be a checkpoint written by
    this function for the identical model/train/task configuration; training
    then continues from its epoch and reproduces the uninterrupted run
    exactly.
    """
    config = config if config is not None else TrainConfig()
    config.validate()
    if task not in ("atomic", "composite"):
        raise ValueError(f"unknown task {task!r}")
    if task == "composite" and model.config.head != "lstm":
        raise ValueError("composite training requires the lstm head")
    space = dataset.label_space
    expected = space.num_atomic if task == "atomic" else space.num_composite
    if model.config.num_classes != expected:
        raise ValueError(
            f"model has {model.config.num_classes} classes but the {task} task "
            f"needs {expected}"
        )
    train_ids = dataset.ids("train")
    if not train_ids:
        raise ValueError("train split is empty")
    videos = [dataset.load(v) for v in train_ids]
    label_key = "atomic" if task == "atomic" else "composite"
    labels = torch.from_numpy(
        np.stack([getattr(v, label_key) for v in videos])
    ).float()

    trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
    velocities = {n: torch.zeros_like(p) for n, p in trainable.items()}
    full_config = _full_config(model, config, task)

    start_epoch = 0
    if resume_from is not None:
        if resume_from.stage != STAGE_FINETUNE:
            raise ValueError(f"cannot resume from a {resume_from.stage!r} checkpoint")
        if _resume_key(resume_from.config) != _resume_key(full_config):
            raise ValueError(
                "resume checkpoint was written for a different model/train/task "
                "configuration"
            )
        load_params_into_module(model, resume_from.params)
        if set(resume_from.optim) != set(velocities):
            raise ValueError("resume checkpoint optimizer state names do not match")
        for name, arr in resume_from.optim.items():
            velocities[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(
                velocities[name].dtype
            )
        start_epoch = resume_from.epoch
    if start_epoch > config.epochs:
        raise ValueError(
            f"checkpoint is at epoch {start_epoch}, beyond epochs={config.epochs}"
        )

    history = {"epoch": [], "lr": [], "train_loss": [], "val_map": []}
    best = None
    best_map = -1.0
    best_epoch = -1
    clip_len = model.config.clip_len

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at_epoch(config, epoch)
        torch.manual_seed(derive_seed(config.seed, "epoch", epoch))
        order = np.random.default_rng(
            derive_seed(config.seed, "shuffle", epoch)
        ).permutation(len(videos))
        model.train()
        epoch_loss = 0.0
        nbatches = 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            segs = []
            for vi in idx:
                rng = np.random.default_rng(
                    derive_seed(config.seed, "aug", epoch, int(vi))
                )
                segs.append(_augmented_segments(videos[vi], clip_len, task, rng))
            x = torch.from_numpy(np.stack(segs))  # (B, S, T, H, W, 3)
            x = x.permute(0, 1, 5, 2, 3, 4).contiguous()
            logits = model(x)
            loss = multilabel_loss(logits, labels[idx])
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {nbatches}; aborting"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            with torch.no_grad():
                for name, p in trainable.items():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise NumericError(
                            f"non-finite gradient in {name} at epoch {epoch}, "
                            f"batch {nbatches}; aborting"
                        )
                if config.clip_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(
                        trainable.values(), config.clip_grad_norm
                    )
                for name, p in trainable.items():
                    if p.grad is None:
                        continue
                    g = p.grad
                    if config.weight_decay > 0:
                        g = g.add(p, alpha=config.weight_decay)
                    v = velocities[name]
                    v.mul_(config.momentum).add_(g)
                    p.add_(v, alpha=-lr)
            epoch_loss += loss.item()
            nbatches += 1

        report = metrics.evaluate(model, dataset, task=task, split="val")
        history["epoch"].append(epoch)
        history["lr"].append(lr)
        history["train_loss"].append(epoch_loss / max(nbatches, 1))
        history["val_map"].append(report.map)
        if report.map > best_map:
            best_map = report.map
            best_epoch = epoch
            best = _snapshot(model, velocities, epoch + 1, full_config)

    final = _snapshot(model, velocities, config.epochs, full_config)
    if best is None:  # zero epochs trained
        best = final
        best_epoch = config.epochs
    return TrainResult(history=history, final=final, best=best, best_epoch=best_epoch)
