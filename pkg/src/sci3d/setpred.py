"""Object-state set prediction for encoder pretraining.

A 2D encoder looks at single frames; a relational block mixes the spatial
grid as a set; a feed-forward decoder emits a fixed number of state slots.
Supervision is permutation-invariant: predictions are matched to target
slots with the Hungarian algorithm on a pairwise cost, and the loss is the
matched cost. A pretrained encoder is the initialization for the
set-conditioned stream of the video models.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.optimize
import torch
from torch import nn

from . import scene
from .backbone import EncoderConfig, build_encoder_2d
from .checkpoint import STAGE_PRETRAIN, Checkpoint, params_from_module
from .data import DataError
from .relational import NonLocalBlock
from .seeding import derive_seed, torch_seeded

_CONT = [scene.POS.start + i for i in range(3)] + [scene.SIZE]
_CAT = list(range(scene.SHAPE.start, scene.SHAPE.stop)) + list(
    range(scene.COLOR.start, scene.COLOR.stop)
) + list(range(scene.MATERIAL.start, scene.MATERIAL.stop))


def hungarian_match(cost):
    """Minimum-cost perfect matching on a square cost matrix.

    Returns (assignment, total) where assignment[i] is the column matched to
    row i and total is the sum of the selected entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.size == 0:
        raise ValueError("cost matrix is empty")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = scipy.optimize.linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=np.int64)
    assignment[rows] = cols
    total = float(cost[rows, cols].sum())
    return assignment, total


def _split_fields(x):
    exists = x[..., scene.EXISTS]
    cont = x[..., _CONT]
    shape = x[..., scene.SHAPE]
    color = x[..., scene.COLOR]
    material = x[..., scene.MATERIAL]
    return exists, cont, shape, color, material


def pair_cost(pred, target, coord_weight=1.0, categorical_weight=1.0, exists_weight=1.0):
    """(K, K) matching cost between predicted and target state slots.

    Entry (i, j) scores prediction i against target j: squared error on the
    continuous fields, cross entropy on each categorical block, and binary
    cross entropy on the exists flag. Exact agreement costs exactly zero;
    xlogy keeps 0 * log 0 at zero instead of nan.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != scene.STATE_DIM:
        raise ValueError(
            f"pred and target must both be (K, {scene.STATE_DIM}), got "
            f"{tuple(pred.shape)} and {tuple(target.shape)}"
        )
    pe, pc, ps, pcol, pm = _split_fields(pred[:, None, :])
    te, tc, ts, tcol, tm = _split_fields(target[None, :, :])

    # the tiny clamp only matters when a probability underflows to exactly 0
    # against a positive target; it turns an infinite cost into a large
    # finite one so the matching stays solvable
    floor = 1e-12
    sq = ((pc - tc) ** 2).sum(-1)
    ce = -(
        torch.special.xlogy(ts, ps.clamp(min=floor)).sum(-1)
        + torch.special.xlogy(tcol, pcol.clamp(min=floor)).sum(-1)
        + torch.special.xlogy(tm, pm.clamp(min=floor)).sum(-1)
    )
    bce = -(
        torch.special.xlogy(te, pe.clamp(min=floor))
        + torch.special.xlogy(1.0 - te, (1.0 - pe).clamp(min=floor))
    )
    return coord_weight * sq + categorical_weight * ce + exists_weight * bce


def set_loss(pred, target, **weights):
    """Hungarian-matched set loss, averaged over slots.

    Differentiable in pred: the assignment is computed on detached costs,
    gradient flows through the selected entries. Zero iff the predicted set
    equals the target set up to slot permutation. The matched entries are
    summed in sorted order, so permuting either argument's slots changes
    nothing, not even the floating-point rounding.
    """
    cost = pair_cost(pred, target, **weights)
    assignment, _ = hungarian_match(cost.detach().numpy())
    k = cost.shape[0]
    matched = cost[torch.arange(k), torch.from_numpy(assignment)]
    return torch.sort(matched).values.sum() / k


class SetDecoder(nn.Module):
    """Latent vector to a fixed-size set of state slots.

    Raw outputs are squashed per field: sigmoid for exists, position, and
    size; softmax over each categorical block. Output rows are therefore
    valid (if soft) state slots.
    """

    def __init__(self, latent_dim, max_objects=scene.MAX_OBJECTS, hidden=128):
        super().__init__()
        self.max_objects = max_objects
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, max_objects * scene.STATE_DIM),
        )

    def forward(self, latent):
        raw = self.net(latent).reshape(*latent.shape[:-1], self.max_objects, scene.STATE_DIM)
        out = torch.empty_like(raw)
        out[..., scene.EXISTS] = torch.sigmoid(raw[..., scene.EXISTS])
        out[..., scene.POS] = torch.sigmoid(raw[..., scene.POS])
        out[..., scene.SIZE] = torch.sigmoid(raw[..., scene.SIZE])
        out[..., scene.SHAPE] = torch.softmax(raw[..., scene.SHAPE], dim=-1)
        out[..., scene.COLOR] = torch.softmax(raw[..., scene.COLOR], dim=-1)
        out[..., scene.MATERIAL] = torch.softmax(raw[..., scene.MATERIAL], dim=-1)
        return out


def decode_set(latent, decoder):
    """Decode one latent vector into a (max_objects, STATE_DIM) slot array."""
    latent = torch.as_tensor(latent)
    if latent.ndim != 1:
        raise ValueError("decode_set expects a single latent vector")
    with torch.no_grad():
        return decoder(latent[None])[0]


def positional_tokens(h, w, c):
    """Fixed sinusoidal code for an h x w grid, one c-vector per cell.

    Convolutional features are translation equivariant, so after mean
    pooling they carry no position signal at all; without this injection the
    decoder provably cannot recover coordinates. Half the channels encode
    the row, half the column, at frequencies spaced for single-digit grids.
    """
    half = c // 2

    def axis(n, d):
        pos = torch.arange(n, dtype=torch.float32)[:, None]
        idx = torch.arange(d, dtype=torch.float32)[None]
        rate = torch.pow(10.0, -(idx // 2) * 2.0 / max(d, 1))
        ang = pos * rate
        emb = torch.where(idx.long() % 2 == 0, torch.sin(ang), torch.cos(ang))
        return emb

    rows = axis(h, half)[:, None, :].expand(h, w, half)
    cols = axis(w, c - half)[None, :, :].expand(h, w, c - half)
    return torch.cat([rows, cols], dim=-1).reshape(h * w, c)


class SetPredictor(nn.Module):
    """Frame to state-set model: 2D encoder, relational mix, slot decoder."""

    def __init__(self, encoder, max_objects=scene.MAX_OBJECTS, decoder_hidden=128):
        super().__init__()
        self.encoder = encoder
        c = encoder.out_channels
        self.relational = NonLocalBlock(c, variant="embedded_gaussian")
        self.decoder = SetDecoder(2 * c, max_objects=max_objects, hidden=decoder_hidden)

    def forward(self, images):
        # images (B, 3, H, W)
        grid = self.encoder(images)
        b, c, h, w = grid.shape
        tokens = grid.reshape(b, c, h * w).transpose(1, 2)
        tokens = tokens + positional_tokens(h, w, c).to(tokens.dtype)
        mixed = self.relational(tokens)
        # global pooling over cells: the mean summarizes the scene, the max
        # picks out per channel the strongest cell. An object's cell keeps its
        # own positional code, so coordinates survive the max but not the mean.
        latent = torch.cat([mixed.mean(dim=1), mixed.max(dim=1).values], dim=-1)
        return self.decoder(latent)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    frames_per_video: int = 2
    max_objects: int = scene.MAX_OBJECTS
    decoder_hidden: int = 128
    coord_weight: float = 1.0
    categorical_weight: float = 1.0
    exists_weight: float = 1.0
    frozen: bool = False
    encoder: EncoderConfig = EncoderConfig()

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be positive")

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


def build_set_predictor(config):
    """Construct the predictor with all submodules seeded from config.seed."""
    config.validate()
    enc = build_encoder_2d(config.encoder, seed=derive_seed(config.seed, "setpred-enc"))
    with torch_seeded(derive_seed(config.seed, "setpred-head")):
        model = SetPredictor(
            enc, max_objects=config.max_objects, decoder_hidden=config.decoder_hidden
        )
    return model


def _collect_frames(dataset, config):
    images = []
    targets = []
    for vid in dataset.ids("train"):
        video = dataset.load(vid)
        if video.states is None:
            raise DataError(
                f"video {vid} has no state annotations; pretraining needs states"
            )
        T = video.frames.shape[0]
        k = min(config.frames_per_video, T)
        for t in np.linspace(0, T - 1, k).round().astype(int):
            images.append(video.frames[t].astype(np.float32) / 255.0)
            targets.append(video.states[t, : config.max_objects])
    if not images:
        raise DataError("no train videos to pretrain on")
    images = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    targets = torch.from_numpy(np.stack(targets))
    return images, targets


def pretrain_encoder(dataset, config=None):
    """Train (or probe) a set predictor on single frames.

    Returns (model, history, checkpoint). history is the per-epoch mean set
    loss over the train frames. With config.frozen the model is evaluated
    but never updated, so the history is exactly constant; that mode exists
    to separate data pipeline effects from learning effects. epochs=0
    returns the freshly initialized model with an empty history.
    """
    config = config if config is not None else PretrainConfig()
    config.validate()
    model = build_set_predictor(config)
    images, targets = _collect_frames(dataset, config)
    n = images.shape[0]

    velocities = {
        name: torch.zeros_like(p) for name, p in model.named_parameters()
    }
    history = []
    weights = {
        "coord_weight": config.coord_weight,
        "categorical_weight": config.categorical_weight,
        "exists_weight": config.exists_weight,
    }

    for epoch in range(config.epochs):
        if config.frozen:
            model.eval()
            with torch.no_grad():
                losses = []
                for i in range(n):
                    pred = model(images[i : i + 1])[0]
                    losses.append(float(set_loss(pred, targets[i], **weights)))
            history.append(math.fsum(losses) / n)
            continue

        model.train()
        torch.manual_seed(derive_seed(config.seed, "pretrain-epoch", epoch))
        order = np.random.default_rng(
            derive_seed(config.seed, "pretrain-shuffle", epoch)
        ).permutation(n)
        epoch_loss = 0.0
        nbatches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = images[idx]
            preds = model(batch)
            loss = torch.stack(
                [set_loss(preds[j], targets[idx[j]], **weights) for j in range(len(idx))]
            ).mean()
            if not torch.isfinite(loss):
                raise ValueError(
                    f"non-finite pretrain loss at epoch {epoch}, batch {nbatches}"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            with torch.no_grad():
                for name, p in model.named_parameters():
                    if p.grad is None:
                        continue
                    v = velocities[name]
                    v.mul_(config.momentum).add_(p.grad)
                    p.add_(v, alpha=-config.lr)
            epoch_loss += loss.item()
            nbatches += 1
        history.append(epoch_loss / nbatches)

    ckpt = Checkpoint(
        stage=STAGE_PRETRAIN,
        epoch=len(history),
        config={"pretrain": config.to_dict()},
        params=params_from_module(model),
        optim={name: v.numpy().copy() for name, v in velocities.items()},
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )
    return model, history, ckpt
