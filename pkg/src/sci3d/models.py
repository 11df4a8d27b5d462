"""The evaluated video architectures.

Four variants share one chassis:

    r3d_nl        visual stream only, a non-local block inside the backbone
    sci3d_single  set-conditioned stream only
    sci3d_nr      both streams, fused by concatenation and projection
    sci3d         both streams, fused by a non-local block over the union set

Streams are inflated 2D encoders; the set-conditioned stream is meant to be
initialized from a set-prediction pretraining checkpoint. Two classifier
heads exist: fc averages segment vectors, lstm consumes them as a sequence
and classifies from the final hidden state.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import EncoderConfig, InflationSpec, build_encoder_2d, inflate
from .checkpoint import STAGE_PRETRAIN, load_params_into_module
from .relational import NonLocalBlock, nonlocal_forward
from .seeding import derive_seed, torch_seeded

VARIANTS = ("r3d_nl", "sci3d_single", "sci3d_nr", "sci3d")
HEADS = ("fc", "lstm")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "sci3d"
    head: str = "fc"
    num_classes: int = 9
    clip_len: int = 16
    segment_stride: int = 0  # 0 means clip_len, i.e. non-overlapping segments
    dropout: float = 0.5
    lstm_hidden: int = 64
    lstm_layers: int = 2
    relational_variant: str = "embedded_gaussian"
    freeze_backbone: bool = False
    seed: int = 0
    encoder: EncoderConfig = EncoderConfig()
    inflation: InflationSpec = InflationSpec()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.clip_len < 1:
            raise ValueError("clip_len must be positive")
        if self.segment_stride < 0:
            raise ValueError("segment_stride must be 0 (meaning clip_len) or positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ValueError("lstm dimensions must be positive")
        self.encoder.validate()
        self.inflation.validate()

    @property
    def effective_stride(self):
        return self.segment_stride if self.segment_stride else self.clip_len

    def to_dict(self):
        return {
            "variant": self.variant,
            "head": self.head,
            "num_classes": self.num_classes,
            "clip_len": self.clip_len,
            "segment_stride": self.segment_stride,
            "dropout": self.dropout,
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
            "relational_variant": self.relational_variant,
            "freeze_backbone": self.freeze_backbone,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "inflation": self.inflation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.setdefault("segment_stride", 0)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        d["inflation"] = InflationSpec.from_dict(d["inflation"])
        return cls(**d)


def _flatten_volume(x):
    # (B, C, T, H, W) -> (B, THW, C)
    b, c = x.shape[0], x.shape[1]
    return x.reshape(b, c, -1).transpose(1, 2)


def _unflatten_volume(tokens, like):
    b, c = like.shape[0], like.shape[1]
    return tokens.transpose(1, 2).reshape(like.shape)


def fuse_streams(a, b, mode, params):
    """Fuse two aligned (T, H, W, C) feature volumes into one.

    mode "concat" applies a linear projection to the channel concatenation;
    params is that nn.Linear. mode "relational" runs a non-local block over
    the union of both token sets and sums the two halves; params is that
    NonLocalBlock. Volumes must agree on T, H, W; concat additionally allows
    differing channel counts while relational needs one shared token width.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ValueError(
            f"streams must be (T, H, W, C) volumes on one grid, got "
            f"{tuple(a.shape)} and {tuple(b.shape)}"
        )
    if mode == "relational" and a.shape[3] != b.shape[3]:
        raise ValueError(
            "relational fusion needs matching channel counts, got "
            f"{a.shape[3]} and {b.shape[3]}"
        )
    t, h, w, c = a.shape
    if mode == "concat":
        return params(torch.cat([a, b], dim=-1))
    if mode == "relational":
        union = torch.cat([a.reshape(-1, c), b.reshape(-1, c)], dim=0)
        mixed = nonlocal_forward(union, params)
        n = t * h * w
        return (mixed[:n] + mixed[n:]).reshape(t, h, w, c)
    raise ValueError(f"unknown fusion mode {mode!r}")


class VideoClassifier(nn.Module):
    """Chassis shared by all variants; built via build_model."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        c = config.encoder.out_channels

        self.visual = None
        self.dspn = None
        self.backbone_nl = None
        self.fuse_proj = None
        self.fuse_nl = None

        if config.variant in ("r3d_nl", "sci3d_nr", "sci3d"):
            self.visual = self._build_stream("visual")
        if config.variant in ("sci3d_single", "sci3d_nr", "sci3d"):
            self.dspn = self._build_stream("dspn")

        if config.variant == "r3d_nl":
            # placed after the penultimate stage, mirroring where non-local
            # blocks earn their keep in deeper residual nets
            n_stages = len(config.encoder.stage_widths)
            self.nl_stage = max(0, n_stages - 2)
            width = config.encoder.stage_widths[self.nl_stage]
            with torch_seeded(derive_seed(config.seed, "backbone-nl")):
                self.backbone_nl = NonLocalBlock(width, config.relational_variant)
        elif config.variant == "sci3d_nr":
            with torch_seeded(derive_seed(config.seed, "fuse")):
                self.fuse_proj = nn.Linear(2 * c, c, bias=False)
        elif config.variant == "sci3d":
            with torch_seeded(derive_seed(config.seed, "fuse")):
                self.fuse_nl = NonLocalBlock(c, config.relational_variant)

        with torch_seeded(derive_seed(config.seed, "head")):
            self.head_drop = nn.Dropout(config.dropout)
            if config.head == "lstm":
                self.lstm = nn.LSTM(
                    c,
                    config.lstm_hidden,
                    config.lstm_layers,
                    batch_first=True,
                    dropout=config.dropout if config.lstm_layers > 1 else 0.0,
                )
                self.classifier = nn.Linear(config.lstm_hidden, config.num_classes)
            else:
                self.lstm = None
                self.classifier = nn.Linear(c, config.num_classes)

        if config.freeze_backbone:
            for stream in (self.visual, self.dspn):
                if stream is not None:
                    for p in stream.parameters():
                        p.requires_grad_(False)

    def _build_stream(self, tag):
        cfg = self.config
        enc2d = build_encoder_2d(cfg.encoder, seed=derive_seed(cfg.seed, "stream", tag))
        return inflate(enc2d, cfg.inflation)

    def _run_visual(self, x):
        def hook(i, h):
            if i == self.nl_stage:
                tokens = _flatten_volume(h)
                return _unflatten_volume(nonlocal_forward(tokens, self.backbone_nl), h)
            return h

        return self.visual(x, stage_hook=hook if self.backbone_nl is not None else None)

    def _segment_vectors(self, x):
        # x (N, 3, T, H, W) -> (N, C)
        variant = self.config.variant
        if variant == "r3d_nl":
            feats = self._run_visual(x)
        elif variant == "sci3d_single":
            feats = self.dspn(x)
        else:
            va = self.visual(x)
            vb = self.dspn(x)
            if variant == "sci3d_nr":
                tokens = torch.cat([_flatten_volume(va), _flatten_volume(vb)], dim=-1)
                feats = _unflatten_volume(self.fuse_proj(tokens), va)
            else:
                ta, tb = _flatten_volume(va), _flatten_volume(vb)
                n = ta.shape[1]
                mixed = nonlocal_forward(torch.cat([ta, tb], dim=1), self.fuse_nl)
                feats = _unflatten_volume(mixed[:, :n] + mixed[:, n:], va)
        return feats.mean(dim=(2, 3, 4))

    def forward(self, clips):
        """clips (B, S, 3, T, H, W) float in [0, 1] -> logits (B, num_classes)."""
        if clips.ndim != 6:
            raise ValueError(
                f"expected (B, S, 3, T, H, W) clips, got shape {tuple(clips.shape)}"
            )
        b, s = clips.shape[0], clips.shape[1]
        vecs = self._segment_vectors(clips.reshape(b * s, *clips.shape[2:]))
        vecs = vecs.reshape(b, s, -1)
        if self.config.head == "lstm":
            _, (hn, _) = self.lstm(vecs)
            return self.classifier(self.head_drop(hn[-1]))
        # accumulate the mean in double so segment order cannot leak into the
        # result through float32 rounding; the fc head is order-free by design
        pooled = vecs.double().mean(dim=1).to(vecs.dtype)
        return self.classifier(self.head_drop(pooled))


def build_model(config=None, pretrained=None):
    """Construct a variant, optionally seeding the set stream from pretraining.

    pretrained is a loaded 2d-pretrain Checkpoint; its encoder weights are
    inflated into the dspn stream. Passing one to a variant without that
    stream, or passing a finetune checkpoint, is an error.
    """
    config = config if config is not None else ModelConfig()
    config.validate()
    model = VideoClassifier(config)
    if pretrained is not None:
        if model.dspn is None:
            raise ValueError(
                f"variant {config.variant!r} has no set-conditioned stream to "
                "initialize from a pretrain checkpoint"
            )
        if pretrained.stage != STAGE_PRETRAIN:
            raise ValueError(
                f"expected a {STAGE_PRETRAIN!r} checkpoint, got {pretrained.stage!r}"
            )
        enc_params = {
            name[len("encoder.") :]: arr
            for name, arr in pretrained.params.items()
            if name.startswith("encoder.")
        }
        if not enc_params:
            raise ValueError("pretrain checkpoint carries no encoder parameters")
        enc2d = build_encoder_2d(config.encoder, seed=0)
        load_params_into_module(enc2d, enc_params)
        stream = inflate(enc2d, config.inflation)
        model.dspn.load_state_dict(stream.state_dict())
    return model


def video_segments(frames, clip_len, stride=None):
    """Cut a full video into clips of clip_len frames, normalized to [0, 1].

    frames (T, H, W, 3) uint8 -> (S, clip_len, H, W, 3) float32. Segment
    starts advance by stride frames (default clip_len, i.e. consecutive
    non-overlapping windows); trailing frames that do not fill a clip are
    dropped.
    """
    frames = np.asarray(frames)
    T = frames.shape[0]
    clip_len = int(clip_len)
    stride = clip_len if stride in (None, 0) else int(stride)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if T < clip_len:
        raise ValueError(f"video of {T} frames is shorter than clip_len {clip_len}")
    starts = range(0, T - clip_len + 1, stride)
    arr = frames.astype(np.float32) / 255.0
    return np.stack([arr[t0 : t0 + clip_len] for t0 in starts])


def forward_video(model, frames):
    """Score one full video: segment, batch, forward. Returns logits (C,)."""
    segs = video_segments(
        frames, model.config.clip_len, model.config.effective_stride
    )
    x = torch.from_numpy(segs).permute(0, 4, 1, 2, 3)[None]  # (1, S, 3, T, H, W)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(x)[0]
    finally:
        if was_training:
            model.train()
    return logits


def multilabel_loss(logits, labels):
    """Mean binary cross entropy with logits over all (item, class) cells."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise ValueError(
            f"logits and labels must match, got {tuple(logits.shape)} "
            f"and {tuple(labels.shape)}"
        )
    return F.binary_cross_entropy_with_logits(logits, labels)


def count_trainable(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
