"""Relational reasoning layers.

Two pieces live here. relation_aggregate is the set-level primitive: a
learned (or given) pair function summed over every ordered pair of elements,
self-pairs included, then passed through an output function. Its order
independence is what lets downstream consumers treat features as a set.

NonLocalBlock is the attention-flavored relative: every element is updated
with a similarity-weighted mix of all elements, written back through a
zero-initialized projection so a freshly built block is exactly the
identity and can be dropped into a pretrained network without disturbing it.
"""

import copy
import math

import torch
from torch import nn

VARIANTS = ("dot_product", "gaussian", "embedded_gaussian")


def relation_aggregate(values, pair_fn, out_fn=None):
    """Sum pair_fn over all ordered element pairs, then apply out_fn.

    values   (N, C) tensor-like, the element set
    pair_fn  callable taking broadcast-compatible (o_i, o_j) batches
    out_fn   optional map applied to the pooled pair vector

    Self-pairs (i, i) are included. The result is invariant to any
    permutation of the input rows.
    """
    v = torch.as_tensor(values)
    if v.ndim != 2:
        raise ValueError(f"expected a (N, C) element set, got shape {tuple(v.shape)}")
    if v.shape[0] == 0:
        raise ValueError("empty relation set")
    n = v.shape[0]
    oi = v[:, None, :].expand(n, n, v.shape[1])
    oj = v[None, :, :].expand(n, n, v.shape[1])
    pooled = pair_fn(oi, oj).sum(dim=(0, 1))
    return out_fn(pooled) if out_fn is not None else pooled


class NonLocalBlock(nn.Module):
    """Self-attention over a set of feature vectors with a residual write-back.

    variant selects the similarity function:
        dot_product         theta(x) phi(x)^T scaled by 1/N
        gaussian            softmax over raw x x^T rows
        embedded_gaussian   softmax over theta(x) phi(x)^T rows

    The output projection starts at zero, so forward(x) == x at init.
    """

    def __init__(self, channels, variant="embedded_gaussian", bottleneck=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if bottleneck is None:
            bottleneck = max(1, channels // 2)
        if not 1 <= bottleneck <= channels:
            raise ValueError(
                f"bottleneck must be in [1, {channels}], got {bottleneck}"
            )
        self.channels = channels
        self.variant = variant
        self.bottleneck = bottleneck
        embedded = variant in ("dot_product", "embedded_gaussian")
        self.query_embed = nn.Linear(channels, bottleneck, bias=False) if embedded else None
        self.key_embed = nn.Linear(channels, bottleneck, bias=False) if embedded else None
        self.value_embed = nn.Linear(channels, bottleneck, bias=False)
        self.out_proj = nn.Linear(bottleneck, channels, bias=False)
        nn.init.zeros_(self.out_proj.weight)

    def forward(self, x):
        return nonlocal_forward(x, self)


def _as_batched(x):
    x = torch.as_tensor(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (N, C) or (B, N, C) input, got shape {tuple(x.shape)}")


def similarity(x, block):
    """Pairwise weight matrix of a non-local block, shape (..., N, N).

    Softmax variants return row-stochastic matrices; dot_product rows are
    plain scaled inner products and carry no normalization constraint.
    """
    xb, squeeze = _as_batched(x)
    if xb.shape[1] == 0:
        raise ValueError("empty relation set")
    if xb.shape[-1] != block.channels:
        raise ValueError(
            f"input has {xb.shape[-1]} channels, block expects {block.channels}"
        )
    if block.variant == "gaussian":
        logits = xb @ xb.transpose(-1, -2)
        w = torch.softmax(logits, dim=-1)
    elif block.variant == "embedded_gaussian":
        logits = block.query_embed(xb) @ block.key_embed(xb).transpose(-1, -2)
        w = torch.softmax(logits, dim=-1)
    else:
        n = xb.shape[1]
        w = (block.query_embed(xb) @ block.key_embed(xb).transpose(-1, -2)) / n
    return w[0] if squeeze else w


def nonlocal_forward(x, block):
    """y = x + out_proj(similarity(x) @ value_embed(x)), shapes preserved."""
    xb, squeeze = _as_batched(x)
    w = similarity(xb, block)
    y = xb + block.out_proj(w @ block.value_embed(xb))
    return y[0] if squeeze else y


def nonlocal_backward_check(x, block, step=1e-5, eps=1e-6):
    """Compare autograd gradients of a block against finite differences.

    Runs in float64 on copies, leaving the given block untouched. The
    scalarization is a fixed cosine-weighted sum of the outputs, so the
    check itself is deterministic. Returns the max relative error across the
    input and every parameter.
    """
    from .gradcheck import check_function_gradients, probe_weights

    blk = copy.deepcopy(block).double()
    x64 = torch.as_tensor(x).detach().double().requires_grad_(True)
    w = probe_weights(x64.numel()).reshape(x64.shape)

    def closure():
        return (nonlocal_forward(x64, blk) * w).sum()

    tensors = [x64] + [p for p in blk.parameters() if p.requires_grad]
    err = check_function_gradients(closure, tensors, step=step, eps=eps)
    if not math.isfinite(err):
        raise ValueError("gradient check produced non-finite values")
    return err
