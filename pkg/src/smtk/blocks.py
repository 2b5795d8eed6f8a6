"""Local vector attention blocks.

All variants share one attention core: per-channel weights come from an MLP
over the relation vector ``K_ij - Q_i`` plus a position encoding, are
softmax-normalized over the K neighbors, optionally rescaled by a per-neighbor
mask, and weight ``V_ij`` plus the same position encoding before a sum over
neighbors.

* ``pt_attention``     local position bias only
* ``ptv2_attention``   adds a position multiplier on the relation vector
* ``smtransformer``    enhanced (global + local) encoding and a task-score mask
* ``skip_attention``   queries from one feature set, keys/values from another
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import NeighborIndex, PoolingMap, grid_unpool, group, relative_positions
from .layers import MLP, Linear
from .tensor import ShapeError, Tensor

MASK_MODES = ("none", "soft", "hard")


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "none"
    tau: float = None

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")
        if self.mode == "hard":
            if self.tau is None:
                raise ValueError("hard mask needs a threshold tau")
            if not 0.0 <= self.tau <= 1.0:
                raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        elif self.tau is not None:
            raise ValueError("tau is only meaningful for the hard mask")


class PositionEncoding:
    """Position-encoding parameters owned by one resolution level or block.

    ``kind="enhanced"`` encodes absolute positions with a global MLP, groups
    them, and feeds ``concat(K^p - Q^p, dp)`` to the local MLP.
    ``kind="local"`` feeds the raw offsets ``dp`` only.
    """

    def __init__(self, registry, name, channels, kind="enhanced", sharing_key=None):
        if kind not in ("enhanced", "local"):
            raise ValueError(f"unknown position encoding kind {kind!r}")
        self.kind = kind
        self.channels = channels
        self.sharing_key = sharing_key or name
        if kind == "enhanced":
            self.global_mlp = MLP(registry, f"{name}.global", [3, channels, channels])
            self.local_mlp = MLP(registry, f"{name}.local", [channels + 3, channels, channels])
        else:
            self.global_mlp = None
            self.local_mlp = MLP(registry, f"{name}.local", [3, channels, channels])

    def __call__(self, positions, idx):
        return enhanced_position_encoding(positions, idx, self)


def enhanced_position_encoding(positions, idx, pe):
    offsets = relative_positions(positions, idx)
    if pe.global_mlp is None:
        return pe.local_mlp(offsets)
    n, k = idx.indices.shape
    q = pe.global_mlp(Tensor(positions))
    keys = group(q, idx)
    diff = keys - T.reshape(q, (n, 1, q.shape[-1]))
    return pe.local_mlp(T.concat([diff, offsets], axis=-1))


class VectorAttention:
    """Projections and MLPs of one attention unit (``AttentionParams``)."""

    def __init__(self, registry, name, channels, pe, mask=None, n_classes=None, multiplier=False):
        mask = mask or MaskConfig()
        if pe.channels != channels:
            raise ShapeError(f"position encoding width {pe.channels} != attention width {channels}")
        self.channels = channels
        self.pe = pe
        self.mask = mask
        self.q = Linear(registry, f"{name}.q", channels, channels)
        self.k = Linear(registry, f"{name}.k", channels, channels)
        self.v = Linear(registry, f"{name}.v", channels, channels)
        self.attn = MLP(registry, f"{name}.mlp", [channels, channels, channels])
        self.multiplier = MLP(registry, f"{name}.pe_mult", [3, channels, channels]) if multiplier else None
        self.score_q = self.score_k = None
        if mask.mode != "none":
            if n_classes is None or n_classes < 2:
                raise ValueError("masked attention needs n_classes >= 2")
            self.n_classes = n_classes
            self.score_q = Linear(registry, f"{name}.score_q", channels, n_classes)
            self.score_k = Linear(registry, f"{name}.score_k", channels, n_classes)

    def attend(self, f_query, f_context, positions, idx, mask=None, use_multiplier=False):
        """Core aggregation; ``mask`` is an N x K tensor or None."""
        n, k = idx.indices.shape
        c = self.channels
        for name, f in (("query", f_query), ("context", f_context)):
            if f.shape[-1] != c:
                raise ShapeError(f"{name} features have width {f.shape[-1]}, expected {c}")
        if f_query.shape[0] != n:
            raise ShapeError(f"{f_query.shape[0]} query rows for a {n}-point neighbor index")
        q = self.q(f_query)
        keys = group(self.k(f_context), idx)
        values = group(self.v(f_context), idx)
        pe = self.pe(positions, idx)
        relation = keys - T.reshape(q, (n, 1, c))
        if use_multiplier:
            relation = relation * self.multiplier(relative_positions(positions, idx))
        weights = T.softmax(self.attn(relation + pe), axis=1)
        if mask is not None:
            weights = weights * T.reshape(mask, (n, k, 1))
        return T.sum(weights * (values + pe), axis=1)

    def attention_weights(self, f, positions, idx):
        """The softmax-normalized per-channel weights, N x K x C."""
        n, _ = idx.indices.shape
        q = self.q(f)
        relation = group(self.k(f), idx) - T.reshape(q, (n, 1, self.channels))
        return T.softmax(self.attn(relation + self.pe(positions, idx)), axis=1)


def _require_scores(params):
    if params.score_q is None:
        raise ValueError("attention parameters carry no score projections")


def score_difference(f, idx, params):
    """``K^s_ij - Q^s_i`` from softmax task scores, N x K x T."""
    _require_scores(params)
    n = f.shape[0]
    qs = T.softmax(params.score_q(f), axis=-1)
    ks = group(T.softmax(params.score_k(f), axis=-1), idx)
    return ks - T.reshape(qs, (n, 1, qs.shape[-1]))


def soft_mask(f, idx, params):
    """Per-neighbor scalar in [0, 1]: min-max over neighbors, max over classes."""
    n, k = idx.indices.shape
    diff = score_difference(f, idx, params)
    peak = T.max(T.minmax_normalize(diff, axis=1), axis=2)
    return T.norm(T.reshape(peak, (n, k, 1)), axis=-1)


def hard_mask(f, idx, params, tau):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    with T.no_grad():
        diff = score_difference(f, idx, params)
    return Tensor((diff.data.max(axis=2) >= tau).astype(diff.dtype))


def _mask_for(f, idx, params, mask):
    if mask.mode == "soft":
        return soft_mask(f, idx, params)
    if mask.mode == "hard":
        return hard_mask(f, idx, params, mask.tau)
    return None


def pt_attention(f, positions, idx, params):
    return params.attend(f, f, positions, idx)


def ptv2_attention(f, positions, idx, params):
    if params.multiplier is None:
        raise ValueError("attention parameters carry no position multiplier")
    return params.attend(f, f, positions, idx, use_multiplier=True)


def smtransformer(f, positions, idx, params, mask=None):
    mask = params.mask if mask is None else mask
    return params.attend(f, f, positions, idx, mask=_mask_for(f, idx, params, mask),
                         use_multiplier=params.multiplier is not None)


def skip_attention(f_h, f_mid, positions, idx, params):
    if f_h.shape != f_mid.shape:
        raise ShapeError(f"skip features {f_h.shape} and expanded features {f_mid.shape} differ")
    return params.attend(f_h, f_mid, positions, idx)


class SMTB:
    """Projection, masked vector attention with residual, projection."""

    def __init__(self, registry, name, in_channels, channels, out_channels, pe, mask=None,
                 n_classes=None, multiplier=False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.proj_in = MLP(registry, f"{name}.proj_in", [in_channels, channels], final_act=True)
        self.attn = VectorAttention(registry, f"{name}.attn", channels, pe, mask=mask,
                                    n_classes=n_classes, multiplier=multiplier)
        self.proj_out = MLP(registry, f"{name}.proj_out", [channels, out_channels], final_act=True)

    def __call__(self, f_in, positions, idx):
        return smtb(f_in, positions, idx, self)


def smtb(f_in, positions, idx, block):
    if f_in.shape[-1] != block.in_channels:
        raise ShapeError(f"block expects {block.in_channels} input channels, got {f_in.shape[-1]}")
    f = block.proj_in(f_in)
    g = smtransformer(f, positions, idx, block.attn)
    return block.proj_out(g + f)


def _check_upsample_inputs(f_in2, f_l, f_h, pmap):
    if f_in2.shape[0] != pmap.m or f_l.shape[0] != pmap.m:
        raise ShapeError(
            f"coarse inputs have {f_in2.shape[0]} and {f_l.shape[0]} rows, pooling map has {pmap.m} cells"
        )
    if f_h.shape[0] != pmap.n:
        raise ShapeError(f"skip feature has {f_h.shape[0]} rows, pooling map covers {pmap.n} points")


class SAUB:
    """Skip-attention upsampling from a coarse level to the next finer one."""

    def __init__(self, registry, name, in_channels, low_channels, high_channels, pe):
        self.in_channels = in_channels
        self.low_channels = low_channels
        self.high_channels = high_channels
        self.proj_in = MLP(registry, f"{name}.proj_in", [in_channels + low_channels, high_channels],
                           final_act=True)
        self.attn = VectorAttention(registry, f"{name}.attn", high_channels, pe)
        self.proj_out = MLP(registry, f"{name}.proj_out", [high_channels, high_channels], final_act=True)

    def expand(self, f_in2, f_l, pmap):
        return grid_unpool(self.proj_in(T.concat([f_in2, f_l], axis=-1)), pmap)

    def __call__(self, f_in2, f_l, f_h, pmap, positions_h, idx_h):
        return saub(f_in2, f_l, f_h, pmap, positions_h, idx_h, self)


def saub(f_in2, f_l, f_h, pmap, positions_h, idx_h, params):
    _check_upsample_inputs(f_in2, f_l, f_h, pmap)
    f_mid = params.expand(f_in2, f_l, pmap)
    g = skip_attention(f_h, f_mid, positions_h, idx_h, params.attn)
    return params.proj_out(g + f_h + f_mid)


class GUB:
    """Grid-unpooling upsampling: project, unpool, add the projected skip."""

    def __init__(self, registry, name, in_channels, low_channels, high_channels):
        self.proj = MLP(registry, f"{name}.proj", [in_channels, high_channels], final_act=True)
        self.proj_skip = MLP(registry, f"{name}.proj_skip", [high_channels, high_channels], final_act=True)

    def __call__(self, f_in2, f_l, f_h, pmap, positions_h, idx_h):
        _check_upsample_inputs(f_in2, f_l, f_h, pmap)
        return grid_unpool(self.proj(f_in2), pmap) + self.proj_skip(f_h)


def identity_map(n):
    """Pooling map sending every point to its own cell."""
    return PoolingMap(cell_of=np.arange(n), m=n, grid_size=0.0)


__all__ = [
    "GUB",
    "MaskConfig",
    "NeighborIndex",
    "PositionEncoding",
    "SAUB",
    "SMTB",
    "VectorAttention",
    "enhanced_position_encoding",
    "hard_mask",
    "identity_map",
    "pt_attention",
    "ptv2_attention",
    "saub",
    "score_difference",
    "skip_attention",
    "smtb",
    "smtransformer",
    "soft_mask",
]
