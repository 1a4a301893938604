"""Factorized global attention.

The module gathers image-wide context in linear time: a small cluster of
spatial weightings pools the feature map into per-slot summaries, a channel
gate rescores the summary channels, and per-pixel selector weights
redistribute the summaries back onto the pixel grid. No pixel-by-pixel
(HW x HW) similarity matrix is ever materialized; the cost of a forward
pass is O(HW * C * width).

The cross variant draws the spatial weightings (and the pooled content)
from a context map while the per-pixel selectors come from the query map,
which is how decoder blocks look back at encoder features and how lower
levels of the patch hierarchy feed higher ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    matmul,
    mul,
    permute,
    reduce,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_axis,
    swap_last2,
    _tracker,
)

__all__ = [
    "AttentionParams",
    "AttentionMaps",
    "gate_bottleneck",
    "default_width",
    "init_attention_params",
    "build_attention_maps",
    "aggregate_global",
    "channel_gate",
    "distribute",
    "attention_forward",
    "cross_attention_forward",
    "naive_attention_oracle",
]


def default_width(channels: int) -> int:
    """Default number of attention slots for a given channel count."""
    return max(channels // 8, 4)


def gate_bottleneck(channels: int) -> int:
    return max(channels // 4, 4)


@dataclass
class AttentionParams:
    """Learnable weights of one attention module.

    spatial_w and selector_w are 1x1 projections (width, C) generating the
    per-slot spatial weightings and the per-pixel selector logits. gate_w1
    and gate_w2 form the two-layer channel-gate bottleneck.
    """

    spatial_w: Tensor
    selector_w: Tensor
    gate_w1: Tensor
    gate_w2: Tensor

    @property
    def width(self) -> int:
        return self.spatial_w.shape[0]

    @property
    def channels(self) -> int:
        return self.spatial_w.shape[1]


@dataclass
class AttentionMaps:
    """The three maps produced for one input.

    spatial: (width, HW), each row is a distribution over pixels.
    selector: (width, HW), each column is a distribution over slots.
    gate: (C,), per-channel factors in (0, 1).
    """

    spatial: Tensor
    selector: Tensor
    gate: Tensor


def init_attention_params(
    channels: int,
    width: int,
    rng: np.random.Generator,
    dtype=np.float32,
    zero_start: bool = True,
) -> AttentionParams:
    """Fresh attention weights.

    With zero_start the map projections and the gate output layer are
    zeroed, so the module starts from uniform maps and a constant gate of
    0.5; the gate input layer stays random so the gate can start learning
    as soon as its output layer moves.
    """
    if width < 1:
        raise ValueError(f"attention width must be >= 1, got {width}")
    cb = gate_bottleneck(channels)

    def uniform(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-s, s, shape).astype(dtype), requires_grad=True)

    def zeroed(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    make = (lambda s, f: zeroed(s)) if zero_start else uniform
    return AttentionParams(
        spatial_w=make((width, channels), channels),
        selector_w=make((width, channels), channels),
        gate_w1=uniform((cb, channels), channels),
        gate_w2=make((channels, cb), cb),
    )


# ---------------------------------------------------------------------------
# stages
#
# Every stage below works on flattened feature maps with an optional batch
# axis: (C, HW) or (B, C, HW). The math is identical either way.


def _check_channels(x, params: AttentionParams, op: str):
    if x.shape[-2] != params.channels:
        raise ShapeError(
            f"{op}: input has {x.shape[-2]} channels, "
            f"params expect {params.channels}"
        )


def _spatial_map(xf, params):
    # rows: one distribution over pixels per slot
    return softmax_axis(matmul(params.spatial_w, xf), axis=-1)


def _selector_map(xf, params):
    # columns: one distribution over slots per pixel
    return softmax_axis(matmul(params.selector_w, xf), axis=-2)


def aggregate_global(x, q) -> Tensor:
    """Pool pixel features with each spatial weighting.

    x: (..., C, HW), q: (..., width, HW) with normalized rows. Column k of
    the (..., C, width) result is the q_k-weighted average of the pixel
    features.
    """
    if x.shape[-1] != q.shape[-1]:
        raise ShapeError(
            f"aggregate_global: pixel counts differ, {x.shape} vs {q.shape}"
        )
    return matmul(x, swap_last2(q))


def channel_gate(xbar, params: AttentionParams):
    """Score summary channels and rescale them.

    Returns (gate, gated) where gate has entries in (0, 1) and
    gated[..., c, k] == gate[..., c] * xbar[..., c, k].
    """
    c = xbar.shape[-2]
    if c != params.channels:
        raise ShapeError(
            f"channel_gate: {c} channels vs params {params.channels}"
        )
    lead = xbar.shape[:-2]
    m = reduce(xbar, axis=-1, mode="mean")
    flat = reshape(m, (-1, c))
    hidden = relu(matmul(flat, permute(params.gate_w1, (1, 0))))
    gate_flat = sigmoid(matmul(hidden, permute(params.gate_w2, (1, 0))))
    gate = reshape(gate_flat, lead + (c,))
    gated = mul(xbar, reshape(gate, lead + (c, 1)))
    return gate, gated


def distribute(gated, p) -> Tensor:
    """Average the gated summaries under each pixel's selector weights.

    gated: (..., C, width); p: (..., width, HW) with normalized columns.
    Output column j is mean_k of p[k, j] * gated[:, k], the 1/width factor
    included.
    """
    width = p.shape[-2]
    if gated.shape[-1] != width:
        raise ShapeError(
            f"distribute: slot counts differ, {gated.shape} vs {p.shape}"
        )
    return scale(matmul(gated, p), 1.0 / width)


def build_attention_maps(x, params: AttentionParams) -> AttentionMaps:
    """All three maps for a (C, H, W) input."""
    _check_channels(reshape(x, (x.shape[0], -1)), params, "build_attention_maps")
    xf = reshape(x, (x.shape[0], -1))
    q = _spatial_map(xf, params)
    p = _selector_map(xf, params)
    gate, _ = channel_gate(aggregate_global(xf, q), params)
    return AttentionMaps(spatial=q, selector=p, gate=gate)


def _forward_flat(query_f, context_f, params: AttentionParams) -> Tensor:
    q = _spatial_map(context_f, params)
    p = _selector_map(query_f, params)
    xbar = aggregate_global(context_f, q)
    _, gated = channel_gate(xbar, params)
    return distribute(gated, p)


def _flatten_spatial(x):
    if x.ndim == 3:
        c, h, w = x.shape
        return reshape(x, (c, h * w))
    if x.ndim == 4:
        b, c, h, w = x.shape
        return reshape(x, (b, c, h * w))
    raise ShapeError(f"attention expects (C, H, W) or (B, C, H, W), got {x.shape}")


def attention_forward(x, params: AttentionParams) -> Tensor:
    """Global attention over one feature map (self variant).

    Accepts (C, H, W) or batched (B, C, H, W); output shape equals input
    shape. Peak auxiliary memory grows linearly in HW.
    """
    xf = _flatten_spatial(x)
    _check_channels(xf, params, "attention_forward")
    return reshape(_forward_flat(xf, xf, params), x.shape)


def cross_attention_forward(x_query, x_context, params: AttentionParams) -> Tensor:
    """Attention whose pooled content comes from a separate context map.

    Spatial weightings and the pooled summaries are derived from x_context;
    the per-pixel selectors come from x_query. With x_query == x_context
    this is exactly attention_forward.
    """
    if x_query.shape != x_context.shape:
        raise ShapeError(
            f"cross attention: query shape {x_query.shape} differs from "
            f"context shape {x_context.shape}"
        )
    qf = _flatten_spatial(x_query)
    cf = _flatten_spatial(x_context)
    _check_channels(qf, params, "cross_attention_forward")
    return reshape(_forward_flat(qf, cf, params), x_query.shape)


# ---------------------------------------------------------------------------
# quadratic oracle


def naive_attention_oracle(x, maps: AttentionMaps) -> Tensor:
    """Per-pixel quadratic recomputation of the attention output.

    For every output pixel j this recombines the spatial weightings under
    pixel j's selector into a fresh weighting over all pixels and pools the
    whole feature map with it, doing O(HW) work per pixel (O(HW^2) total)
    and never reusing the factorized intermediates. Runs in float64.
    """
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = np.asarray(maps.spatial.data, dtype=np.float64)
    p = np.asarray(maps.selector.data, dtype=np.float64)
    gate = np.asarray(maps.gate.data, dtype=np.float64)
    if xd.ndim != 2:
        raise ShapeError(f"oracle expects flattened (C, HW) input, got {xd.shape}")
    c, hw = xd.shape
    width = q.shape[0]
    tracker = _tracker()
    out = np.empty((c, hw), dtype=np.float64)
    qt = q.T
    for j in range(hw):
        weights = qt @ p[:, j]  # weighting over all pixels for this output
        pooled = xd @ weights
        out[:, j] = gate * pooled / width
        if tracker is not None:
            tracker.add(hw + c)
    return Tensor(out)
