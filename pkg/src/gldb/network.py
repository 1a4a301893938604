"""Three-level multi-patch encoder-decoder around the global-local module.

The bottom level restores 4 image quadrants, the middle level 2 horizontal
halves, the top level the full frame; each level's decoder features are
merged and handed to the next level through cross attention. Every stage is
built from residual blocks of the form

    out = x + conv3x3( attention(h) + dynamic_conv(h) ),  h = conv3x3(x)

where decoder blocks attend back to the matching encoder stage. The top
level ends in a head convolution whose output is added to the blurred input,
so a freshly initialized network (zero head) is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv2d,
    narrow,
    relu,
    reshape,
    upsample_nearest2x,
)
from .attention import (
    AttentionParams,
    attention_forward,
    cross_attention_forward,
    default_width,
    init_attention_params,
)
from .dynconv import (
    DynConvParams,
    generate_kernels,
    gl_fuse,
    init_dynconv_params,
    pixel_adaptive_conv,
)

__all__ = [
    "NetworkConfig",
    "ConvParams",
    "BlockParams",
    "LevelParams",
    "NetParams",
    "init_params",
    "iter_named",
    "replace_named",
    "residual_block_forward",
    "split_patches",
    "merge_patches",
    "network_forward",
    "network_forward_batch",
]


@dataclass
class NetworkConfig:
    """Structural and width constants of the restoration network.

    channels is the uniform feature width (128 at full scale, 32 for the
    desk-scale test configuration). The structure is fixed: 3 levels, 3
    encoder stages (stem plus two stride-2 stages), 2 residual blocks per
    stage, 2 decoder upsampling stages.
    """

    channels: int = 128
    attn_width: int = 0  # 0 means derive from channels
    filter_size: int = 5
    levels: int = 3
    enc_stages: int = 3
    blocks_per_stage: int = 2
    down_stages: int = 2
    dec_up_stages: int = 2
    aux_loss: bool = False

    def __post_init__(self):
        if self.attn_width == 0:
            self.attn_width = default_width(self.channels)
        if self.levels != 3:
            raise ValueError("the hierarchy is fixed at 3 levels")
        if self.enc_stages != 3 or self.down_stages != 2 or self.dec_up_stages != 2:
            raise ValueError("encoder/decoder stage counts are fixed at 3/2/2")
        if self.channels < 1 or self.attn_width < 1:
            raise ValueError("channels and attn_width must be positive")
        if self.filter_size % 2 == 0 or self.filter_size < 1:
            raise ValueError("filter_size must be odd and positive")


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class BlockParams:
    pre: ConvParams
    attn: AttentionParams
    dyn: DynConvParams
    post: ConvParams


@dataclass
class LevelParams:
    stem: ConvParams
    inject: Optional[AttentionParams]
    enc1: list
    down1: ConvParams
    enc2: list
    down2: ConvParams
    enc3: list
    dec1: list
    up1: ConvParams
    dec2: list
    up2: ConvParams
    dec3: list
    head: Optional[ConvParams]


@dataclass
class NetParams:
    level3: LevelParams
    level2: LevelParams
    level1: LevelParams


# ---------------------------------------------------------------------------
# parameter tree walking


def iter_named(node, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) for every parameter, in a fixed order."""
    if isinstance(node, Tensor):
        yield prefix, node
    elif is_dataclass(node) and not isinstance(node, type):
        for f in fields(node):
            child = getattr(node, f.name)
            if child is None or isinstance(child, (int, float, bool, str)):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_named(child, name)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            yield from iter_named(child, f"{prefix}.{i}" if prefix else str(i))


def replace_named(node, mapping: dict, prefix: str = ""):
    """Assign tensors from `mapping` back into the parameter tree in place."""
    if is_dataclass(node) and not isinstance(node, type):
        for f in fields(node):
            child = getattr(node, f.name)
            if child is None or isinstance(child, (int, float, bool, str)):
                continue
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(child, Tensor):
                if name in mapping:
                    setattr(node, f.name, mapping[name])
            else:
                replace_named(child, mapping, name)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            name = f"{prefix}.{i}" if prefix else str(i)
            if isinstance(child, Tensor):
                if name in mapping:
                    node[i] = mapping[name]
            else:
                replace_named(child, mapping, name)
    return node


# ---------------------------------------------------------------------------
# initialization


def _conv_init(rng, cout, cin, k, dtype, zero=False) -> ConvParams:
    if zero:
        w = np.zeros((cout, cin, k, k), dtype=dtype)
    else:
        s = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-s, s, (cout, cin, k, k)).astype(dtype)
    return ConvParams(
        w=Tensor(w, requires_grad=True),
        b=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


def _block_init(rng, cfg: NetworkConfig, dtype, zero_start) -> BlockParams:
    c = cfg.channels
    return BlockParams(
        pre=_conv_init(rng, c, c, 3, dtype),
        attn=init_attention_params(c, cfg.attn_width, rng, dtype, zero_start),
        dyn=init_dynconv_params(c, c, cfg.filter_size, rng, dtype, zero_start),
        post=_conv_init(rng, c, c, 3, dtype),
    )


def _stage_init(rng, cfg, dtype, zero_start):
    return [_block_init(rng, cfg, dtype, zero_start) for _ in range(cfg.blocks_per_stage)]


def _level_init(rng, cfg, dtype, zero_start, with_inject, with_head) -> LevelParams:
    c = cfg.channels
    return LevelParams(
        stem=_conv_init(rng, c, 3, 3, dtype),
        inject=(
            init_attention_params(c, cfg.attn_width, rng, dtype, zero_start)
            if with_inject
            else None
        ),
        enc1=_stage_init(rng, cfg, dtype, zero_start),
        down1=_conv_init(rng, c, c, 3, dtype),
        enc2=_stage_init(rng, cfg, dtype, zero_start),
        down2=_conv_init(rng, c, c, 3, dtype),
        enc3=_stage_init(rng, cfg, dtype, zero_start),
        dec1=_stage_init(rng, cfg, dtype, zero_start),
        up1=_conv_init(rng, c, c, 3, dtype),
        dec2=_stage_init(rng, cfg, dtype, zero_start),
        up2=_conv_init(rng, c, c, 3, dtype),
        dec3=_stage_init(rng, cfg, dtype, zero_start),
        head=_conv_init(rng, 3, c, 3, dtype, zero=zero_start) if with_head else None,
    )


def init_params(
    config: NetworkConfig,
    seed: int,
    dtype=np.float32,
    zero_start: bool = True,
) -> NetParams:
    """Deterministic fresh parameters.

    Convolution weights are fan-in-scaled uniform. With zero_start (the
    training default) the decoder heads and the attention and kernel
    generators start at zero: the network is exactly the identity, maps are
    uniform and the dynamic modulation is 1. zero_start=False gives a fully
    random network for gradient checking.
    """
    rng = np.random.default_rng(seed)
    aux = config.aux_loss
    return NetParams(
        level3=_level_init(rng, config, dtype, zero_start, with_inject=False, with_head=aux),
        level2=_level_init(rng, config, dtype, zero_start, with_inject=True, with_head=aux),
        level1=_level_init(rng, config, dtype, zero_start, with_inject=True, with_head=True),
    )


# ---------------------------------------------------------------------------
# forward


def residual_block_forward(x, block: BlockParams, context=None) -> Tensor:
    """One residual block; decoder blocks pass the encoder stage as context."""
    h = conv2d(x, block.pre.w, block.pre.b, pad=1)
    if context is None:
        att = attention_forward(h, block.attn)
    else:
        att = cross_attention_forward(h, context, block.attn)
    field = generate_kernels(h, block.dyn)
    local = pixel_adaptive_conv(h, field, block.dyn)
    fused = gl_fuse(att, local)
    return add(x, conv2d(fused, block.post.w, block.post.b, pad=1))


def _run_stage(x, blocks, context=None):
    for block in blocks:
        x = residual_block_forward(x, block, context)
    return x


def _level_forward(x, lp: LevelParams, inject_ctx=None) -> Tensor:
    z = relu(conv2d(x, lp.stem.w, lp.stem.b, pad=1))
    if inject_ctx is not None:
        z = add(z, cross_attention_forward(z, inject_ctx, lp.inject))
    s1 = _run_stage(z, lp.enc1)
    z = relu(conv2d(s1, lp.down1.w, lp.down1.b, stride=2, pad=1))
    s2 = _run_stage(z, lp.enc2)
    z = relu(conv2d(s2, lp.down2.w, lp.down2.b, stride=2, pad=1))
    s3 = _run_stage(z, lp.enc3)

    d = _run_stage(s3, lp.dec1, context=s3)
    d = relu(conv2d(upsample_nearest2x(d), lp.up1.w, lp.up1.b, pad=1))
    d = _run_stage(d, lp.dec2, context=s2)
    d = relu(conv2d(upsample_nearest2x(d), lp.up2.w, lp.up2.b, pad=1))
    d = _run_stage(d, lp.dec3, context=s1)
    return d


# patch slicing, batched: level-3 quadrants and level-2 halves are stacked
# along the batch axis so all patches of a level run in one pass


def _split2_b(x):
    h = x.shape[2]
    return [narrow(x, 2, 0, h // 2), narrow(x, 2, h // 2, h // 2)]


def _merge2_b(x, groups: int):
    b = x.shape[0] // groups
    return concat([narrow(x, 0, i * b, b) for i in range(groups)], axis=2)


def _split4_b(x):
    h, w = x.shape[2], x.shape[3]
    top, bottom = narrow(x, 2, 0, h // 2), narrow(x, 2, h // 2, h // 2)
    return [
        narrow(top, 3, 0, w // 2),
        narrow(top, 3, w // 2, w // 2),
        narrow(bottom, 3, 0, w // 2),
        narrow(bottom, 3, w // 2, w // 2),
    ]


def _merge4_b(x):
    b = x.shape[0] // 4
    quads = [narrow(x, 0, i * b, b) for i in range(4)]
    top = concat([quads[0], quads[1]], axis=3)
    bottom = concat([quads[2], quads[3]], axis=3)
    return concat([top, bottom], axis=2)


def network_forward_batch(x, params: NetParams, config: NetworkConfig, return_aux=False):
    """Full three-level restoration of a (B, 3, H, W) batch.

    H and W must be divisible by 8 (quadrant split times two stride-2
    stages). Returns blurred + correction; with return_aux also the
    per-level auxiliary predictions (requires aux heads).
    """
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"network expects (B, 3, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 8 or w % 8:
        raise ShapeError(f"input extents {h}x{w} must be divisible by 8")

    f3 = _level_forward(concat(_split4_b(x), axis=0), params.level3)
    f3_full = _merge4_b(f3)

    halves = concat(_split2_b(x), axis=0)
    ctx2 = concat(_split2_b(f3_full), axis=0)
    f2 = _level_forward(halves, params.level2, inject_ctx=ctx2)
    f2_full = _merge2_b(f2, 2)

    f1 = _level_forward(x, params.level1, inject_ctx=f2_full)
    out = add(x, conv2d(f1, params.level1.head.w, params.level1.head.b, pad=1))
    if not return_aux:
        return out
    if params.level2.head is None or params.level3.head is None:
        raise ValueError("auxiliary outputs need aux_loss heads in the config")
    aux2 = add(x, conv2d(f2_full, params.level2.head.w, params.level2.head.b, pad=1))
    aux3 = add(x, conv2d(f3_full, params.level3.head.w, params.level3.head.b, pad=1))
    return out, [aux2, aux3]


def network_forward(blurred, params: NetParams, config: NetworkConfig) -> Tensor:
    """Single-image (3, H, W) wrapper around the batched forward."""
    if blurred.ndim != 3:
        raise ShapeError(f"network_forward expects (3, H, W), got {blurred.shape}")
    x = reshape(blurred, (1,) + tuple(blurred.shape))
    out = network_forward_batch(x, params, config)
    return reshape(out, blurred.shape)


# ---------------------------------------------------------------------------
# single-image patch ops (level semantics: 1 full frame, 2 halves, 4 quadrants)


def split_patches(img, level: int):
    """Slice a (C, H, W) image into the patch list of the given level."""
    if img.ndim != 3:
        raise ShapeError(f"split_patches expects (C, H, W), got {img.shape}")
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    _, h, w = img.shape
    if level == 1:
        return [img]
    if h % 2:
        raise ShapeError(f"level {level} split needs even height, got {h}")
    top = narrow(img, 1, 0, h // 2)
    bottom = narrow(img, 1, h // 2, h // 2)
    if level == 2:
        return [top, bottom]
    if w % 2:
        raise ShapeError(f"level 3 split needs even width, got {w}")
    return [
        narrow(top, 2, 0, w // 2),
        narrow(top, 2, w // 2, w // 2),
        narrow(bottom, 2, 0, w // 2),
        narrow(bottom, 2, w // 2, w // 2),
    ]


def merge_patches(patches, level: int) -> Tensor:
    """Inverse of split_patches; patch order is row-major."""
    counts = {1: 1, 2: 2, 3: 4}
    if level not in counts:
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    if len(patches) != counts[level]:
        raise ShapeError(
            f"level {level} merge needs {counts[level]} patches, got {len(patches)}"
        )
    if level == 1:
        return patches[0]
    if level == 2:
        if patches[0].shape != patches[1].shape:
            raise ShapeError("level 2 merge: half shapes differ")
        return concat(patches, axis=1)
    if len({tuple(p.shape) for p in patches}) != 1:
        raise ShapeError("level 3 merge: quadrant shapes differ")
    top = concat([patches[0], patches[1]], axis=2)
    bottom = concat([patches[2], patches[3]], axis=2)
    return concat([top, bottom], axis=1)
