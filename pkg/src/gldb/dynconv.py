"""Pixel-adaptive convolution, the local branch of the global-local module.

A 1x1 generator turns the feature map into a per-pixel k*k modulation
kernel; the shared convolution weights are rescaled by that kernel at every
tap before summation. With the modulation identically 1 the operator
reduces exactly to the plain convolution, so the standard layer sits inside
the hypothesis space at zero generator output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    as_tensor,
    conv2d,
    reshape,
    tanh,
    _col2im,
    _conv_gemm,
    _im2col,
    _pad_hw,
    _result,
)

__all__ = [
    "DynConvParams",
    "AdaptiveKernelField",
    "init_dynconv_params",
    "generate_kernels",
    "pixel_adaptive_conv",
    "gl_fuse",
]


@dataclass
class DynConvParams:
    """Shared conv weights plus the per-pixel kernel generator.

    w: (Cout, Cin, k, k) shared weights, b: (Cout,) bias.
    gen_w: (k*k, Cin) and gen_b: (k*k,) form the 1x1 generator whose tanh
    output (shifted to (0, 2)) modulates the shared weights per pixel.
    """

    w: Tensor
    b: Tensor
    gen_w: Tensor
    gen_b: Tensor

    @property
    def size(self) -> int:
        return self.w.shape[-1]


@dataclass
class AdaptiveKernelField:
    """Per-pixel modulation kernels, one k*k stencil per spatial position.

    values: (k*k, H, W) or batched (B, k*k, H, W), offsets enumerated
    row-major over the stencil.
    """

    values: Tensor

    @property
    def size(self) -> int:
        return int(round(np.sqrt(self.values.shape[-3])))


def init_dynconv_params(
    cin: int,
    cout: int,
    k: int,
    rng: np.random.Generator,
    dtype=np.float32,
    zero_start: bool = True,
) -> DynConvParams:
    """Fresh parameters; zero_start zeroes the generator so modulation is 1."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"filter size must be odd and positive, got {k}")
    s = 1.0 / np.sqrt(cin * k * k)
    w = Tensor(rng.uniform(-s, s, (cout, cin, k, k)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    if zero_start:
        gw = np.zeros((k * k, cin), dtype=dtype)
    else:
        sg = 1.0 / np.sqrt(cin)
        gw = rng.uniform(-sg, sg, (k * k, cin)).astype(dtype)
    return DynConvParams(
        w=w,
        b=b,
        gen_w=Tensor(gw, requires_grad=True),
        gen_b=Tensor(np.zeros(k * k, dtype=dtype), requires_grad=True),
    )


def generate_kernels(x, params: DynConvParams) -> AdaptiveKernelField:
    """Content-dependent modulation field, 1 + tanh of a 1x1 projection.

    Values lie strictly inside (0, 2); zero generator weights give the
    identity modulation everywhere.
    """
    squeeze = x.ndim == 3
    xt = reshape(x, (1,) + tuple(x.shape)) if squeeze else x
    if xt.ndim != 4:
        raise ShapeError(f"generate_kernels expects (C, H, W) or (B, C, H, W), got {x.shape}")
    if xt.shape[1] != params.gen_w.shape[1]:
        raise ShapeError(
            f"generate_kernels: input has {xt.shape[1]} channels, "
            f"generator expects {params.gen_w.shape[1]}"
        )
    kk = params.gen_w.shape[0]
    gw = reshape(params.gen_w, (kk, params.gen_w.shape[1], 1, 1))
    logits = conv2d(xt, gw, params.gen_b)
    field = add(tanh(logits), 1.0)
    if squeeze:
        field = reshape(field, field.shape[1:])
    return AdaptiveKernelField(values=field)


def _pac_core(x: Tensor, kfield: Tensor, w: Tensor, b: Tensor) -> Tensor:
    bsz, cin, h, wdt = x.shape
    cout, _, k, _ = w.shape
    kk = k * k
    hw = h * wdt
    pad = (k - 1) // 2
    wmat = w.data.reshape(cout, cin * kk)

    def modulated_col(xd, kd):
        col = _im2col(_pad_hw(xd, pad), k, 1, h, wdt)  # (B, Cin*kk, HW)
        col5 = col.reshape(bsz, cin, kk, hw)
        kmod = kd.reshape(bsz, 1, kk, hw)
        return col5, kmod, (col5 * kmod).reshape(bsz, cin * kk, hw)

    _, _, mod = modulated_col(x.data, kfield.data)
    out = _conv_gemm(mod, wmat, b.data, bsz, h, wdt)
    del mod  # rebuilt in backward; keeps forward memory flat

    def backward(g):
        g3 = g.reshape(bsz, cout, hw)
        col5, kmod, mod = modulated_col(x.data, kfield.data)
        db = g3.sum(axis=(0, 2))
        dw = np.matmul(g3, mod.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dmod5 = np.matmul(wmat.T, g3).reshape(bsz, cin, kk, hw)
        dk = (dmod5 * col5).sum(axis=1).reshape(kfield.shape)
        dcol = (dmod5 * kmod).reshape(bsz, cin * kk, hw)
        dx = _col2im(dcol, x.shape, k, 1, pad)
        return dx, dk, dw, db

    return _result(out, (x, kfield, w, b), backward)


def pixel_adaptive_conv(x, kernels: AdaptiveKernelField, params: DynConvParams) -> Tensor:
    """Convolve with the shared weights modulated per pixel.

    Output at pixel i, channel co is
    sum over offsets o of kernels[o, i] * sum over ci of w[co, ci, o] * x[ci, i + o],
    plus bias, with zero padding of (k-1)//2 so extents are preserved.
    With kernels identically 1 this matches conv2d exactly (same summation
    order, same GEMM).
    """
    x = as_tensor(x)
    kf = kernels.values
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + tuple(x.shape))
        if kf.ndim == 3:
            kf = reshape(kf, (1,) + tuple(kf.shape))
    if x.ndim != 4 or kf.ndim != 4:
        raise ShapeError(
            f"pixel_adaptive_conv: got input {x.shape} and kernel field {kf.shape}"
        )
    cout, cin, k, k2 = params.w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"pixel_adaptive_conv: kernel must be square odd, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"pixel_adaptive_conv: input has {x.shape[1]} channels, weights expect {cin}"
        )
    if kf.shape[1] != k * k:
        raise ShapeError(
            f"pixel_adaptive_conv: kernel field has {kf.shape[1]} offsets, "
            f"filter size {k} needs {k * k}"
        )
    if kf.shape[0] != x.shape[0] or kf.shape[2:] != x.shape[2:]:
        raise ShapeError(
            f"pixel_adaptive_conv: kernel field extents {kf.shape} do not "
            f"match input {x.shape}"
        )
    out = _pac_core(x, kf, params.w, params.b)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def gl_fuse(x_att, x_dyn) -> Tensor:
    """Sum-fuse the global (attention) and local (dynamic conv) branches."""
    if x_att.shape != x_dyn.shape:
        raise ShapeError(
            f"gl_fuse: branch shapes differ, {x_att.shape} vs {x_dyn.shape}"
        )
    return add(x_att, x_dyn)
