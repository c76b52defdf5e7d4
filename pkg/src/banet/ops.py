"""Differentiable network operations: convolutions, normalization, activations.

Each op computes its output in plain numpy / compiled kernels and, when a
Tape is active, registers a closure that maps the upstream gradient onto its
inputs.  Parameters are plain Tensors bundled into small dataclasses.

Weight layout is always (c_out, c_in, kd, kh, kw) — also for the transposed
convolution, whose c_out axis is the layer's *output* channel count.  With
that convention a stride-2 convolution and a stride-2 transposed convolution
whose weights are related by swapaxes(0, 1) are exact adjoints of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from . import kernels
from .autodiff import Tensor, accumulate_grad, record_op

_KERNEL3 = (3, 3, 3)
_PAD1 = (1, 1, 1)
_STRIDE1 = (1, 1, 1)
_STRIDE2 = (2, 2, 2)


@dataclass
class ConvParams:
    """Learned state of one convolution layer.

    weight: (c_out, c_in, kd, kh, kw); bias: (1, c_out, 1, 1, 1).
    """
    weight: Tensor
    bias: Tensor
    stride: tuple[int, int, int] = _STRIDE1
    padding: tuple[int, int, int] = _PAD1

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]


@dataclass
class InstanceNormParams:
    """Affine parameters of instance normalization; shapes (1, c, 1, 1, 1)."""
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5


def he_normal_conv(rng: np.random.Generator, c_out: int, c_in: int,
                   kernel: tuple[int, int, int] = _KERNEL3,
                   stride: tuple[int, int, int] = _STRIDE1,
                   padding: tuple[int, int, int] = _PAD1,
                   dtype=np.float32) -> ConvParams:
    """Convolution parameters with He-normal weights (std = sqrt(2/fan_in)), zero bias."""
    fan_in = c_in * prod(kernel)
    std = sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(c_out, c_in) + tuple(kernel)).astype(dtype)
    b = np.zeros((1, c_out, 1, 1, 1), dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      tuple(stride), tuple(padding))


def unit_norm_params(c: int, dtype=np.float32) -> InstanceNormParams:
    """Instance-norm parameters at identity: gamma=1, beta=0."""
    g = np.ones((1, c, 1, 1, 1), dtype=dtype)
    b = np.zeros((1, c, 1, 1, 1), dtype=dtype)
    return InstanceNormParams(Tensor(g, requires_grad=True), Tensor(b, requires_grad=True))


def init_params(shape_spec, seed: int):
    """Seeded parameter initialization.

    A 5-tuple (c_out, c_in, kd, kh, kw) yields ConvParams with He-normal
    weights and zero bias; a bare channel count yields identity
    InstanceNormParams.  Same seed, same parameters, bit for bit.
    """
    rng = np.random.default_rng(seed)
    if isinstance(shape_spec, int):
        return unit_norm_params(shape_spec)
    shape = tuple(shape_spec)
    if len(shape) != 5:
        raise ValueError(f"init_params: expected channel count or 5-tuple, got {shape_spec!r}")
    c_out, c_in = shape[:2]
    return he_normal_conv(rng, c_out, c_in, kernel=shape[2:])


def _pad_spatial(x: np.ndarray, padding: tuple[int, int, int]) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return np.ascontiguousarray(x)
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, pd:pd + d, ph:ph + h, pw:pw + w] = x
    return out


def _bias_vec(params: ConvParams) -> np.ndarray:
    return params.bias.data.reshape(params.c_out)


def _sum_bias_grad(g: np.ndarray) -> np.ndarray:
    c = g.shape[1]
    return np.sum(g, axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype).reshape(1, c, 1, 1, 1)


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """3-D convolution.  Fast compiled paths cover kernel 3, padding 1,
    stride 1 or 2; anything else (odd kernels) takes a generic numpy path."""
    weight, bias = params.weight, params.bias
    kernel = weight.shape[2:]
    if x.shape[1] != params.c_in:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {params.c_in}")
    if x.dtype != weight.dtype:
        raise ValueError(f"conv3d: dtype mismatch {x.dtype} vs {weight.dtype}")
    if kernel == _KERNEL3 and params.padding == _PAD1 and params.stride in (_STRIDE1, _STRIDE2):
        return _conv3d_fast(x, params)
    return _conv3d_generic(x, params)


def _conv3d_fast(x: Tensor, params: ConvParams) -> Tensor:
    weight, bias = params.weight, params.bias
    strided = params.stride == _STRIDE2
    if strided and any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"conv3d: stride-2 needs even spatial dims, got {x.shape[2:]}")
    xp = _pad_spatial(x.data, _PAD1)
    wd = np.ascontiguousarray(weight.data)
    if strided:
        y = kernels.conv3_s2(xp, wd, _bias_vec(params))
    else:
        y = kernels.conv3_s1(xp, wd, _bias_vec(params))
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        g = np.ascontiguousarray(g)
        if weight.requires_grad:
            dw = kernels.conv3_s2_dw(xp, g) if strided else kernels.conv3_s1_dw(xp, g)
            accumulate_grad(weight, dw, owned=True)
        if bias.requires_grad:
            accumulate_grad(bias, _sum_bias_grad(g), owned=True)
        if x.requires_grad:
            if strided:
                dxp = kernels.conv3_s2_dx(g, wd, *xp.shape[2:])
                dx = dxp[:, :, 1:-1, 1:-1, 1:-1]
            else:
                # Input gradient of a same-padded conv is itself a same-padded
                # conv of the gradient, with channel-swapped, spatially
                # flipped weights.
                wt = np.ascontiguousarray(
                    weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = _pad_spatial(g, _PAD1)
                dx = kernels.conv3_s1(gp, wt, np.zeros(params.c_in, dtype=g.dtype))
            accumulate_grad(x, dx, owned=True)

    return record_op("conv3d", out, (x, weight, bias), bw)


def _conv3d_generic(x: Tensor, params: ConvParams) -> Tensor:
    weight, bias = params.weight, params.bias
    kd, kh, kw = weight.shape[2:]
    sd, sh, sw = params.stride
    xp = _pad_spatial(x.data, params.padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    y = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3)) + bias.data
    out = Tensor(y)
    do, ho, wo = y.shape[2:]

    def bw(g: np.ndarray) -> None:
        if weight.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            accumulate_grad(weight, dw, owned=True)
        if bias.requires_grad:
            accumulate_grad(bias, _sum_bias_grad(g), owned=True)
        if x.requires_grad:
            t = np.tensordot(g, weight.data, axes=([1], [0]))  # (N,Do,Ho,Wo,Ci,kd,kh,kw)
            dxp = np.zeros_like(xp)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        dxp[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, c:c + sw * wo:sw] += \
                            t[..., a, b, c].transpose(0, 4, 1, 2, 3)
            pd, ph, pw = params.padding
            n, ch, d, h, w = x.shape
            accumulate_grad(x, dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w], owned=True)

    return record_op("conv3d", out, (x, weight, bias), bw)


def transposed_conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """Stride-2 transposed convolution with a 2x2x2 kernel: doubles each
    spatial dim.  Each input voxel paints one non-overlapping 2x2x2 block."""
    weight, bias = params.weight, params.bias
    if weight.shape[2:] != (2, 2, 2) or params.stride != _STRIDE2:
        raise ValueError("transposed_conv3d supports kernel (2,2,2), stride (2,2,2) only")
    if x.shape[1] != params.c_in:
        raise ValueError(f"transposed_conv3d: input has {x.shape[1]} channels, "
                         f"weight expects {params.c_in}")
    n, _, d, h, w = x.shape
    c_out = params.c_out
    t = np.tensordot(x.data, weight.data, axes=([1], [1]))  # (N,D,H,W,Co,2,2,2)
    y = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, c_out, 2 * d, 2 * h, 2 * w)
    y = np.ascontiguousarray(y) + bias.data
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        gb = g.reshape(n, c_out, d, 2, h, 2, w, 2)
        if weight.requires_grad:
            dw = np.tensordot(gb, x.data, axes=([0, 2, 4, 6], [0, 2, 3, 4]))
            accumulate_grad(weight, dw.transpose(0, 4, 1, 2, 3), owned=True)
        if bias.requires_grad:
            accumulate_grad(bias, _sum_bias_grad(g), owned=True)
        if x.requires_grad:
            dx = np.tensordot(gb, weight.data, axes=([1, 3, 5, 7], [0, 2, 3, 4]))
            accumulate_grad(x, np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3)), owned=True)

    return record_op("transposed_conv3d", out, (x, weight, bias), bw)


def instance_norm(x: Tensor, params: InstanceNormParams) -> Tensor:
    """Standardize each (sample, channel) over its spatial extent, then affine."""
    gamma, beta = params.gamma, params.beta
    c = x.shape[1]
    if gamma.shape[1] != c:
        raise ValueError(f"instance_norm: {c} channels vs gamma {gamma.shape[1]}")
    gv = gamma.data.reshape(c)
    bv = beta.data.reshape(c)
    y, xhat, inv_std = kernels.instance_norm_fwd(
        np.ascontiguousarray(x.data), gv, bv, params.epsilon)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        dx, dgamma, dbeta = kernels.instance_norm_bwd(
            np.ascontiguousarray(g), xhat, inv_std, gv)
        accumulate_grad(x, dx, owned=True)
        accumulate_grad(gamma, dgamma.reshape(1, c, 1, 1, 1), owned=True)
        accumulate_grad(beta, dbeta.reshape(1, c, 1, 1, 1), owned=True)

    return record_op("instance_norm", out, (x, gamma, beta), bw)


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    slope = x.dtype.type(negative_slope)
    xd = np.ascontiguousarray(x.data)
    out = Tensor(kernels.leaky_relu_fwd(xd, slope))

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, kernels.leaky_relu_bwd(xd, np.ascontiguousarray(g), slope),
                        owned=True)

    return record_op("leaky_relu", out, (x,), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across the channel axis, stabilized by the per-voxel max."""
    z = x.data - np.max(x.data, axis=1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=1, keepdims=True)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        dot = np.sum(g * y, axis=1, keepdims=True)
        accumulate_grad(x, y * (g - dot), owned=True)

    return record_op("softmax_channels", out, (x,), bw)
