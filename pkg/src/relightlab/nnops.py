"""Convolution, pooling, reshuffle, resampling, and batch normalization.

All operations follow the (batch, channel, height, width) layout and are
registered on the active tape.  Convolution runs as im2col plus one
matmul; its backward pass uses k*k strided slice-adds so accumulation
order is fixed and runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor, active_tape, _tracked, _check_finite, _trace_mask

__all__ = [
    "conv2d",
    "pool",
    "pixel_reshuffle",
    "resample",
    "normalize_batch",
    "RunningStats",
    "CONV_KERNEL_SIZES",
]

# kernel sizes used by the architecture plus the 11x11 SSIM window
CONV_KERNEL_SIZES = (1, 3, 7, 11)


def _conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int = 1) -> int:
    k_eff = dilation * (k - 1) + 1
    return (n + 2 * pad - k_eff) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, dilation: int = 1):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = _conv_out_size(h, k, stride, pad, dilation)
    wo = _conv_out_size(w, k, stride, pad, dilation)
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, k, k, ho, wo),
        (s[0], s[1], s[2] * dilation, s[3] * dilation, s[2] * stride, s[3] * stride),
    )
    return win.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im_add(gcols: np.ndarray, xshape, k: int, stride: int, pad: int,
                dilation: int = 1) -> np.ndarray:
    b, c, h, w = xshape
    ho = _conv_out_size(h, k, stride, pad, dilation)
    wo = _conv_out_size(w, k, stride, pad, dilation)
    acc = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gc = gcols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            oi, oj = i * dilation, j * dilation
            acc[:, :, oi:oi + stride * ho:stride, oj:oj + stride * wo:stride] += gc[:, :, i, j]
    if pad:
        acc = acc[:, :, pad:pad + h, pad:pad + w]
    return acc


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, zero_pad: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,k,k) and zero padding.

    `dilation` spaces the kernel taps; it exists for the dilated-inception
    attention branches and defaults to the dense case.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d tensors, got {x.shape} and {weight.shape}")
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k not in CONV_KERNEL_SIZES:
        raise ValueError(f"conv2d kernel must be square with size in {CONV_KERNEL_SIZES}, got {k}x{k2}")
    b, cin, h, w = x.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input has {cin} channels (shape {tuple(x.shape)}) "
            f"but weight expects {cin_w} (shape {tuple(weight.shape)})"
        )
    ho = _conv_out_size(h, k, stride, zero_pad, dilation)
    wo = _conv_out_size(w, k, stride, zero_pad, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty for input {h}x{w}, k={k}, stride={stride}, "
            f"pad={zero_pad}, dilation={dilation}"
        )
    pointwise = k == 1 and stride == 1 and zero_pad == 0
    if pointwise:
        cols = x.data.reshape(b, cin, h * w)
    else:
        cols, ho, wo = _im2col(x.data, k, stride, zero_pad, dilation)
    out_data = (weight.data.reshape(cout, -1) @ cols).reshape(b, cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out_data += bias.data.reshape(1, cout, 1, 1)
    _check_finite("conv2d", out_data)
    out = Tensor(out_data)
    tape = active_tape()
    parents = (x, weight) if bias is None else (x, weight, bias)
    if tape is not None and _tracked(*parents):
        xshape = x.data.shape

        def bwd(g):
            gy = g.reshape(b, cout, ho * wo)
            # weight grad: contract gy with the input columns over (batch, position)
            gy2 = np.ascontiguousarray(gy.transpose(1, 0, 2)).reshape(cout, -1)
            cols2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
            weight.accumulate_grad((gy2 @ cols2.T).reshape(weight.data.shape))
            gcols = weight.data.reshape(cout, -1).T @ gy  # (B, C*k*k, L)
            if pointwise:
                x.accumulate_grad(gcols.reshape(xshape))
            else:
                x.accumulate_grad(_col2im_add(gcols, xshape, k, stride, zero_pad, dilation))
            if bias is not None:
                bias.accumulate_grad(gy.sum(axis=(0, 2)))

        tape.record("conv2d", out, parents, bwd)
    return out


def pool(kind: str, x: Tensor, k: int, stride: Optional[int] = None,
         pad: int = 0) -> Tensor:
    """Window pooling: 'max', 'avg', or 'global_avg' (whole map to 1x1)."""
    if x.data.ndim != 4:
        raise ValueError(f"pool expects a 4-d tensor, got {x.shape}")
    b, c, h, w = x.shape
    if kind == "global_avg":
        out_data = x.data.mean(axis=(2, 3), keepdims=True)
        out = Tensor(out_data)
        tape = active_tape()
        if tape is not None and _tracked(x):
            inv = 1.0 / (h * w)

            def bwd(g):
                x.accumulate_grad(np.broadcast_to(g * inv, x.data.shape).copy())

            tape.record("global_avg_pool", out, (x,), bwd)
        return out

    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    stride = k if stride is None else stride
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"pool window {k} exceeds spatial extent {h}x{w} (pad {pad})")
    xd = x.data
    if pad:
        fill = -np.inf if kind == "max" else 0.0
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    hp, wp = xd.shape[2], xd.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd, (b, c, ho, wo, k, k),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
    )
    flat = win.reshape(b, c, ho, wo, k * k)
    if kind == "avg":
        out_data = flat.mean(axis=4)
    else:
        out_data = flat.max(axis=4)
        _trace_mask(flat.argmax(axis=4))
    out = Tensor(np.ascontiguousarray(out_data))
    tape = active_tape()
    if tape is not None and _tracked(x):
        if kind == "max":
            argmax = flat.argmax(axis=4)  # first maximum wins ties

        def bwd(g):
            acc = np.zeros((b, c, hp, wp), dtype=g.dtype)
            if kind == "avg":
                share = g / (k * k)
                for i in range(k):
                    for j in range(k):
                        acc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
            else:
                for idx in range(k * k):
                    mask = argmax == idx
                    if not mask.any():
                        continue
                    i, j = divmod(idx, k)
                    acc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * mask
            if pad:
                acc = acc[:, :, pad:pad + h, pad:pad + w]
            x.accumulate_grad(acc)

        tape.record(f"{kind}_pool", out, (x,), bwd)
    return out


def pixel_reshuffle(direction: str, x: Tensor, r: int) -> Tensor:
    """Lossless depth<->space rearrangement by factor r.

    'unshuffle': (B,C,H,W) -> (B,C*r*r,H/r,W/r); 'shuffle' is the exact
    inverse.  Pure permutation, so the gradient is the inverse move.
    """
    if x.data.ndim != 4:
        raise ValueError(f"pixel_reshuffle expects a 4-d tensor, got {x.shape}")
    if r < 1:
        raise ValueError("r must be >= 1")
    b, c, h, w = x.shape
    if direction == "unshuffle":
        if h % r or w % r:
            raise ValueError(f"unshuffle needs H,W divisible by r={r}, got {h}x{w}")
        out_data = (
            x.data.reshape(b, c, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, c * r * r, h // r, w // r)
        )
    elif direction == "shuffle":
        if c % (r * r):
            raise ValueError(f"shuffle needs C divisible by r^2={r * r}, got C={c}")
        out_data = (
            x.data.reshape(b, c // (r * r), r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, c // (r * r), h * r, w * r)
        )
    else:
        raise ValueError(f"unknown pixel_reshuffle direction {direction!r}")
    out = Tensor(np.ascontiguousarray(out_data))
    tape = active_tape()
    if tape is not None and _tracked(x):
        inverse = "shuffle" if direction == "unshuffle" else "unshuffle"

        def bwd(g):
            x.accumulate_grad(_reshuffle_data(inverse, g, r))

        tape.record(f"pixel_{direction}", out, (x,), bwd)
    return out


def _reshuffle_data(direction: str, d: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = d.shape
    if direction == "unshuffle":
        return (
            d.reshape(b, c, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, c * r * r, h // r, w // r)
        )
    return (
        d.reshape(b, c // (r * r), r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c // (r * r), h * r, w * r)
    )


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in // n_out).astype(np.intp)


def resample(kind: str, x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Spatial resize: 'nearest_up' (differentiable) or 'bicubic'
    (Catmull-Rom, inference only)."""
    if x.data.ndim != 4:
        raise ValueError(f"resample expects a 4-d tensor, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    b, c, h, w = x.shape
    if kind == "nearest_up":
        rows = _nearest_index(out_h, h)
        cols = _nearest_index(out_w, w)
        out_data = np.ascontiguousarray(x.data[:, :, rows][:, :, :, cols])
        out = Tensor(out_data)
        tape = active_tape()
        if tape is not None and _tracked(x):

            def bwd(g):
                acc = np.zeros_like(x.data)
                np.add.at(acc, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
                x.accumulate_grad(acc)

            tape.record("nearest_up", out, (x,), bwd)
        return out

    if kind == "bicubic":
        if active_tape() is not None and _tracked(x):
            raise ValueError("bicubic resampling has no gradient; use it outside a recorded graph")
        return Tensor(bicubic_resize(x.data, out_h, out_w))

    raise ValueError(f"unknown resample kind {kind!r}")


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Cubic convolution weights for offsets (1+t, t, 1-t, 2-t), a = -0.5."""
    a = -0.5

    def k(s):
        s = np.abs(s)
        w = np.where(
            s <= 1,
            (a + 2) * s ** 3 - (a + 3) * s ** 2 + 1,
            np.where(s < 2, a * s ** 3 - 5 * a * s ** 2 + 8 * a * s - 4 * a, 0.0),
        )
        return w

    return np.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], axis=0)


def _bicubic_axis(d: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = d.shape[axis]
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(np.intp)
    t = pos - base
    wts = _catmull_rom_weights(t)  # (4, n_out)
    out = np.zeros(d.shape[:axis] + (n_out,) + d.shape[axis + 1:], dtype=d.dtype)
    for tap in range(4):
        idx = np.clip(base - 1 + tap, 0, n_in - 1)
        sl = np.take(d, idx, axis=axis)
        shape = [1] * d.ndim
        shape[axis] = n_out
        out += sl * wts[tap].reshape(shape).astype(d.dtype)
    return out


def bicubic_resize(d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize of a (..., H, W) array, edges clamped."""
    d = _bicubic_axis(d, out_h, axis=d.ndim - 2)
    d = _bicubic_axis(d, out_w, axis=d.ndim - 1)
    return d


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization (momentum 0.1)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


BN_EPS = 1e-5


def normalize_batch(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                    running_stats: RunningStats) -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    Train mode uses batch statistics and updates the running stats in
    place; eval mode normalizes with the stored running stats.
    """
    if x.data.ndim != 4:
        raise ValueError(f"normalize_batch expects a 4-d tensor, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown normalize_batch mode {mode!r}")
    tape = active_tape()
    gshape = (1, c, 1, 1)
    if mode == "train":
        if b * h * w <= 1:
            raise ValueError("normalize_batch train mode is degenerate for a single value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, also stored as running var
        m = running_stats.momentum
        running_stats.mean[...] = (1 - m) * running_stats.mean + m * mean
        running_stats.var[...] = (1 - m) * running_stats.var + m * var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mean.reshape(gshape)) * inv_std.reshape(gshape)
        out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
        out = Tensor(out_data)
        if tape is not None and _tracked(x, gamma, beta):
            n = b * h * w

            def bwd(g):
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gamma.data.reshape(gshape) * inv_std.reshape(gshape)) * (g - gm - xhat * gxm)
                x.accumulate_grad(gx)

            tape.record("batchnorm", out, (x, gamma, beta), bwd)
        return out

    inv_std = 1.0 / np.sqrt(running_stats.var + BN_EPS)
    xhat = (x.data - running_stats.mean.reshape(gshape)) * inv_std.reshape(gshape)
    out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
    out = Tensor(out_data)
    if tape is not None and _tracked(x, gamma, beta):

        def bwd(g):
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            x.accumulate_grad(g * (gamma.data * inv_std).reshape(gshape))

        tape.record("batchnorm_eval", out, (x, gamma, beta), bwd)
    return out
