"""Differentiable layer primitives used by the encoder and generator."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, add, as_tensor, index_rows, matmul, mul, reshape, rsqrt, square
from . import tensor as T

DEMOD_EPS = 1e-8


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    mask = np.where(xd > 0, 1.0, slope)
    return Tensor._result(xd * mask, (x,), lambda g: (g * mask,), "leaky_relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, _transpose(weight))
    return out if bias is None else add(out, bias)


def _transpose(w: Tensor) -> Tensor:
    return Tensor._result(w.data.T, (w,), lambda g: (g.T,), "transpose")


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range for table of {n} rows: {idx.tolist()}")
    return index_rows(table, idx)


def pixel_norm(x: Tensor, axis: int = 1, eps: float = 1e-8) -> Tensor:
    """x / sqrt(mean(x**2 over axis) + eps)."""
    ms = T.mean(square(x), axis=axis, keepdims=True)
    return mul(x, rsqrt(ms, eps))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._result(p, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), back, "log_softmax")


def _upsample_matrix(n: int) -> np.ndarray:
    # bilinear x2, half-pixel centers, edge clamp
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[i, min(max(lo, 0), n - 1)] += 1.0 - frac
        m[i, min(max(lo + 1, 0), n - 1)] += frac
    return m


_UP_CACHE: dict[int, np.ndarray] = {}


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of a (B, C, H, W) tensor."""
    _, _, h, w = x.shape
    uh = _UP_CACHE.setdefault(h, _upsample_matrix(h))
    uw = _UP_CACHE.setdefault(w, _upsample_matrix(w))
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def back(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return Tensor._result(out, (x,), back, "upsample2x")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if cin != wcin or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent < 1 for input {x.shape}, k={k}, stride={stride}, pad={pad}")

    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if k == 1:
        cols = xd[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        wmat = weight.data[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", wmat, cols, optimize=True)
    else:
        win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # win: (B, Cin, Ho, Wo, k, k)
        out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, Cout)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        cols = win
    padded_shape = xd.shape
    wd = weight.data

    def back(g):
        gx = gw = None
        if weight.requires_grad:
            if k == 1:
                gw = np.einsum("bohw,bchw->oc", g, cols, optimize=True)[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, k, k)
        if x.requires_grad:
            gp = np.zeros(padded_shape)
            if k == 1:
                gp[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride] = np.einsum(
                    "oc,bohw->bchw", wd[:, :, 0, 0], g, optimize=True
                )
            else:
                # (B, Cin, k, k, Ho, Wo)
                gcols = np.tensordot(wd, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
                for i in range(k):
                    for j in range(k):
                        gp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[
                            :, :, i, j
                        ]
            gx = gp[:, :, pad : pad + h, pad : pad + w] if pad else gp
        return gx, gw

    y = Tensor._result(out, (x, weight), back, "conv2d")
    if bias is not None:
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y


def modulation_scales(weight: Tensor, style: Tensor, demodulate: bool) -> Tensor | None:
    """Per-sample output scale d[b, o] = 1/sqrt(sum_i s[b,i]^2 * |w[o,i]|^2 + eps)."""
    if not demodulate:
        return None
    w2 = T.sum(square(weight), axis=(2, 3))  # (Cout, Cin)
    return rsqrt(matmul(square(style), _transpose(w2)), DEMOD_EPS)  # (B, Cout)


def modulated_weight(weight: Tensor, style: Tensor, demodulate: bool = True) -> Tensor:
    """Effective per-sample kernels (B, Cout, Cin, k, k) after modulation/demodulation."""
    b, cin = style.shape
    cout = weight.shape[0]
    w = mul(reshape(weight, (1,) + weight.shape), reshape(style, (b, 1, cin, 1, 1)))
    d = modulation_scales(weight, style, demodulate)
    if d is not None:
        w = mul(w, reshape(d, (b, cout, 1, 1, 1)))
    return w


def modulated_conv2d(
    x: Tensor,
    weight: Tensor,
    style: Tensor,
    demodulate: bool = True,
    bias: Tensor | None = None,
    pad: int | None = None,
) -> Tensor:
    """Style-modulated convolution with optional demodulation.

    ``style`` is (B, Cin) or (Cin,). Implemented as conv(x * s, w) * d, which
    equals convolving each sample with its own modulated kernel.
    """
    x, weight, style = as_tensor(x), as_tensor(weight), as_tensor(style)
    if style.ndim == 1:
        style = reshape(style, (1, -1))
    b, cin = x.shape[0], x.shape[1]
    if style.shape[1] != cin or weight.shape[1] != cin:
        raise ShapeError(
            f"modulated_conv2d: style {style.shape}, weight {weight.shape} and input {x.shape} disagree on Cin"
        )
    if style.shape[0] not in (1, b):
        raise ShapeError(f"modulated_conv2d: style batch {style.shape[0]} vs input batch {b}")
    k = weight.shape[2]
    if pad is None:
        pad = k // 2
    xs = mul(x, reshape(style, (style.shape[0], cin, 1, 1)))
    y = conv2d(xs, weight, stride=1, pad=pad)
    d = modulation_scales(weight, style, demodulate)
    if d is not None:
        y = mul(y, reshape(d, (d.shape[0], d.shape[1], 1, 1)))
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


def minibatch_stddev(x: Tensor, group_size: int, eps: float = 1e-8) -> Tensor:
    """Append one channel holding the mean feature stddev within each group.

    ``x`` is (B, C, H, W) with B = n_groups * group_size, members of a group
    contiguous. A group of one yields an all-zero channel.
    """
    b, c, h, w = x.shape
    if b % group_size:
        raise ShapeError(f"minibatch_stddev: batch {b} not divisible by group size {group_size}")
    n = b // group_size
    if group_size == 1:
        zeros = Tensor(np.zeros((b, 1, h, w)))
        return T.concat([x, zeros], axis=1)
    g = reshape(x, (n, group_size, c, h, w))
    centered = add(g, T.scale(T.mean(g, axis=1, keepdims=True), -1.0))
    var = T.mean(square(centered), axis=1)  # (n, c, h, w)
    std = T.sqrt(var, eps)
    feat = T.mean(reshape(std, (n, c * h * w)), axis=1, keepdims=True)  # (n, 1)
    # broadcast to (n, group, 1, h, w)
    ones = Tensor(np.ones((1, group_size, 1, h, w)))
    chan = mul(reshape(feat, (n, 1, 1, 1, 1)), ones)
    return T.concat([x, reshape(chan, (b, 1, h, w))], axis=1)
