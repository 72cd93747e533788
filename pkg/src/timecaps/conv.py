"""1D/2D convolution and 1D transposed convolution with recorded gradients.

Layout conventions:
  conv1d    input (L, Cin),   kernels (Cout, g, Cin)      -> (Lout, Cout)
  conv2d    input (H, W, 1),  kernels (Cout, gh, gw)      -> (Hout, Wout, Cout)
  deconv1d  input (Lin, Cin), kernels (Cin, g, Cout)      -> (Lout, Cout)

deconv1d is the exact adjoint of valid conv1d: with a shared kernel tensor K,
<conv1d(x, K, valid), y> == <x, deconv1d(y, K)>.  Same-padding splits the pad
symmetrically with the extra sample on the right when the total is odd.

Internally each op is an im2col matmul; the input-gradient scatter adds one
shifted slice per kernel tap.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _accumulate, make_op


def _same_pad(length: int, width: int, stride: int) -> tuple[int, int]:
    total = max(0, (math.ceil(length / stride) - 1) * stride + width - length)
    left = total // 2
    return left, total - left


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, pad: str = "same") -> Tensor:
    """Correlate (L, Cin) against (Cout, g, Cin) kernels along the first axis."""
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d input must be (L, Cin), got {x.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv1d kernels must be (Cout, g, Cin), got {kernels.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if pad not in ("same", "valid"):
        raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")
    length, cin = x.shape
    cout, g, cink = kernels.shape
    if cink != cin:
        raise ShapeError(f"kernel channel dim {cink} != input channels {cin}")
    if pad == "same":
        left, right = _same_pad(length, g, stride)
    else:
        left = right = 0
        if g > length:
            raise ShapeError(f"kernel width {g} exceeds input length {length}")

    xp = np.pad(x.data, ((left, right), (0, 0)))
    windows = sliding_window_view(xp, g, axis=0)[::stride]  # (Lout, Cin, g)
    lout = windows.shape[0]
    wf = np.ascontiguousarray(windows).reshape(lout, cin * g)
    kf = kernels.data.transpose(2, 1, 0).reshape(cin * g, cout)
    out = wf @ kf

    def backward(gout):
        g_arr = np.asarray(gout)
        if kernels.requires_grad:
            dk = (wf.T @ g_arr).reshape(cin, g, cout).transpose(2, 1, 0)
            _accumulate(kernels, dk)
        if x.requires_grad:
            t = (g_arr @ kf.T).reshape(lout, cin, g)
            dxp = np.zeros_like(xp)
            for tap in range(g):
                dxp[tap : tap + stride * lout : stride] += t[:, :, tap]
            _accumulate(x, dxp[left : left + length])

    return make_op(out, (x, kernels), backward)


def conv2d(
    x: Tensor,
    kernels: Tensor,
    stride_h: int = 1,
    stride_w: int = 1,
) -> Tensor:
    """2D correlation of an (H, W, 1) map: same-padded along H, valid along W.

    The width sweep must tile exactly: (W - gw) % stride_w == 0.
    """
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"conv2d input must be (H, W, 1), got {x.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv2d kernels must be (Cout, gh, gw), got {kernels.shape}")
    if stride_h < 1 or stride_w < 1:
        raise ValueError(f"strides must be positive, got ({stride_h}, {stride_w})")
    h, w, _ = x.shape
    cout, gh, gw = kernels.shape
    if gw > w:
        raise ShapeError(f"kernel width {gw} exceeds input width {w}")
    if (w - gw) % stride_w != 0:
        raise ShapeError(f"width sweep not exact: (W={w} - gw={gw}) % stride_w={stride_w} != 0")
    top, bottom = _same_pad(h, gh, stride_h)

    xp = np.pad(x.data[:, :, 0], ((top, bottom), (0, 0)))
    windows = sliding_window_view(xp, (gh, gw))[::stride_h, ::stride_w]  # (Hout, Wout, gh, gw)
    hn, wn = windows.shape[:2]
    wf = np.ascontiguousarray(windows).reshape(hn * wn, gh * gw)
    kf = kernels.data.reshape(cout, gh * gw).T
    out = (wf @ kf).reshape(hn, wn, cout)

    def backward(gout):
        g_arr = np.asarray(gout).reshape(hn * wn, cout)
        if kernels.requires_grad:
            _accumulate(kernels, (g_arr.T @ wf).reshape(cout, gh, gw))
        if x.requires_grad:
            t = (g_arr @ kf.T).reshape(hn, wn, gh, gw)
            dxp = np.zeros_like(xp)
            if stride_w == gw and wn * gw == w:
                # non-overlapping width sweep tiles the row exactly
                tw = t.transpose(0, 2, 1, 3).reshape(hn, gh, w)
                for u in range(gh):
                    dxp[u : u + stride_h * hn : stride_h, :] += tw[:, u, :]
            else:
                for u in range(gh):
                    for v in range(gw):
                        dxp[u : u + stride_h * hn : stride_h,
                            v : v + stride_w * wn : stride_w] += t[:, :, u, v]
            _accumulate(x, dxp[top : top + h].reshape(x.shape))

    return make_op(out, (x, kernels), backward)


def deconv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: each input site scatters a kernel-wide stencil.

    Output length is stride*(Lin-1) + g with no cropping.  Kernel axis 0 pairs
    with the input channels, axis 2 with the output channels, so the same
    tensor drives a conv1d one way and its adjoint the other.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"deconv1d input must be (Lin, Cin), got {x.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"deconv1d kernels must be (Cin, g, Cout), got {kernels.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    lin, cin = x.shape
    cink, g, cout = kernels.shape
    if cink != cin:
        raise ShapeError(f"kernel channel dim {cink} != input channels {cin}")
    lout = stride * (lin - 1) + g

    kf = kernels.data.reshape(cin, g * cout)
    t = (x.data @ kf).reshape(lin, g, cout)
    out = np.zeros((lout, cout))
    for tap in range(g):
        out[tap : tap + stride * lin : stride] += t[:, tap, :]

    def backward(gout):
        g_arr = np.asarray(gout)
        windows = sliding_window_view(g_arr, g, axis=0)[::stride]  # (Lin, Cout, g)
        wf = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(lin, g * cout)
        if x.requires_grad:
            _accumulate(x, wf @ kf.T)
        if kernels.requires_grad:
            _accumulate(kernels, (x.data.T @ wf).reshape(cin, g, cout))

    return make_op(out, (x, kernels), backward)
