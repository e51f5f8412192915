"""Differentiable structured ops: convolution, batch norm, sampling, resizing.

All spatial tensors are NCHW. Interpolation uses the align-corners convention
everywhere: normalized grid coordinate g maps to pixel (g + 1) / 2 * (size - 1),
and resizing samples source positions i * (in - 1) / (out - 1).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _accum, _make


# -- convolution ---------------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Hout, Wout, kh, kw) view into the padded input
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(dcols: np.ndarray, in_shape, kh, kw, stride, padding):
    """Scatter (B, C, Hout, Wout, kh, kw) window grads back onto the input."""
    B, C, H, W = in_shape
    gp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
    Hout, Wout = dcols.shape[2], dcols.shape[3]
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride] += dcols[:, :, :, :, i, j]
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return gp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with grouped channels.

    weight is (Cout, Cin/groups, kh, kw). groups == 1 and depthwise
    (groups == Cin with one filter per channel) take vectorized paths.
    """
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if Cin % groups != 0 or Cout % groups != 0:
        raise ValueError(f"channels ({Cin}->{Cout}) not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ValueError(f"weight expects {Cg} input channels per group, input has {Cin // groups}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _conv_windows(xp, kh, kw, stride)
    Hout, Wout = win.shape[2], win.shape[3]

    depthwise = groups == Cin and Cout == Cin
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Hout * Wout, Cin * kh * kw)
        wf = weight.data.reshape(Cout, -1)
        out_data = (cols @ wf.T).reshape(B, Hout, Wout, Cout).transpose(0, 3, 1, 2)
    elif depthwise:
        # shift-add: never materializes the (B,C,H,W,kh,kw) window array
        cols = None
        wd = weight.data
        out_data = np.zeros((B, Cin, Hout, Wout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out_data += wd[:, 0, i, j].reshape(1, Cin, 1, 1) * \
                    xp[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride]
    else:
        cols = None
        out_data = np.empty((B, Cout, Hout, Wout), dtype=x.dtype)
        cg_out = Cout // groups
        for g in range(groups):
            wg = weight.data[g * cg_out:(g + 1) * cg_out].reshape(cg_out, -1)
            colg = win[:, g * Cg:(g + 1) * Cg].transpose(0, 2, 3, 1, 4, 5).reshape(B * Hout * Wout, -1)
            out_data[:, g * cg_out:(g + 1) * cg_out] = (
                (colg @ wg.T).reshape(B, Hout, Wout, cg_out).transpose(0, 3, 1, 2))
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, Cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if groups == 1:
            gcols = g.transpose(0, 2, 3, 1).reshape(B * Hout * Wout, Cout)
            if weight.requires_grad:
                _accum(weight, (gcols.T @ cols).reshape(weight.shape))
            if x.requires_grad:
                dcols = (gcols @ weight.data.reshape(Cout, -1)).reshape(
                    B, Hout, Wout, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                _accum(x, _col2im(dcols, x.shape, kh, kw, stride, padding))
        elif depthwise:
            if weight.requires_grad:
                gw = np.empty((Cin, 1, kh, kw), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        sl = xp[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride]
                        gw[:, 0, i, j] = (g * sl).sum(axis=(0, 2, 3))
                _accum(weight, gw)
            if x.requires_grad:
                gp = np.zeros_like(xp)
                wd = weight.data
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride] += \
                            wd[:, 0, i, j].reshape(1, Cin, 1, 1) * g
                _accum(x, gp[:, :, padding:-padding, padding:-padding] if padding else gp)
        else:
            cg_out = Cout // groups
            gw = np.zeros_like(weight.data) if weight.requires_grad else None
            dcols = np.zeros(win.shape, dtype=x.dtype) if x.requires_grad else None
            for gi in range(groups):
                gg = g[:, gi * cg_out:(gi + 1) * cg_out].transpose(0, 2, 3, 1).reshape(-1, cg_out)
                colg = win[:, gi * Cg:(gi + 1) * Cg].transpose(0, 2, 3, 1, 4, 5).reshape(B * Hout * Wout, -1)
                if gw is not None:
                    gw[gi * cg_out:(gi + 1) * cg_out] = (gg.T @ colg).reshape(cg_out, Cg, kh, kw)
                if dcols is not None:
                    wg = weight.data[gi * cg_out:(gi + 1) * cg_out].reshape(cg_out, -1)
                    dcols[:, gi * Cg:(gi + 1) * Cg] = (gg @ wg).reshape(
                        B, Hout, Wout, Cg, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            if gw is not None:
                _accum(weight, gw)
            if dcols is not None:
                _accum(x, _col2im(dcols, x.shape, kh, kw, stride, padding))

    out = _make(out_data, parents, backward, "conv2d")
    return out


# -- batch normalization ----------------------------------------------------------


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Eval mode normalizes with the running statistics only; train mode uses
    batch statistics and moves the running buffers by `momentum`.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str = "train",
                update_running: bool = True) -> Tensor:
    """Batch normalization over (B, H, W) per channel."""
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects rank-4 input, got {x.data.ndim}")
    B, C, H, W = x.shape
    if C != state.channels:
        raise ValueError(f"channel mismatch: input {C}, state {state.channels}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    gamma, beta = state.gamma, state.beta
    cshape = (1, C, 1, 1)

    if mode == "train":
        n = B * H * W
        if n == 0:
            raise ValueError("batchnorm2d: empty batch in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            m = state.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
        ivstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(cshape)) * ivstd.reshape(cshape)
        out_data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

        def backward():
            g = out.grad
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(cshape)
                ivs = ivstd.reshape(cshape)
                # standard train-mode backward through the batch statistics
                dx = (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)) * ivs
                _accum(x, dx)

        out = _make(out_data, (x, gamma, beta), backward, "batchnorm2d")
        return out

    ivstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(cshape)) * ivstd.reshape(cshape)
    out_data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * (gamma.data * ivstd).reshape(cshape))

    out = _make(out_data, (x, gamma, beta), backward, "batchnorm2d")
    return out


def mean_pool3x3(x: Tensor) -> Tensor:
    """3x3 box mean, zero padding, divisor 9 everywhere (count includes pad).

    Equivalent to a depthwise conv with a constant 1/9 kernel, but via nine
    shifted adds; used heavily by SSIM."""
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out_data = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out_data += xp[:, :, i:i + H, j:j + W]
    out_data *= (1.0 / 9.0)

    def backward():
        if x.requires_grad:
            gp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
            g = out.grad * np.asarray(1.0 / 9.0, dtype=x.dtype)
            for i in range(3):
                for j in range(3):
                    gp[:, :, i:i + H, j:j + W] += g
            _accum(x, gp[:, :, 1:-1, 1:-1])

    out = _make(out_data, (x,), backward, "mean_pool3x3")
    return out


# -- bilinear sampling ----------------------------------------------------------


def grid_sample_bilinear(x: Tensor, grid: Tensor, padding: str = "border") -> Tensor:
    """Sample x at normalized grid locations, differentiable in x AND grid.

    grid is (B, Hout, Wout, 2) with (gx, gy) in [-1, 1]; out-of-range
    coordinates clamp to the border or read zeros per `padding`.
    """
    if padding not in ("border", "zeros"):
        raise ValueError(f"unknown padding {padding!r}")
    B, C, H, W = x.shape
    gB, Ho, Wo, two = grid.shape
    if gB != B or two != 2:
        raise ValueError(f"grid shape {grid.shape} incompatible with input {x.shape}")

    fx = (grid.data[..., 0] + 1.0) * 0.5 * (W - 1)
    fy = (grid.data[..., 1] + 1.0) * 0.5 * (H - 1)
    # snap near-integer positions so integer sampling is exact despite the
    # float round-trip through normalized coordinates
    rx, ry = np.rint(fx), np.rint(fy)
    fx = np.where(np.abs(fx - rx) < 1e-6, rx, fx)
    fy = np.where(np.abs(fy - ry) < 1e-6, ry, fy)
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = (fx - x0).astype(x.dtype)
    wy = (fy - y0).astype(x.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1

    def clip_x(v):
        return np.clip(v, 0, W - 1)

    def clip_y(v):
        return np.clip(v, 0, H - 1)

    x0c, x1c, y0c, y1c = clip_x(x0), clip_x(x1), clip_y(y0), clip_y(y1)
    if padding == "zeros":
        m00 = ((x0 >= 0) & (x0 <= W - 1) & (y0 >= 0) & (y0 <= H - 1)).astype(x.dtype)
        m10 = ((x1 >= 0) & (x1 <= W - 1) & (y0 >= 0) & (y0 <= H - 1)).astype(x.dtype)
        m01 = ((x0 >= 0) & (x0 <= W - 1) & (y1 >= 0) & (y1 <= H - 1)).astype(x.dtype)
        m11 = ((x1 >= 0) & (x1 <= W - 1) & (y1 >= 0) & (y1 <= H - 1)).astype(x.dtype)
    else:
        m00 = m10 = m01 = m11 = None

    xt = x.data.transpose(0, 2, 3, 1)  # (B, H, W, C) for gathers
    bidx = np.arange(B).reshape(B, 1, 1)
    v00 = xt[bidx, y0c, x0c]
    v10 = xt[bidx, y0c, x1c]
    v01 = xt[bidx, y1c, x0c]
    v11 = xt[bidx, y1c, x1c]
    if padding == "zeros":
        v00 = v00 * m00[..., None]
        v10 = v10 * m10[..., None]
        v01 = v01 * m01[..., None]
        v11 = v11 * m11[..., None]

    wxe, wye = wx[..., None], wy[..., None]
    out_t = ((1 - wye) * ((1 - wxe) * v00 + wxe * v10)
             + wye * ((1 - wxe) * v01 + wxe * v11))
    out_data = out_t.transpose(0, 3, 1, 2)

    def backward():
        g = out.grad.transpose(0, 2, 3, 1)  # (B, Ho, Wo, C)
        if x.requires_grad:
            w00 = (1 - wx) * (1 - wy)
            w10 = wx * (1 - wy)
            w01 = (1 - wx) * wy
            w11 = wx * wy
            if padding == "zeros":
                w00, w10, w01, w11 = w00 * m00, w10 * m10, w01 * m01, w11 * m11
            gx_img = np.zeros(B * H * W * C, dtype=np.float64)
            cplane = np.arange(C, dtype=np.int64)
            for yc, xc, wgt in ((y0c, x0c, w00), (y0c, x1c, w10), (y1c, x0c, w01), (y1c, x1c, w11)):
                flat = ((bidx * H + yc) * W + xc)[..., None] * C + cplane
                gx_img += np.bincount(flat.reshape(-1), weights=(g * wgt[..., None]).reshape(-1),
                                      minlength=B * H * W * C)
            _accum(x, gx_img.reshape(B, H, W, C).transpose(0, 3, 1, 2).astype(x.dtype))
        if grid.requires_grad:
            # clamped corners coincide outside the image, zeroing the slope
            dout_dx = (1 - wye) * (v10 - v00) + wye * (v11 - v01)
            dout_dy = (1 - wxe) * (v01 - v00) + wxe * (v11 - v10)
            gx = (g * dout_dx).sum(axis=-1) * (0.5 * (W - 1))
            gy = (g * dout_dy).sum(axis=-1) * (0.5 * (H - 1))
            _accum(grid, np.stack([gx, gy], axis=-1).astype(grid.dtype))

    out = _make(out_data, (x, grid), backward, "grid_sample")
    return out


# -- bilinear resize ----------------------------------------------------------------


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation matrix, align-corners."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        A[0, 0] = 1.0
        return A
    src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    rows = np.arange(n_out)
    A[rows, i0] += 1 - w
    A[rows, i1] += w
    return A


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Deterministic bilinear resize (align-corners); identity on same size."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    B, C, H, W = x.shape
    Ay = _resize_matrix(H, out_h, x.dtype)
    Ax = _resize_matrix(W, out_w, x.dtype)
    tmp = np.tensordot(Ay, x.data, axes=(1, 2)).transpose(1, 2, 0, 3)  # (B, C, out_h, W)
    out_data = np.tensordot(tmp, Ax, axes=(3, 1))  # (B, C, out_h, out_w)

    def backward():
        g = out.grad
        t = np.tensordot(g, Ax, axes=(3, 0))  # (B, C, out_h, W)
        gx = np.tensordot(Ay, t, axes=(0, 2)).transpose(1, 2, 0, 3)  # (B, C, H, W)
        _accum(x, gx.astype(x.dtype))

    out = _make(out_data, (x,), backward, "upsample_bilinear")
    return out
