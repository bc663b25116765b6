"""Spatial operations: convolution, resampling and bilinear plane lookup."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _result, as_tensor


def _pair2(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernel`` [O,C,kh,kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise DimensionError(f"conv2d expects input [N,C,H,W] and kernel [O,C,kh,kw], got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    o, kc, kh, kw = kd.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    sh, sw = _pair2(stride)
    ph, pw = _pair2(pad)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0 or kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d output extent non-positive for input {x.shape}, kernel {kernel.shape}, pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kd.reshape(o, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    xshape = xd.shape

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gmat.T @ cols).reshape(kd.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + h, pw:pw + w].reshape(xshape)
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """1-D convolution: ``x`` [C,L] or [N,C,L], ``kernel`` [O,C,k]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim not in (2, 3) or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects input [C,L]/[N,C,L] and kernel [O,C,k], got {x.shape}, {kernel.shape}")
    x4 = x.reshape(x.shape[:-1] + (1, x.shape[-1]))
    k4 = kernel.reshape(kernel.shape[:2] + (1, kernel.shape[2]))
    out = conv2d(x4, k4, bias, stride=(1, stride), pad=(0, pad))
    return out.reshape(out.shape[:-2] + (out.shape[-1],))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Pixel duplication over the last two axes."""
    x = as_tensor(x)
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    shape = x.shape

    def backward(g):
        h, w = shape[-2], shape[-1]
        return (g.reshape(shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    shape = x.shape
    h, w = shape[-2], shape[-1]
    if h % f or w % f:
        raise DimensionError(f"avg_pool2d factor {f} does not divide extents {shape}")
    out = x.data.reshape(shape[:-2] + (h // f, f, w // f, f)).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, f, axis=-2), f, axis=-1)
        return (g / (f * f),)

    return _result(out, (x,), backward)


def _scatter_rows(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of ``vals`` [M,C] into an [n_rows,C] array at row indices ``idx``."""
    out = np.empty((n_rows, vals.shape[1]), dtype=vals.dtype)
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n_rows)
    return out


def grid_sample_bilinear(plane: Tensor, coords) -> Tensor:
    """Bilinear lookup of ``plane`` [C,H,W] at ``coords`` [N,2] = (row, col).

    Coordinates are in pixel units with integer values on grid nodes.
    Out-of-range coordinates are clamped to the border; the gradient with
    respect to a clamped coordinate is zero.
    """
    plane, coords = as_tensor(plane), as_tensor(coords)
    if plane.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"grid_sample_bilinear expects plane [C,H,W] and coords [N,2], got {plane.shape}, {coords.shape}")
    c, h, w = plane.shape
    pd = plane.data
    cd = coords.data.astype(pd.dtype, copy=False)
    r = np.clip(cd[:, 0], 0, h - 1)
    q = np.clip(cd[:, 1], 0, w - 1)
    inside_r = (cd[:, 0] >= 0) & (cd[:, 0] <= h - 1)
    inside_q = (cd[:, 1] >= 0) & (cd[:, 1] <= w - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    q0 = np.minimum(np.floor(q).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr = (r - r0).astype(pd.dtype)
    fq = (q - q0).astype(pd.dtype)
    flat = pd.reshape(c, h * w).T
    i00, i01, i10, i11 = r0 * w + q0, r0 * w + q1, r1 * w + q0, r1 * w + q1
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - fr) * (1 - fq)
    w01 = (1 - fr) * fq
    w10 = fr * (1 - fq)
    w11 = fr * fq
    out = w00[:, None] * v00 + w01[:, None] * v01 + w10[:, None] * v10 + w11[:, None] * v11

    def backward(g):
        idx = np.concatenate([i00, i01, i10, i11])
        vals = np.concatenate([w00[:, None] * g, w01[:, None] * g, w10[:, None] * g, w11[:, None] * g])
        gplane = _scatter_rows(h * w, idx, vals).astype(pd.dtype).T.reshape(c, h, w)
        if not coords.requires_grad:
            return gplane, None
        d_r = (1 - fq)[:, None] * (v10 - v00) + fq[:, None] * (v11 - v01)
        d_q = (1 - fr)[:, None] * (v01 - v00) + fr[:, None] * (v11 - v10)
        gcoords = np.stack([(g * d_r).sum(1) * inside_r, (g * d_q).sum(1) * inside_q], axis=1)
        return gplane, gcoords.astype(coords.dtype)

    return _result(out, (plane, coords), backward)
