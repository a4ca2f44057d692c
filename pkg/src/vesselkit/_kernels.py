"""Compiled inner loops for 3D convolution.

Two complementary strategies, both exact cross-correlation:

* numba kernels blocked over output channels, vectorizing along the
  fastest (W) axis — fastest when rows are long;
* per-sample im2col + BLAS GEMM — fastest when spatial dims are small
  and channel counts are large.

conv dispatch in autodiff picks between them by row length. All kernels
are stride-1; strided convolution is handled at the caller via the
general im2col path.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# minimum W for the row kernels to beat im2col (measured on AVX2)
ROW_KERNEL_MIN_WIDTH = 24


@njit(cache=True, fastmath=True)
def conv3d_forward(xp, w, out):
    """out[n,o,d,h,x] = sum_{c,i,j,l} xp[n,c,d+i,h+j,x+l] * w[o,c,i,j,l]."""
    N, Cin, Dp, Hp, Wp = xp.shape
    Cout = w.shape[0]
    k = w.shape[2]
    D, H, W = out.shape[2], out.shape[3], out.shape[4]
    acc = np.empty((Cout, W), dtype=xp.dtype)
    for n in range(N):
        for d in range(D):
            for h in range(H):
                acc[:, :] = 0.0
                for ci in range(Cin):
                    for i in range(k):
                        for j in range(k):
                            row = xp[n, ci, d + i, h + j]
                            for l in range(k):
                                for co in range(Cout):
                                    wt = w[co, ci, i, j, l]
                                    for x in range(W):
                                        acc[co, x] += wt * row[x + l]
                for co in range(Cout):
                    for x in range(W):
                        out[n, co, d, h, x] = acc[co, x]
    return out


@njit(cache=True, fastmath=True)
def conv3d_grad_input(go, w, gxp):
    """Scatter go back through the kernel: gxp[n,c,d+i,h+j,x+l] += go*wt."""
    N, Cout, D, H, W = go.shape
    Cin = w.shape[1]
    k = w.shape[2]
    for n in range(N):
        for d in range(D):
            for h in range(H):
                for co in range(Cout):
                    gorow = go[n, co, d, h]
                    for ci in range(Cin):
                        for i in range(k):
                            for j in range(k):
                                target = gxp[n, ci, d + i, h + j]
                                for l in range(k):
                                    wt = w[co, ci, i, j, l]
                                    for x in range(W):
                                        target[x + l] += wt * gorow[x]
    return gxp


@njit(cache=True, fastmath=True)
def conv3d_grad_weight(go, xp, gw):
    """gw[o,c,i,j,l] += sum_{n,d,h,x} go[n,o,d,h,x] * xp[n,c,d+i,h+j,x+l]."""
    N, Cout, D, H, W = go.shape
    Cin = gw.shape[1]
    k = gw.shape[2]
    for n in range(N):
        for d in range(D):
            for h in range(H):
                for co in range(Cout):
                    gorow = go[n, co, d, h]
                    for ci in range(Cin):
                        for i in range(k):
                            for j in range(k):
                                row = xp[n, ci, d + i, h + j]
                                for l in range(k):
                                    s = 0.0
                                    for x in range(W):
                                        s += gorow[x] * row[x + l]
                                    gw[co, ci, i, j, l] += s
    return gw


def im2col_forward(xp, w, stride, out_shape):
    """General cross-correlation via per-sample im2col and one GEMM."""
    N, Cin, Dp, Hp, Wp = xp.shape
    Cout, _, k, _, _ = w.shape
    D, H, W = out_shape
    S = D * H * W
    wm = w.reshape(Cout, Cin * k * k * k)
    out = np.empty((N, Cout, D, H, W), dtype=xp.dtype)
    cols = np.empty((Cin * k * k * k, S), dtype=xp.dtype)
    for n in range(N):
        _fill_cols(xp[n], k, stride, (D, H, W), cols)
        out[n] = (wm @ cols).reshape(Cout, D, H, W)
    return out


def _fill_cols(xpn, k, stride, out_shape, cols):
    D, H, W = out_shape
    S = D * H * W
    idx = 0
    Cin = xpn.shape[0]
    for ci in range(Cin):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    src = xpn[
                        ci,
                        i : i + (D - 1) * stride + 1 : stride,
                        j : j + (H - 1) * stride + 1 : stride,
                        l : l + (W - 1) * stride + 1 : stride,
                    ]
                    cols[idx] = src.reshape(S)
                    idx += 1


def im2col_backward(go, xp, w, stride):
    """Gradients for im2col_forward; returns (gxp, gw)."""
    N, Cout, D, H, W = go.shape
    Cin, k = w.shape[1], w.shape[2]
    S = D * H * W
    wm = w.reshape(Cout, Cin * k * k * k)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wm)
    cols = np.empty((Cin * k * k * k, S), dtype=xp.dtype)
    for n in range(N):
        _fill_cols(xp[n], k, stride, (D, H, W), cols)
        gon = go[n].reshape(Cout, S)
        gw += gon @ cols.T
        gcols = wm.T @ gon
        _scatter_cols(gxp[n], k, stride, (D, H, W), gcols)
    return gxp, gw.reshape(w.shape)


def _scatter_cols(gxpn, k, stride, out_shape, gcols):
    D, H, W = out_shape
    idx = 0
    Cin = gxpn.shape[0]
    for ci in range(Cin):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxpn[
                        ci,
                        i : i + (D - 1) * stride + 1 : stride,
                        j : j + (H - 1) * stride + 1 : stride,
                        l : l + (W - 1) * stride + 1 : stride,
                    ] += gcols[idx].reshape(D, H, W)
                    idx += 1
