"""Numba kernels for the memory-bound pieces of convolution.

Only the patch gather (im2col) and its scatter-add inverse live here; all
matrix products go through BLAS. Padding is folded into the kernels so no
padded copy of the input is ever materialized. Kernels are dtype-generic and
single threaded, so results are bit-reproducible run to run.
"""
import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def im2col(x, col, stride, pad):
    # x: (B, H, W, C) NHWC input; col: (B, Ho, Wo, kh, kw, C) patch matrix.
    # Out-of-image taps are zero-filled (virtual zero padding).
    B, Ho, Wo, kh, kw, C = col.shape
    H, W = x.shape[1], x.shape[2]
    for b in range(B):
        for i in range(Ho):
            ib = i * stride - pad
            for j in range(Wo):
                jb = j * stride - pad
                for u in range(kh):
                    ii = ib + u
                    inside_row = 0 <= ii < H
                    for v in range(kw):
                        jj = jb + v
                        if inside_row and 0 <= jj < W:
                            for c in range(C):
                                col[b, i, j, u, v, c] = x[b, ii, jj, c]
                        else:
                            for c in range(C):
                                col[b, i, j, u, v, c] = 0.0


@njit(cache=True, fastmath=True)
def col2im(dcol, dx, stride, pad):
    # scatter-add of patch gradients onto the (unpadded, pre-zeroed) input
    B, Ho, Wo, kh, kw, C = dcol.shape
    H, W = dx.shape[1], dx.shape[2]
    for b in range(B):
        for i in range(Ho):
            ib = i * stride - pad
            for j in range(Wo):
                jb = j * stride - pad
                for u in range(kh):
                    ii = ib + u
                    if ii < 0 or ii >= H:
                        continue
                    for v in range(kw):
                        jj = jb + v
                        if 0 <= jj < W:
                            for c in range(C):
                                dx[b, ii, jj, c] += dcol[b, i, j, u, v, c]
