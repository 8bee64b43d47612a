"""Pure numpy fallback for the 3x3 convolution kernels.

Same contract as the compiled ``_ckernels`` module: 4-D C-contiguous
float64 inputs in (batch, height, width, channels) layout, kernels in
(3, 3, in_channels, out_channels) layout, stride 1 and zero padding 1.
"""
import numpy as np


def _im2col(x):
    n, h, w, c = x.shape
    xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [xpad[:, p:p + h, q:q + w, :] for p in range(3) for q in range(3)]
    return np.concatenate(cols, axis=-1).reshape(n * h * w, 9 * c)


def conv2d(x, k):
    n, h, w, ci = x.shape
    out = _im2col(x) @ k.reshape(9 * ci, k.shape[3])
    return out.reshape(n, h, w, k.shape[3])


def conv2d_transpose(g, k):
    # adjoint of conv2d == conv2d with the kernel flipped in space and
    # its channel axes swapped
    flipped = np.ascontiguousarray(k[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d(g, flipped)


def conv2d_kernel_grad(x, g):
    ci = x.shape[3]
    co = g.shape[3]
    out = _im2col(x).T @ g.reshape(-1, co)
    return out.reshape(3, 3, ci, co)
