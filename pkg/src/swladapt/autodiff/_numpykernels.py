"""Pure-numpy implementations of the convolution gather/scatter kernels.

These mirror ``_fastkernels.pyx`` exactly, including the accumulation order
of ``col2im`` (ascending kernel tap), so both backends produce bit-identical
results and can be swapped freely.
"""

import numpy as np


def im2col(x, kernel, stride, pad_left, pad_right):
    """Unfold a batch of 1-D multichannel signals into patch rows.

    x has shape (n, channels, length); the result has shape
    (n, out_length, channels * kernel) with patch element ``c * kernel + t``
    holding ``x_padded[i, c, j * stride + t]``.
    """
    n, channels, length = x.shape
    out_len = (length + pad_left + pad_right - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad_left, pad_right)))
    out = np.empty((n, out_len, channels, kernel), dtype=x.dtype)
    span = (out_len - 1) * stride + 1
    for t in range(kernel):
        out[:, :, :, t] = xp[:, :, t : t + span : stride].transpose(0, 2, 1)
    return out.reshape(n, out_len, channels * kernel)


def col2im(cols, kernel, stride, pad_left, pad_right, length):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to a signal."""
    n, out_len, ck = cols.shape
    channels = ck // kernel
    g4 = cols.reshape(n, out_len, channels, kernel)
    xp = np.zeros((n, channels, length + pad_left + pad_right), dtype=cols.dtype)
    span = (out_len - 1) * stride + 1
    for t in range(kernel):
        xp[:, :, t : t + span : stride] += g4[:, :, :, t].transpose(0, 2, 1)
    return np.ascontiguousarray(xp[:, :, pad_left : pad_left + length])
