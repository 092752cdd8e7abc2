"""Dense tensor primitives: 2-D convolution (cross-correlation) and matmul.

Everything here operates on plain numpy arrays in row-major layout. Shapes
are validated up front and mismatches raise :class:`ShapeError` naming both
offending shapes.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def conv_output_size(size, kernel, stride, padding):
    """Output extent of a convolution along one axis."""
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kernel, stride, padding):
    """Extract convolution patches from a batch of images.

    x: (B, C, H, W). Returns (B, H_out * W_out, C * kernel * kernel) with
    each patch flattened in (C, kh, kw) row-major order, zero padding.
    """
    b, c, h, w = x.shape
    h_out = conv_output_size(h, kernel, stride, padding)
    w_out = conv_output_size(w, kernel, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv geometry yields empty output: input {x.shape}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (B, C, H_out, W_out, K, K)
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        b, h_out * w_out, c * kernel * kernel
    )
    return np.ascontiguousarray(patches)


def col2im(grad_patches, input_shape, kernel, stride, padding):
    """Scatter-add patch gradients back onto the input. Inverse of im2col
    in the adjoint sense.

    grad_patches: (B, H_out * W_out, C * kernel * kernel).
    """
    b, c, h, w = input_shape
    h_out = conv_output_size(h, kernel, stride, padding)
    w_out = conv_output_size(w, kernel, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    grad_pad = np.zeros((b, c, hp, wp), dtype=grad_patches.dtype)
    g = grad_patches.reshape(b, h_out, w_out, c, kernel, kernel)
    for ki in range(kernel):
        for kj in range(kernel):
            grad_pad[:, :, ki : ki + stride * h_out : stride,
                     kj : kj + stride * w_out : stride] += g[:, :, :, :, ki, kj].transpose(
                0, 3, 1, 2
            )
    if padding:
        return grad_pad[:, :, padding:-padding, padding:-padding]
    return grad_pad


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate a single image with a filter bank.

    x: (C_in, H, W); w: (C_out, C_in, K, K). Returns (C_out, H_out, W_out).
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D input and 4-D weight, got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride/padding: {stride}/{padding}")
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"non-square kernel: {w.shape}")
    patches = im2col(x[None], k, stride, padding)[0]  # (P, C_in*K*K)
    out = patches @ w.reshape(c_out, -1).T  # (P, C_out)
    h_out = conv_output_size(x.shape[1], k, stride, padding)
    w_out = conv_output_size(x.shape[2], k, stride, padding)
    return np.ascontiguousarray(out.T.reshape(c_out, h_out, w_out))


def matmul(a, b):
    """Matrix product with explicit dimension validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b
