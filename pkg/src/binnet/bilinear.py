"""The coupled scale/weight objective G(w, A), its residual and analytic
gradients.

Weights are viewed as an I x J matrix (I = C_out, J = C_in*K*K); row i is
filter i flattened row-major. ``as_matrix`` produces that view from a 4-D
filter bank. Inside G the sign of w is treated as a constant, so the
w-gradient is the quadratic part plus the regularizer derivative.
"""

import numpy as np

from binnet.binary import binary_conv_integer, sign_forward
from binnet.tensor_ops import ShapeError

REGULARIZERS = ("none", "l1", "l2")


def as_matrix(w):
    """Flatten a (C_out, C_in, K, K) filter bank to its I x J matrix view."""
    w = np.asarray(w)
    return w.reshape(w.shape[0], -1)


def _check(w2d, scale):
    if w2d.ndim != 2:
        raise ShapeError(f"weight view must be 2-D, got {w2d.shape}")
    if len(scale) != w2d.shape[0]:
        raise ShapeError(f"scale length {len(scale)} != I {w2d.shape[0]}")


def bilinear_residual(w2d, scale):
    """Entrywise residual inv_alpha_i * w_ij - sign(w_ij)."""
    w2d = np.asarray(w2d)
    _check(w2d, scale)
    return scale.inv_alpha[:, None] * w2d - sign_forward(w2d)


def _reg_value(w2d, reg):
    if reg == "none":
        return 0.0
    if reg == "l1":
        return float(np.sum(np.abs(w2d)))
    if reg == "l2":
        return float(np.sum(w2d * w2d))
    raise ValueError(f"unknown regularizer {reg!r}")


def _reg_grad(w2d, reg):
    if reg == "none":
        return np.zeros_like(w2d)
    if reg == "l1":
        return sign_forward(w2d)
    if reg == "l2":
        return 2.0 * w2d
    raise ValueError(f"unknown regularizer {reg!r}")


def objective_G(w2d, scale, reg="none"):
    """Squared Frobenius norm of the residual plus the regularizer."""
    r = bilinear_residual(w2d, scale)
    return float(np.sum(r * r)) + _reg_value(np.asarray(w2d), reg)


def grad_G_wrt_A(w2d, scale):
    """Diagonal gradient of G in inv_alpha: 2 * <w_i, residual_i> per row."""
    w2d = np.asarray(w2d)
    r = bilinear_residual(w2d, scale)
    return 2.0 * np.sum(w2d * r, axis=1)


def grad_G_wrt_w(w2d, scale, reg="none"):
    """Gradient of G in w with the sign held constant:
    2 * inv_alpha_i * residual_ij + dR/dw_ij."""
    w2d = np.asarray(w2d)
    r = bilinear_residual(w2d, scale)
    return 2.0 * scale.inv_alpha[:, None] * r + _reg_grad(w2d, reg)


def grad_L_wrt_A(task_grad_out, a_packed, w_packed, scale, w2d, lam,
                 stride=1, padding=0):
    """Full gradient of the total loss in inv_alpha for one layer and one
    sample.

    The task term follows the chain rule through
    a_out_i = (1 / inv_alpha_i) * intconv_i, giving
    -sum(task_grad_out_i * intconv_i) / inv_alpha_i**2; the objective term
    adds lam * grad_G_wrt_A.
    """
    task_grad_out = np.asarray(task_grad_out)
    ints = binary_conv_integer(a_packed, w_packed, stride, padding)
    if task_grad_out.shape != ints.shape:
        raise ShapeError(
            f"task gradient shape {task_grad_out.shape} != conv output {ints.shape}"
        )
    contraction = np.sum(task_grad_out * ints, axis=(1, 2))
    task_term = -contraction / (scale.inv_alpha ** 2)
    return task_term + lam * grad_G_wrt_A(w2d, scale)
