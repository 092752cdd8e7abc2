"""Update rules coupling the scale diagonal, the latent real weights and the
per-channel backtracking gains, plus the trace-identity oracle that checks
the closed-form derivation behind the backtracking term.
"""

from dataclasses import dataclass, field

import numpy as np

from binnet.binary import EPS_A, ScaleDiag
from binnet.tensor_ops import ShapeError


class DerivationCheckError(AssertionError):
    """The two trace computation paths disagreed beyond tolerance."""


@dataclass
class BacktrackState:
    """Per-layer recurrent state: nonnegative channel gains U and the
    previous-iteration weight snapshot."""

    U: np.ndarray
    w_prev: np.ndarray | None = None
    A_prev: ScaleDiag | None = None

    @classmethod
    def fresh(cls, c_out):
        return cls(U=np.zeros(c_out, dtype=np.float64))


@dataclass
class DensityMask:
    mask: np.ndarray
    threshold_T: int


def density_mask(values, tau):
    """Flag the C_out - int(C_out * tau) largest values as high-density.

    Rank is 1-indexed ascending by value; ties broken by ascending channel
    index (stable sort); mask_i is true iff rank_i > T.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    values = np.asarray(values, dtype=np.float64)
    c_out = len(values)
    t = int(c_out * tau)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(c_out, dtype=np.int64)
    ranks[order] = np.arange(1, c_out + 1)
    return DensityMask(mask=ranks > t, threshold_T=t)


def drelu(w2d, scale, tau):
    """Gate each weight row: keep row i only when its l1 norm is
    low-density while inv_alpha_i is high-density; zero otherwise."""
    w2d = np.asarray(w2d)
    if len(scale) != w2d.shape[0]:
        raise ShapeError(f"scale length {len(scale)} != I {w2d.shape[0]}")
    mask_w = density_mask(np.sum(np.abs(w2d), axis=1), tau).mask
    mask_a = density_mask(scale.inv_alpha, tau).mask
    keep = (~mask_w) & mask_a
    return np.where(keep[:, None], w2d, 0.0)


def update_A(scale, grad, eta1):
    """Absolute-value gradient step on inv_alpha, floored at 1e-8."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != scale.inv_alpha.shape:
        raise ShapeError(f"gradient shape {grad.shape} != scale shape {scale.inv_alpha.shape}")
    return ScaleDiag(np.maximum(np.abs(scale.inv_alpha - eta1 * grad), EPS_A))


def backtrack_w(w_vanilla_next, w_t, A_t, state, tau):
    """Add the gated backtracking term U_i * DReLU(w^t, A^t)_i to the plain
    gradient-descent result."""
    w_vanilla_next = np.asarray(w_vanilla_next)
    w_t = np.asarray(w_t)
    if w_vanilla_next.shape != w_t.shape:
        raise ShapeError(f"shape mismatch: {w_vanilla_next.shape} vs {w_t.shape}")
    gated = drelu(w_t.reshape(w_t.shape[0], -1), A_t, tau)
    term = (state.U[:, None] * gated).reshape(w_t.shape)
    return w_vanilla_next + term.astype(w_vanilla_next.dtype)


def grad_U(task_grad_w2d, state, A_t, tau):
    """Gradient of the loss in U: the task weight gradient contracted with
    DReLU(w^{t-1}, A^t) over each row. Zero on the first iteration."""
    task_grad_w2d = np.asarray(task_grad_w2d)
    if state.w_prev is None:
        return np.zeros(len(state.U), dtype=np.float64)
    prev2d = np.asarray(state.w_prev, dtype=np.float64).reshape(task_grad_w2d.shape)
    gated = drelu(prev2d, A_t, tau)
    return np.sum(task_grad_w2d * gated, axis=1)


def update_U(state, grad, eta3):
    """Absolute-value step on U; nonnegativity holds by construction."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.U.shape:
        raise ShapeError(f"gradient shape {grad.shape} != U shape {state.U.shape}")
    return BacktrackState(
        U=np.abs(state.U - eta3 * grad), w_prev=state.w_prev, A_prev=state.A_prev
    )


def trace_backtrack_oracle(w2d, residual, dA_dw, rtol=1e-10):
    """Verify the trace identity behind the backtracking derivation.

    For each channel i the exact coupled-gradient correction is
    sum_j Tr(wG_hat * dA/dw_ij) where dA/dw_ij is the I x I single-entry
    matrix E_ii * dA_dw[i, j]. Path (a) evaluates those traces with full
    matrix products; path (b) uses the closed form
    (w_i . g_hat_i) * sum_j dA_dw[i, j]. Raises DerivationCheckError if the
    paths disagree beyond rtol, else returns the negated closed forms.
    """
    w2d = np.asarray(w2d, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    dA_dw = np.asarray(dA_dw, dtype=np.float64)
    if w2d.shape != residual.shape or w2d.shape != dA_dw.shape:
        raise ShapeError(
            f"shape mismatch: w {w2d.shape}, residual {residual.shape}, dA_dw {dA_dw.shape}"
        )
    n_i = w2d.shape[0]
    wg = w2d @ residual.T  # wg[k, m] = <w_k, g_hat_m>
    full = np.empty(n_i)
    for i in range(n_i):
        acc = 0.0
        for j in range(w2d.shape[1]):
            da = np.zeros((n_i, n_i))
            da[i, i] = dA_dw[i, j]
            acc += np.trace(wg @ da)
        full[i] = acc
    closed = np.diag(wg) * np.sum(dA_dw, axis=1)
    # Normalize by the summed term magnitudes: the two paths differ only in
    # summation order, so cancellation can leave roundoff-sized residues that
    # are meaningless relative to the terms that cancelled.
    scale_ref = np.maximum(
        np.abs(np.diag(wg)) * np.sum(np.abs(dA_dw), axis=1),
        np.maximum(np.abs(full), np.abs(closed)),
    )
    bad = np.abs(full - closed) > rtol * scale_ref
    if np.any(bad):
        raise DerivationCheckError(
            f"trace paths disagree: full {full}, closed {closed}"
        )
    return -closed
