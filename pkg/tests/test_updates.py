import numpy as np
import pytest

from binnet.binary import EPS_A, ScaleDiag
from binnet.tensor_ops import ShapeError
from binnet.updates import (
    BacktrackState,
    DerivationCheckError,
    backtrack_w,
    density_mask,
    drelu,
    grad_U,
    trace_backtrack_oracle,
    update_A,
    update_U,
)


def brute_force_mask(values, tau):
    """Rank each value 1..C ascending (stable: ties by index), flag rank > T."""
    c = len(values)
    t = int(c * tau)
    order = sorted(range(c), key=lambda i: (values[i], i))
    rank = {idx: pos + 1 for pos, idx in enumerate(order)}
    return np.array([rank[i] > t for i in range(c)])


# --- density mask ---


def test_density_mask_one_to_ten():
    m = density_mask(np.arange(1.0, 11.0), 0.6)
    assert m.threshold_T == 6
    assert np.array_equal(m.mask, np.arange(1, 11) > 6)  # 7,8,9,10 flagged


def test_density_mask_tau_extremes():
    v = np.array([3.0, 1.0, 2.0])
    assert not density_mask(v, 1.0).mask.any()
    assert density_mask(v, 0.0).mask.all()


def test_density_mask_count_when_distinct():
    rng = np.random.default_rng(0)
    for _ in range(30):
        c = int(rng.integers(2, 20))
        v = rng.permutation(c).astype(float)
        tau = float(rng.uniform(0, 1))
        m = density_mask(v, tau)
        assert int(m.mask.sum()) == c - m.threshold_T


def test_density_mask_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = int(rng.integers(1, 12))
        v = rng.integers(0, 4, c).astype(float)  # plenty of ties
        tau = float(rng.uniform(0, 1))
        assert np.array_equal(density_mask(v, tau).mask, brute_force_mask(v, tau))


def test_density_mask_rejects_bad_tau():
    with pytest.raises(ValueError):
        density_mask(np.ones(3), 1.5)
    with pytest.raises(ValueError):
        density_mask(np.ones(3), -0.1)


# --- drelu gate ---


def brute_force_drelu(w2d, inv_alpha, tau):
    norms = np.sum(np.abs(w2d), axis=1)
    keep = ~brute_force_mask(norms, tau) & brute_force_mask(inv_alpha, tau)
    out = w2d.copy()
    out[~keep] = 0.0
    return out


def test_drelu_tau_one_is_zero():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 5))
    assert np.array_equal(drelu(w, ScaleDiag(rng.uniform(0.1, 2, 4)), 1.0),
                          np.zeros_like(w))


def test_drelu_documented_three_channel_case():
    # l1 norms [3, 1, 2], inv_alpha [0.1, 5, 4], tau = 0.6 -> T = 1.
    # weight-norm mask flags ranks > 1 -> rows 0 and 2 are weight-dense;
    # scale mask flags ranks > 1 -> rows 1 and 2 are scale-dense.
    # keep = (not weight-dense) and scale-dense -> only row 1 survives.
    w = np.array([[1.0, -1.0, 1.0], [0.5, 0.25, 0.25], [1.0, 0.5, 0.5]])
    out = drelu(w, ScaleDiag(np.array([0.1, 5.0, 4.0])), 0.6)
    expected = np.zeros_like(w)
    expected[1] = w[1]
    assert np.array_equal(out, expected)
    assert np.array_equal(out, brute_force_drelu(w, np.array([0.1, 5.0, 4.0]), 0.6))


def test_drelu_matches_brute_force_randomized():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(1, 8))
        j = int(rng.integers(1, 6))
        w = rng.standard_normal((c, j))
        inv = rng.uniform(0.1, 3.0, c)
        tau = float(rng.uniform(0, 1))
        assert np.array_equal(drelu(w, ScaleDiag(inv), tau),
                              brute_force_drelu(w, inv, tau))


def test_drelu_ties_resolved_by_channel_index():
    # identical norms and scales: stable ranks are 1..C by index, so with
    # T = 1 the weight mask keeps only channel 0 low-density while the scale
    # mask flags channels 1.. as dense -> no row satisfies both for channel 0,
    # rows 1.. are weight-dense. Brute force is the arbiter.
    w = np.ones((3, 2))
    inv = np.full(3, 2.0)
    out = drelu(w, ScaleDiag(inv), 0.5)
    assert np.array_equal(out, brute_force_drelu(w, inv, 0.5))


# --- scale update ---


def test_update_A_arithmetic():
    s = update_A(ScaleDiag(np.array([0.5])), np.array([600.0]), 1e-3)
    assert s.inv_alpha[0] == pytest.approx(0.1)


def test_update_A_zero_grad_unchanged():
    s = ScaleDiag(np.array([0.3, 0.7]))
    out = update_A(s, np.zeros(2), 1e-3)
    assert np.array_equal(out.inv_alpha, s.inv_alpha)


def test_update_A_floor():
    s = update_A(ScaleDiag(np.array([0.1])), np.array([100.0]), 1e-3)
    assert s.inv_alpha[0] == EPS_A


def test_update_A_absolute_value_reflection():
    s = update_A(ScaleDiag(np.array([0.1])), np.array([300.0]), 1e-3)
    assert s.inv_alpha[0] == pytest.approx(0.2)  # |0.1 - 0.3|


def test_update_A_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        update_A(ScaleDiag(np.ones(2)), np.zeros(3), 1e-3)


# --- backtracking ---


def test_backtrack_identity_when_gate_closed():
    rng = np.random.default_rng(4)
    w_van = rng.standard_normal((2, 1, 2, 2))
    w_t = rng.standard_normal((2, 1, 2, 2))
    scale = ScaleDiag(np.array([1.0, 2.0]))
    state = BacktrackState(U=np.array([0.5, 0.5]))
    assert np.array_equal(backtrack_w(w_van, w_t, scale, state, 1.0), w_van)


def test_backtrack_identity_when_U_zero():
    rng = np.random.default_rng(5)
    w_van = rng.standard_normal((2, 3))
    w_t = rng.standard_normal((2, 3))
    out = backtrack_w(w_van, w_t, ScaleDiag(np.array([0.5, 2.0])),
                      BacktrackState.fresh(2), 0.5)
    assert np.array_equal(out, w_van)


def test_backtrack_hand_computed_2x3():
    # tau = 0.5 -> T = 1. l1 norms [0.6, 3.0]: row 0 low-density, row 1 dense.
    # inv_alpha [0.2, 5.0]: row 1 scale-dense, row 0 not.
    # No row passes both -> try scales [5.0, 0.2] so row 0 passes.
    w_t = np.array([[0.1, -0.2, 0.3], [1.0, 1.0, 1.0]])
    w_van = np.zeros((2, 3))
    state = BacktrackState(U=np.array([2.0, 2.0]))
    out = backtrack_w(w_van, w_t, ScaleDiag(np.array([5.0, 0.2])), state, 0.5)
    expected = np.zeros((2, 3))
    expected[0] = 2.0 * w_t[0]
    assert np.allclose(out, expected)


def test_grad_U_zero_on_first_iteration():
    state = BacktrackState.fresh(3)
    g = grad_U(np.ones((3, 4)), state, ScaleDiag(np.ones(3)), 0.5)
    assert np.array_equal(g, np.zeros(3))


def test_grad_U_passing_row_is_inner_product():
    # tau = 0.5, T = 1: row 0 has the small weight norm and the large
    # inv_alpha, so its gate opens; row 1 stays closed.
    w_prev = np.array([[0.3, -0.4], [2.0, 2.0]])
    task_grad = np.array([[2.0, 5.0], [1.0, 1.0]])
    state = BacktrackState(U=np.zeros(2), w_prev=w_prev)
    g = grad_U(task_grad, state, ScaleDiag(np.array([3.0, 0.5])), 0.5)
    assert g[0] == pytest.approx(2.0 * 0.3 + 5.0 * (-0.4))
    assert g[1] == 0.0


def test_grad_U_matches_finite_difference_through_backtrack():
    """grad_U is the exact derivative of L(backtrack_w(...)) in U for a
    linear task loss L(w) = sum(task_grad * w)."""
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(20):
        c, j = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        tau = float(rng.uniform(0, 1))
        w_prev = rng.standard_normal((c, j))
        w_van = rng.standard_normal((c, j))
        task_grad = rng.standard_normal((c, j))
        scale = ScaleDiag(rng.uniform(0.2, 2.0, c))
        u0 = rng.uniform(0, 1, c)
        state = BacktrackState(U=u0.copy(), w_prev=w_prev)
        analytic = grad_U(task_grad, state, scale, tau)

        def loss(u):
            st = BacktrackState(U=u, w_prev=w_prev)
            w_hat = backtrack_w(w_van, w_prev, scale, st, tau)
            return float(np.sum(task_grad * w_hat))

        for i in range(c):
            up, dn = u0.copy(), u0.copy()
            up[i] += h
            dn[i] -= h
            fd = (loss(up) - loss(dn)) / (2 * h)
            assert abs(analytic[i] - fd) < 1e-5 * max(1.0, abs(fd))


def test_update_U_arithmetic_and_reflection():
    state = BacktrackState(U=np.array([0.2, 0.05, 0.4]))
    out = update_U(state, np.array([1000.0, 1000.0, 0.0]), 1e-4)
    assert np.allclose(out.U, [0.1, 0.05, 0.4])
    assert np.all(out.U >= 0)


def test_update_U_preserves_snapshot():
    w_prev = np.ones((2, 2))
    state = BacktrackState(U=np.zeros(2), w_prev=w_prev)
    out = update_U(state, np.ones(2), 1e-4)
    assert out.w_prev is w_prev


def test_update_U_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        update_U(BacktrackState.fresh(2), np.zeros(3), 1e-4)


# --- trace identity oracle ---


def test_trace_oracle_zero_map():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((3, 4))
    resid = rng.standard_normal((3, 4))
    d = trace_backtrack_oracle(w, resid, np.zeros((3, 4)))
    assert np.array_equal(d, np.zeros(3))


def test_trace_oracle_hand_case_1x1():
    # w = [2], inv_alpha = 1 -> residual 2 - 1 = 1; dA/dw = -0.25
    # closed form: <w, g> * dA/dw = 2 * 1 * (-0.25) = -0.5; d = +0.5
    d = trace_backtrack_oracle(np.array([[2.0]]), np.array([[1.0]]),
                               np.array([[-0.25]]))
    assert d[0] == pytest.approx(0.5)


def test_trace_oracle_l1_mapping_random():
    """dA/dw from A_ii = J / ||w_i||_1: both trace paths must agree."""
    rng = np.random.default_rng(8)
    for _ in range(25):
        n_i, n_j = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        w = rng.standard_normal((n_i, n_j))
        w = np.where(np.abs(w) < 0.05, 0.05, w)
        norms = np.sum(np.abs(w), axis=1)
        inv = np.maximum(n_j / norms, EPS_A)
        resid = inv[:, None] * w - np.sign(w)
        da = -n_j * np.sign(w) / (norms ** 2)[:, None]
        d = trace_backtrack_oracle(w, resid, da)
        expected = -np.sum(w * resid, axis=1) * np.sum(da, axis=1)
        assert np.allclose(d, expected, rtol=1e-12)


def test_trace_oracle_detects_broken_identity(monkeypatch):
    """Force the full-matrix path to return a wrong trace: the oracle must
    refuse rather than silently return the closed form."""
    monkeypatch.setattr(np, "trace", lambda m: float(np.sum(np.diagonal(m))) + 1.0)
    with pytest.raises(DerivationCheckError):
        trace_backtrack_oracle(np.array([[2.0]]), np.array([[1.0]]),
                               np.array([[-0.25]]))


def test_trace_oracle_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        trace_backtrack_oracle(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 2)))
