"""Row softmax, its Jacobian, and exact derivative tensors."""
from __future__ import annotations

import numpy as np

from . import _backend
from .errors import NotProbabilityVector, ShapeMismatch

PROB_TOL = 1e-8


def softmax_rows(s):
    """Row-wise softmax with max subtraction; accepts ``(T1, T2)`` or batches."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return _backend.softmax_rows_batch(s[None])[0]
    if s.ndim == 2:
        return _backend.softmax_rows_batch(s)
    flat = s.reshape((-1,) + s.shape[-2:])
    return _backend.softmax_rows_batch(flat).reshape(s.shape)


def _check_prob(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeMismatch(f"{name} must be a vector")
    if p.min() < -PROB_TOL or abs(p.sum() - 1.0) > PROB_TOL:
        raise NotProbabilityVector(f"{name} is not a probability vector")
    return p


def softmax_jacobian(a):
    """``J = diag(a) - a a^T`` for a probability vector ``a``."""
    a = np.asarray(a, dtype=np.float64)
    return np.diag(a) - np.outer(a, a)


def softmax_jacobian_trace(a1_row, a2_row, m, n):
    """``Tr(J1^T M J2 N^T)`` for one pair of attention rows.

    Uses the four-term Hadamard expansion; see :func:`jacobian_trace_matrix`
    for the all-pairs form.
    """
    p = _check_prob(a1_row, "a1_row")
    q = _check_prob(a2_row, "a2_row")
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if m.shape != (p.size, q.size) or n.shape != m.shape:
        raise ShapeMismatch("m, n must be len(a1_row) x len(a2_row)")
    mq, nq = m @ q, n @ q
    pm, pn = p @ m, p @ n
    return float(p @ (m * n) @ q - p @ (mq * nq) - (pm * pn) @ q + (p @ mq) * (p @ nq))


def jacobian_trace_matrix(a1, a2, m, n):
    """All-pairs trace matrix ``T[a, b] = Tr(J(a1[a])^T M J(a2[b]) N^T)``.

    O(T^3); ``a1``/``a2`` are row-stochastic and may carry a leading batch axis.
    """
    return _backend.jacobian_trace_batch_numpy(np.asarray(a1, float), np.asarray(a2, float),
                                               np.asarray(m, float), np.asarray(n, float))


# -- exact derivative tensors of a = softmax(s) -------------------------------

def softmax_grad(a):
    """``G[c, e] = d a_c / d s_e``."""
    a = np.asarray(a, dtype=np.float64)
    lmat = np.eye(a.size) - a[None, :]
    return a[:, None] * lmat


def softmax_hessian(a):
    """``H[c, e, b] = d^2 a_c / d s_e d s_b``."""
    a = np.asarray(a, dtype=np.float64)
    lm = np.eye(a.size) - a[None, :]  # lm[c, e] = delta_ce - a_e
    term = lm[:, :, None] * lm[:, None, :] - (a[:, None] * lm)[None, :, :]
    return a[:, None, None] * term


def softmax_third(a):
    """``D[c, e, b, r] = d^3 a_c / d s_e d s_b d s_r``."""
    a = np.asarray(a, dtype=np.float64)
    lm = np.eye(a.size) - a[None, :]  # L[c, e]
    al = a[:, None] * lm  # a_e L[e, b]
    c_ = (slice(None), None, None, None)
    d = (lm[:, None, None, :] * (lm[:, :, None, None] * lm[:, None, :, None]
                                 - al[None, :, :, None])
         - al[None, :, None, :] * lm[:, None, :, None]
         - al[None, None, :, :] * lm[:, :, None, None]
         - al[None, :, None, :] * lm[None, :, :, None]
         + a[None, :, None, None] * al[None, None, :, :])
    return a[c_] * d
