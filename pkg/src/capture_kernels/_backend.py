"""Hot inner kernels with a numba path and a pure-numpy fallback.

The active backend is read from ``CAPTURE_KERNELS_BACKEND`` (``numba`` or
``numpy``) at import time and can be switched at runtime with
:func:`set_backend`.  Both paths are kept numerically interchangeable; the
test-suite runs every kernel through both and compares.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("CAPTURE_KERNELS_BACKEND", "numba").strip().lower()
    if name not in _VALID:
        warnings.warn(f"unknown CAPTURE_KERNELS_BACKEND={name!r}; using numpy")
        name = "numpy"
    if name == "numba" and not HAVE_NUMBA:
        name = "numpy"
    return name


_BACKEND = _initial_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _BACKEND
    name = name.lower()
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    prev, _BACKEND = _BACKEND, name
    return prev


# ---------------------------------------------------------------------------
# softmax over the last axis of a batch of score matrices

def softmax_rows_numpy(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_numba_impl(s):
    n, t1, t2 = s.shape
    out = np.empty_like(s)
    for i in range(n):
        for a in range(t1):
            m = s[i, a, 0]
            for c in range(1, t2):
                if s[i, a, c] > m:
                    m = s[i, a, c]
            tot = 0.0
            for c in range(t2):
                v = np.exp(s[i, a, c] - m)
                out[i, a, c] = v
                tot += v
            for c in range(t2):
                out[i, a, c] /= tot
    return out


# ---------------------------------------------------------------------------
# Per-draw attention moments.
#
# For a batch of attention pairs (A1, A2) and fixed covariance blocks
# sig (T1 x T2) and optionally theta (T1 x T2), accumulate
#   v_sig   = A1 sig A2^T
#   v_theta = 2 A1 sig A2^T + A1 theta A2^T
#             + (2 sig + theta) * Tr(sig, sig) + sig * Tr(sig, theta)
# where Tr(M, N) is the Hadamard-form softmax Jacobian trace matrix.
# Returns running sums and sums of squares over the batch.

def jacobian_trace_batch_numpy(a1, a2, m, n):
    """Hadamard-form Tr((J1^a)^T M J2^b N^T) for every (a, b), batched."""
    a2t = np.swapaxes(a2, -1, -2)
    t1 = a1 @ (m * n) @ a2t
    t2 = a1 @ ((m @ a2t) * (n @ a2t))
    t3 = ((a1 @ m) * (a1 @ n)) @ a2t
    t4 = (a1 @ m @ a2t) * (a1 @ n @ a2t)
    return t1 - t2 - t3 + t4


def attention_moments_numpy(a1, a2, sig, theta=None):
    a2t = np.swapaxes(a2, -1, -2)
    a1s = a1 @ sig
    v_sig = a1s @ a2t
    out = [v_sig.sum(axis=0), np.square(v_sig).sum(axis=0)]
    if theta is not None:
        v_th = 2.0 * v_sig + a1 @ theta @ a2t
        sa2 = sig @ a2t
        # trace with (M, N) = (sig, sig)
        tr_ss = (a1 @ (sig * sig) @ a2t - a1 @ (sa2 * sa2)
                 - (a1s * a1s) @ a2t + v_sig * v_sig)
        ta2 = theta @ a2t
        a1t = a1 @ theta
        v_at = a1t @ a2t
        tr_st = (a1 @ (sig * theta) @ a2t - a1 @ (sa2 * ta2)
                 - (a1s * a1t) @ a2t + v_sig * v_at)
        v_th = v_th + (2.0 * sig + theta) * tr_ss + sig * tr_st
        out += [v_th.sum(axis=0), np.square(v_th).sum(axis=0)]
    return tuple(out)


def _attention_moments_numba_impl(a1, a2, sig, theta, with_theta):
    n, t1, _ = a1.shape
    t2 = a2.shape[1]
    s_sum = np.zeros((t1, t2))
    s_sq = np.zeros((t1, t2))
    th_sum = np.zeros((t1, t2))
    th_sq = np.zeros((t1, t2))
    sig2 = sig * sig
    sigth = sig * theta
    for i in range(n):
        A1 = np.ascontiguousarray(a1[i])
        A2T = np.ascontiguousarray(a2[i].T)
        a1s = A1 @ sig
        v = a1s @ A2T
        s_sum += v
        s_sq += v * v
        if with_theta:
            sa2 = sig @ A2T
            ta2 = theta @ A2T
            a1t = A1 @ theta
            vat = a1t @ A2T
            tr_ss = (A1 @ sig2 @ A2T - A1 @ (sa2 * sa2)
                     - (a1s * a1s) @ A2T + v * v)
            tr_st = (A1 @ sigth @ A2T - A1 @ (sa2 * ta2)
                     - (a1s * a1t) @ A2T + v * vat)
            w = 2.0 * v + vat + (2.0 * sig + theta) * tr_ss + sig * tr_st
            th_sum += w
            th_sq += w * w
    return s_sum, s_sq, th_sum, th_sq


# ---------------------------------------------------------------------------
# CYK chart.  chart[i, l, v] is True when variable v derives tokens[i:i+l].

def cyk_chart_numpy(tokens, term_mask, bin_rules, n_vars):
    t = len(tokens)
    chart = np.zeros((t, t + 1, n_vars), dtype=bool)
    if t == 0:
        return chart
    chart[:, 1, :] = term_mask[tokens]
    if len(bin_rules) == 0:
        return chart
    lhs, b, c = bin_rules[:, 0], bin_rules[:, 1], bin_rules[:, 2]
    scatter = np.zeros((len(bin_rules), n_vars))
    scatter[np.arange(len(bin_rules)), lhs] = 1.0
    for length in range(2, t + 1):
        n_start = t - length + 1
        hit = np.zeros((n_start, len(bin_rules)), dtype=bool)
        for k in range(1, length):
            left = chart[:n_start, k][:, b]
            right = chart[k:k + n_start, length - k][:, c]
            hit |= left & right
        chart[:n_start, length] = (hit.astype(float) @ scatter) > 0
    return chart


def _cyk_chart_numba_impl(tokens, term_mask, bin_rules, n_vars):
    t = tokens.shape[0]
    chart = np.zeros((t, t + 1, n_vars), dtype=np.bool_)
    for i in range(t):
        for v in range(n_vars):
            chart[i, 1, v] = term_mask[tokens[i], v]
    n_rules = bin_rules.shape[0]
    for length in range(2, t + 1):
        for i in range(t - length + 1):
            for r in range(n_rules):
                a = bin_rules[r, 0]
                if chart[i, length, a]:
                    continue
                b = bin_rules[r, 1]
                c = bin_rules[r, 2]
                for k in range(1, length):
                    if chart[i, k, b] and chart[i + k, length - k, c]:
                        chart[i, length, a] = True
                        break
    return chart


if HAVE_NUMBA:
    _softmax_rows_numba = njit(cache=True)(_softmax_rows_numba_impl)
    _attention_moments_numba = njit(cache=True)(_attention_moments_numba_impl)
    _cyk_chart_numba = njit(cache=True)(_cyk_chart_numba_impl)


def softmax_rows_numba(s):
    return _softmax_rows_numba(np.ascontiguousarray(s, dtype=np.float64))


def attention_moments_numba(a1, a2, sig, theta=None):
    a1 = np.ascontiguousarray(a1, dtype=np.float64)
    a2 = np.ascontiguousarray(a2, dtype=np.float64)
    sig = np.ascontiguousarray(sig, dtype=np.float64)
    with_theta = theta is not None
    th = (np.ascontiguousarray(theta, dtype=np.float64) if with_theta
          else np.zeros_like(sig))
    out = _attention_moments_numba(a1, a2, sig, th, with_theta)
    return out if with_theta else out[:2]


def cyk_chart_numba(tokens, term_mask, bin_rules, n_vars):
    return _cyk_chart_numba(np.ascontiguousarray(tokens, dtype=np.int64),
                            np.ascontiguousarray(term_mask, dtype=np.bool_),
                            np.ascontiguousarray(bin_rules, dtype=np.int64).reshape(-1, 3),
                            int(n_vars))


# ---------------------------------------------------------------------------
# dispatch

def softmax_rows_batch(s):
    s = np.asarray(s, dtype=np.float64)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[None]
    out = softmax_rows_numba(s) if _BACKEND == "numba" else softmax_rows_numpy(s)
    return out[0] if squeeze else out


def attention_moments(a1, a2, sig, theta=None):
    if _BACKEND == "numba":
        return attention_moments_numba(a1, a2, sig, theta)
    return attention_moments_numpy(a1, a2, sig, theta)


def cyk_chart(tokens, term_mask, bin_rules, n_vars):
    tokens = np.asarray(tokens, dtype=np.int64)
    bin_rules = np.asarray(bin_rules, dtype=np.int64).reshape(-1, 3)
    if _BACKEND == "numba":
        return cyk_chart_numba(tokens, term_mask, bin_rules, n_vars)
    return cyk_chart_numpy(tokens, np.asarray(term_mask, dtype=bool), bin_rules, n_vars)
