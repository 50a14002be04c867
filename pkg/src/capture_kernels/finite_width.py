"""Finite-width simplified transformer: forward pass, empirical kernels, FLOPs.

Each block is multi-head attention without output projection or residual
(heads averaged with ``1/sqrt(H)``), LayerNorm and a single linear layer
applied to ``phi(LayerNorm(z))``.

Two samplers produce the empirical covariance of hidden states over weight
draws:

* ``method="explicit"`` materialises every weight matrix and runs
  :func:`forward`.  Exact but memory-bound at large ``H * d_model``.
* ``method="reduced"`` samples the same joint law directly in the span of the
  ``2T`` input tokens.  Given the hidden Gram matrix ``G`` of both inputs, the
  query/key/value columns are i.i.d. ``N(0, G)``, so heads can be drawn as
  ``chol(G) @ N`` and the attention output as ``chol(C) @ N`` with
  ``C = mean_h A_h G A_h^T``.  Cost per draw is ``O(H T^2 d_k + T^2 d_model)``
  and never touches a ``d_model x d_model`` matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ShapeMismatch
from .softmax import softmax_rows

TAPS = ("pre_attn_out", "post_ln", "post_mlp", "scores")


@dataclass(frozen=True)
class FiniteDims:
    d_in: int
    d_model: int = 64
    n_heads: int = 1
    n_layers: int = 1
    d_k: int | None = None
    sigma_w: float = 1.0
    sigma_b: float = 0.0
    activation: str = "relu"
    ln_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("d_in", "d_model", "n_heads", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_k is None:
            object.__setattr__(self, "d_k", max(1, self.d_model // self.n_heads))
        if self.d_k < 1:
            raise ValueError("d_k must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class FiniteParams:
    dims: FiniteDims
    w_emb: np.ndarray
    blocks: list = field(default_factory=list)


def _phi(x, activation):
    if activation == "relu":
        return np.maximum(x, 0.0)
    return x * ndtr(x)


def init_params(dims: FiniteDims, seed) -> FiniteParams:
    """Draw all weights: attention ``N(0, 1/d_model)``, MLP ``N(0, sigma_w^2/d_model)``."""
    rng = np.random.default_rng(seed)
    dm, dk, h = dims.d_model, dims.d_k, dims.n_heads
    w_emb = rng.standard_normal((dims.d_in, dm)) / math.sqrt(dims.d_in)
    blocks = []
    for _ in range(dims.n_layers):
        sd = 1.0 / math.sqrt(dm)
        blocks.append({
            "w_q": rng.standard_normal((h, dm, dk)) * sd,
            "w_k": rng.standard_normal((h, dm, dk)) * sd,
            "w_v": rng.standard_normal((h, dm, dm)) * sd,
            "gamma": np.ones(dm),
            "beta": np.zeros(dm),
            "w_mlp": rng.standard_normal((dm, dm)) * dims.sigma_w * sd,
            "b_mlp": rng.standard_normal(dm) * dims.sigma_b,
        })
    return FiniteParams(dims, w_emb, blocks)


class FlopCounter:
    """Tallies FLOPs: ``2mkn`` per matmul, 3 per softmax entry, 1 per scaled score."""

    def __init__(self):
        self.total = 0

    def matmul(self, a, b):
        out = a @ b
        batch = int(np.prod(out.shape[:-2]))
        self.total += 2 * a.shape[-2] * a.shape[-1] * b.shape[-1] * batch
        return out

    def softmax(self, s):
        self.total += 3 * s.size
        return softmax_rows(s)

    def scale(self, s, c):
        self.total += s.size
        return s * c


class _NoCount(FlopCounter):
    def matmul(self, a, b):
        return a @ b

    def softmax(self, s):
        return softmax_rows(s)

    def scale(self, s, c):
        return s * c


def layernorm(z, gamma, beta, eps):
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    var = np.mean(zc * zc, axis=-1, keepdims=True)
    return gamma * zc / np.sqrt(var + eps) + beta


def forward(x, params: FiniteParams, counter: FlopCounter | None = None):
    """Run the stack on ``x`` (``T x d_in``).

    Returns ``(hidden, out)`` where ``hidden`` is a list of per-block dicts with
    keys ``scores`` (``H x T x T``), ``attn`` (attention output), ``ln`` and
    ``mlp``.  Only block arithmetic is counted by ``counter``.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = params.dims
    if x.ndim != 2 or x.shape[1] != dims.d_in:
        raise ShapeMismatch(f"x must be T x {dims.d_in}, got {x.shape}")
    c = counter if counter is not None else _NoCount()
    z = x @ params.w_emb
    hidden = []
    for blk in params.blocks:
        q = c.matmul(z[None], blk["w_q"])
        k = c.matmul(z[None], blk["w_k"])
        v = c.matmul(z[None], blk["w_v"])
        s = c.scale(c.matmul(q, np.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dims.d_k))
        a = c.softmax(s)
        att = c.matmul(a, v).sum(axis=0) / math.sqrt(dims.n_heads)
        ln = layernorm(att, blk["gamma"], blk["beta"], dims.ln_epsilon)
        out = c.matmul(_phi(ln, dims.activation), blk["w_mlp"]) + blk["b_mlp"]
        hidden.append({"scores": s, "attn": att, "ln": ln, "mlp": out})
        z = out
    return hidden, z


def flop_count(n_layers, n_heads, d_model, d_k, t) -> int:
    """Closed-form FLOPs of one forward pass (softmax at 3 FLOPs per entry)."""
    for v in (n_layers, n_heads, d_model, d_k, t):
        if int(v) < 1:
            raise ValueError("all arguments must be positive")
    L, H, d, dk, T = (int(v) for v in (n_layers, n_heads, d_model, d_k, t))
    per_head = 4 * T * d * dk + 2 * T * d * d + 2 * T * T * dk + 3 * T * T + 2 * T * T * d
    return L * (H * per_head + 2 * T * d * d)


# ---------------------------------------------------------------------------
# reduced sampler

def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def _gaussian_product(rng, h, n, dk):
    """``h`` draws of ``Nq @ Nk^T`` for independent ``n x dk`` standard normals.

    For ``dk >= n`` this uses ``Nk Nk^T ~ Wishart(dk, I)`` (Bartlett factor
    ``B``) and ``Nq Nk^T = N B^T`` in law, at ``O(n^3)`` cost per head.
    """
    if dk < n:
        nq = rng.standard_normal((h, n, dk))
        nk = rng.standard_normal((h, n, dk))
        return nq @ np.swapaxes(nk, -1, -2)
    b = np.zeros((h, n, n))
    idx = np.arange(n)
    b[:, idx, idx] = np.sqrt(rng.chisquare(dk - idx, size=(h, n)))
    low = np.tril_indices(n, -1)
    b[:, low[0], low[1]] = rng.standard_normal((h, len(low[0])))
    return rng.standard_normal((h, n, n)) @ np.swapaxes(b, -1, -2)


def _reduced_draw(x_joint, t1, dims: FiniteDims, rng, want_scores=False):
    """One weight draw in Gram space; returns per-block Gram matrices."""
    dm, dk, h = dims.d_model, dims.d_k, dims.n_heads
    n = x_joint.shape[0]
    root = _psd_sqrt(x_joint @ x_joint.T / dims.d_in)
    g = None
    coords = root @ rng.standard_normal((n, dm))  # embedded tokens, one column per coordinate
    out = []
    for _ in range(dims.n_layers):
        if g is None:
            g = coords @ coords.T / dm
        lg = _psd_sqrt(g)
        s_all = lg @ _gaussian_product(rng, h, n, dk) @ lg.T / math.sqrt(dk)
        a = np.zeros((h, n, n))
        a[:, :t1, :t1] = softmax_rows(s_all[:, :t1, :t1])
        a[:, t1:, t1:] = softmax_rows(s_all[:, t1:, t1:])
        c = np.mean(a @ g @ np.swapaxes(a, -1, -2), axis=0)
        z = _psd_sqrt(c) @ rng.standard_normal((n, dm))
        rec = {"pre_attn_out": z @ z.T / dm}
        if want_scores:
            rec["scores"] = (s_all[:, :t1, :t1], s_all[:, t1:, t1:])
        ln = layernorm(z, 1.0, 0.0, dims.ln_epsilon)
        rec["post_ln"] = ln @ ln.T / dm
        f = _phi(ln, dims.activation)
        k_mlp = dims.sigma_w ** 2 * (f @ f.T) / dm + dims.sigma_b ** 2
        coords = _psd_sqrt(k_mlp) @ rng.standard_normal((n, dm))
        g = coords @ coords.T / dm
        rec["post_mlp"] = g
        out.append(rec)
    return out


def _explicit_draw(x1, x2, dims, rng, want_scores=False):
    params = init_params(dims, rng)
    h1, _ = forward(x1, params)
    h2, _ = forward(x2, params)
    dm = dims.d_model
    out = []
    for b1, b2 in zip(h1, h2):
        rec = {}
        for tap, key in (("pre_attn_out", "attn"), ("post_ln", "ln"), ("post_mlp", "mlp")):
            zz = np.vstack([b1[key], b2[key]])
            rec[tap] = zz @ zz.T / dm
        if want_scores:
            rec["scores"] = (b1["scores"], b2["scores"])
        out.append(rec)
    return out


@dataclass
class EmpiricalCov:
    matrix: np.ndarray
    stderr: np.ndarray
    n_draws: int


class _Welford:
    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, x):
        self.n += 1
        if self.mean is None:
            self.mean = np.zeros_like(x)
            self.m2 = np.zeros_like(x)
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def result(self):
        var = self.m2 / (self.n - 1)
        return EmpiricalCov(self.mean, np.sqrt(var / self.n), self.n)


def empirical_covariance(x1, x2, dims: FiniteDims, n_draws: int, seed, tap: str,
                         method: str = "reduced", block: int = -1,
                         which: str = "12", min_draws: int = 100) -> EmpiricalCov:
    """Average of ``(1/d_model) z_a(X1)^T z_b(X2)`` over independent weight draws.

    ``tap="scores"`` instead returns the 4-index array ``E[S1_ac S2_be]``
    (indexed ``[a, c, b, e]``), averaged over heads.  ``which`` selects the
    ``"11"``, ``"12"`` or ``"22"`` block of the joint Gram.
    """
    if tap not in TAPS:
        raise ValueError(f"tap must be one of {TAPS}")
    if n_draws < min_draws:
        raise ValueError(f"n_draws must be >= {min_draws}")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.ndim != 2 or x2.ndim != 2 or x1.shape[1] != dims.d_in or x2.shape[1] != dims.d_in:
        raise ShapeMismatch("inputs must be T x d_in")
    t1 = x1.shape[0]
    sl = {"1": slice(0, t1), "2": slice(t1, None)}
    rows, cols = sl[which[0]], sl[which[1]]
    joint = np.vstack([x1, x2])
    acc = _Welford()
    scores = tap == "scores"
    for i in range(n_draws):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        if method == "reduced":
            recs = _reduced_draw(joint, t1, dims, rng, want_scores=scores)
        elif method == "explicit":
            recs = _explicit_draw(x1, x2, dims, rng, want_scores=scores)
        else:
            raise ValueError(f"unknown method {method!r}")
        rec = recs[block]
        if scores:
            s_a = rec["scores"][int(which[0]) - 1]
            s_b = rec["scores"][int(which[1]) - 1]
            acc.add(np.einsum("hac,hbe->acbe", s_a, s_b) / s_a.shape[0])
        else:
            acc.add(rec[tap][rows, cols])
    return acc.result()
