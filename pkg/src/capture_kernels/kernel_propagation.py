"""NNGP / NTK covariance propagation through the simplified transformer.

A block is attention -> LayerNorm -> pointwise activation -> linear map.
The attention update is a Monte-Carlo average over joint score draws; the
LayerNorm and MLP updates are deterministic and token-wise.  All state lives
in :class:`KernelState`, which carries the ``(X1, X1)``, ``(X1, X2)`` and
``(X2, X2)`` blocks of the token-to-token covariance (and optionally NTK).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from . import _backend
from .errors import MissingNtk, NegativeVariance, NotPsd2x2, ShapeMismatch
from .score_sampler import DEFAULT_REPAIR, PsdRepair, ScorePairSampler
from .softmax import softmax_rows

BLOCKS = ("11", "12", "22")
_CHUNK_ELEMS = 1 << 20


@dataclass(frozen=True)
class BlockParams:
    sigma_w: float = 1.0
    sigma_b: float = 0.0
    activation: str = "relu"
    ln_epsilon: float = 1e-5
    gauss_hermite_order: int = 32
    # add the LayerNorm gain/shift gradients to the NTK (off = bare recursion)
    ln_param_grads: bool = True

    def __post_init__(self):
        if self.sigma_w < 0:
            raise ValueError("sigma_w must be nonnegative")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be nonnegative")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (0.0 <= self.ln_epsilon <= 1e-2):
            raise ValueError("ln_epsilon must lie in [0, 1e-2]")
        if self.gauss_hermite_order < 8:
            raise ValueError("gauss_hermite_order must be >= 8")


@dataclass(frozen=True)
class McConfig:
    n_mc: int = 4096
    seed: int = 0
    antithetic: bool = False
    workers: int = 1
    # average the (X1, X2) and (X2, X1) sampler orderings so that swapping
    # the inputs transposes the result exactly (doubles attention cost)
    symmetric: bool = False

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class KernelState:
    sigma11: np.ndarray
    sigma12: np.ndarray
    sigma22: np.ndarray
    theta11: np.ndarray | None = None
    theta12: np.ndarray | None = None
    theta22: np.ndarray | None = None
    layer_index: int = 0
    # per-entry standard errors, keyed "sigma12", "theta22", ...
    stderr: dict = field(default_factory=dict)
    # True when X1 and X2 are the same input (all blocks coincide)
    same_input: bool = False
    # diagnostics: degenerate_sigma11, se_amplification
    flags: dict = field(default_factory=dict)

    @property
    def has_ntk(self) -> bool:
        return self.theta11 is not None

    def block(self, kind: str, which: str) -> np.ndarray:
        return getattr(self, f"{kind}{which}")

    def se(self, kind: str, which: str) -> np.ndarray:
        b = self.block(kind, which)
        return self.stderr.get(f"{kind}{which}", np.zeros_like(b))

    def swapped(self) -> "KernelState":
        """The state of the pair ``(X2, X1)``."""
        out = KernelState(self.sigma22, self.sigma12.T, self.sigma11, layer_index=self.layer_index,
                          same_input=self.same_input, flags=dict(self.flags))
        if self.has_ntk:
            out.theta11, out.theta12, out.theta22 = self.theta22, self.theta12.T, self.theta11
        for k, v in self.stderr.items():
            w = k[-2:]
            nk = k[:-2] + {"11": "22", "22": "11", "12": "12"}[w]
            out.stderr[nk] = v.T if w == "12" else v
        return out

    def joint_sigma(self) -> np.ndarray:
        """The ``(T1+T2) x (T1+T2)`` joint covariance of both inputs."""
        return np.block([[self.sigma11, self.sigma12], [self.sigma12.T, self.sigma22]])


# ---------------------------------------------------------------------------
# embedding

def _special_flags(t, special):
    flags = np.zeros(t)
    if special is None:
        special = (0, t - 1)
    flags[list(special)] = 1.0
    return flags


def embed_covariance(x1, x2, pe: str = "none", special1=None, special2=None,
                     with_ntk: bool = True) -> KernelState:
    """Covariance of the embedded inputs, ``sigma[a, b] = x_a . x_b / d``.

    ``pe="special_token_flags"`` appends one indicator coordinate marking the
    special tokens (default: first and last) before the normalised product.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.ndim != 2 or x2.ndim != 2 or x1.shape[1] != x2.shape[1]:
        raise ShapeMismatch(f"inputs must be T x d with equal d, got {x1.shape}, {x2.shape}")
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
        raise ShapeMismatch("inputs must be finite")
    same = x1.shape == x2.shape and np.array_equal(x1, x2)
    if pe == "special_token_flags":
        x1 = np.column_stack([x1, _special_flags(len(x1), special1)])
        x2 = np.column_stack([x2, _special_flags(len(x2), special2)])
        same = same and (special1 == special2)
    elif pe != "none":
        raise ValueError(f"unknown pe mode {pe!r}")
    d = x1.shape[1]
    s11 = x1 @ x1.T / d
    s22 = s11.copy() if same else x2 @ x2.T / d
    s12 = s11.copy() if same else x1 @ x2.T / d
    st = KernelState(s11, s12, s22, same_input=same)
    if with_ntk:
        st.theta11, st.theta12, st.theta22 = s11.copy(), s12.copy(), s22.copy()
    return st


# ---------------------------------------------------------------------------
# attention

def _chunks(n, t, antithetic):
    size = max(2, _CHUNK_ELEMS // max(t * t, 1))
    if antithetic and size % 2:
        size += 1
    starts = list(range(0, n, size))
    return [(i, s, min(size, n - s)) for i, s in enumerate(starts)]


def _chunk_rng(mc: McConfig, layer: int, idx: int):
    return np.random.default_rng(np.random.SeedSequence(mc.seed, spawn_key=(layer, idx)))


def _moments_antithetic(a1, a2, sig, theta):
    """Sums over antithetic pairs: each pair contributes its mean value."""
    a2t = np.swapaxes(a2, -1, -2)
    v = a1 @ sig @ a2t
    out_v = [v]
    if theta is not None:
        vt = 2.0 * v + a1 @ theta @ a2t
        tr_ss = _backend.jacobian_trace_batch_numpy(a1, a2, sig, sig)
        tr_st = _backend.jacobian_trace_batch_numpy(a1, a2, sig, theta)
        out_v.append(vt + (2.0 * sig + theta) * tr_ss + sig * tr_st)
    res = []
    for x in out_v:
        h = x.shape[0] // 2
        pm = 0.5 * (x[:h] + x[h:2 * h])
        if x.shape[0] % 2:
            pm = np.concatenate([pm, x[-1:]])
        res += [pm.sum(axis=0), np.square(pm).sum(axis=0)]
    return tuple(res), (x.shape[0] + 1) // 2


def _blocks_coincide(state, shared, with_theta):
    # equal sigma blocks share draws, but one block suffices only if theta agrees too
    if state.same_input or not shared:
        return shared
    if not with_theta:
        return True
    return (np.array_equal(state.theta11, state.theta12)
            and np.array_equal(state.theta11, state.theta22))


def _attention_pass(state: KernelState, mc: McConfig, with_theta: bool,
                    repair: PsdRepair = DEFAULT_REPAIR):
    if with_theta and not state.has_ntk:
        raise MissingNtk("theta blocks are absent")
    sampler = ScorePairSampler(state.sigma11, state.sigma12, state.sigma22, repair)
    shared = state.same_input or sampler.identical
    same = _blocks_coincide(state, shared, with_theta)
    pairs = [("11", 0, 0)] if same else [("11", 0, 0), ("12", 0, 1), ("22", 1, 1)]
    tmax = max(sampler.t1, sampler.t2)
    chunks = _chunks(mc.n_mc, tmax, mc.antithetic)

    def run(chunk):
        idx, _, n = chunk
        s1, s2 = sampler.draw_batch(_chunk_rng(mc, state.layer_index, idx), n,
                                    antithetic=mc.antithetic)
        att = [softmax_rows(s1)]
        att.append(att[0] if shared else softmax_rows(s2))
        out = {}
        for name, i, j in pairs:
            sig = state.block("sigma", name)
            th = state.block("theta", name) if with_theta else None
            if mc.antithetic:
                out[name] = _moments_antithetic(att[i], att[j], sig, th)
            else:
                out[name] = (_backend.attention_moments(att[i], att[j], sig, th), n)
        return out

    if mc.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(mc.workers) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    # fixed chunk order keeps the sums independent of scheduling
    summary = {}
    for name, _, _ in pairs:
        sums = None
        count = 0
        for r in results:
            vals, n = r[name]
            sums = list(vals) if sums is None else [s + v for s, v in zip(sums, vals)]
            count += n
        summary[name] = (sums, count)
    return summary, sampler, same


def _mean_se(total, total_sq, n):
    mean = total / n
    if n < 2:
        return mean, np.full_like(mean, np.inf)
    var = np.clip((total_sq - n * mean * mean) / (n - 1), 0.0, None)
    return mean, np.sqrt(var / n)


def _prior_se(state, kind):
    vals = [state.stderr[k].max() for k in state.stderr if k.startswith(kind)]
    return max(vals) if vals else 0.0


def _assemble(state, summary, same, with_theta, sampler):
    new = replace(state, stderr={}, layer_index=state.layer_index + 1)
    prior_sig = _prior_se(state, "sigma")
    prior_th = _prior_se(state, "theta")
    for name, (sums, n) in summary.items():
        mean, se = _mean_se(sums[0], sums[1], n)
        setattr(new, f"sigma{name}", mean)
        # attention rows are convex weights: input error passes through unamplified
        new.stderr[f"sigma{name}"] = np.sqrt(se ** 2 + prior_sig ** 2)
        if with_theta:
            tmean, tse = _mean_se(sums[2], sums[3], n)
            setattr(new, f"theta{name}", tmean)
            new.stderr[f"theta{name}"] = np.sqrt(tse ** 2 + prior_th ** 2 + 4 * prior_sig ** 2)
    if same:
        for kind in ("sigma", "theta") if with_theta else ("sigma",):
            blk = getattr(new, f"{kind}11")
            sym = 0.5 * (blk + blk.T)
            setattr(new, f"{kind}11", sym)
            setattr(new, f"{kind}12", sym.copy())
            setattr(new, f"{kind}22", sym.copy())
            new.stderr[f"{kind}12"] = new.stderr[f"{kind}11"]
            new.stderr[f"{kind}22"] = new.stderr[f"{kind}11"]
    else:
        for kind in ("sigma", "theta") if with_theta else ("sigma",):
            for w in ("11", "22"):
                blk = getattr(new, f"{kind}{w}")
                setattr(new, f"{kind}{w}", 0.5 * (blk + blk.T))
    new.same_input = same
    return new


def _attention_update(state, mc, with_theta, repair):
    summary, sampler, same = _attention_pass(state, mc, with_theta, repair)
    new = _assemble(state, summary, same, with_theta, sampler)
    new.flags = dict(state.flags, degenerate_sigma11=sampler.degenerate)
    if not mc.symmetric or same:
        return new
    rev = _attention_update(state.swapped(), replace(mc, symmetric=False), with_theta, repair)
    rev = rev.swapped()
    kinds = ("sigma", "theta") if with_theta else ("sigma",)
    for kind in kinds:
        for w in BLOCKS:
            key = f"{kind}{w}"
            setattr(new, key, 0.5 * (getattr(new, key) + getattr(rev, key)))
            # both orderings share draws: average the errors (no independence credit)
            new.stderr[key] = 0.5 * (new.stderr[key] + rev.stderr[key])
    new.flags["degenerate_sigma11"] = sampler.degenerate or rev.flags["degenerate_sigma11"]
    return new


def attention_cov_update(state: KernelState, mc: McConfig,
                         repair: PsdRepair = DEFAULT_REPAIR) -> KernelState:
    """MC estimate of ``E[A1 sigma' A2^T]`` for all three blocks.

    One joint draw ``(S1, S2)`` per MC index feeds all three blocks, so the
    joint ``2T x 2T`` output is PSD draw by draw.  Theta blocks are dropped
    (use :func:`attention_ntk_update` to propagate them).
    """
    new = _attention_update(state, mc, False, repair)
    new.theta11 = new.theta12 = new.theta22 = None
    for k in [k for k in new.stderr if k.startswith("theta")]:
        del new.stderr[k]
    return new


def attention_ntk_update(state: KernelState, mc: McConfig,
                         repair: PsdRepair = DEFAULT_REPAIR) -> KernelState:
    """Joint sigma and theta update through attention (common random numbers).

    Takes the *pre-attention* state and returns both updated covariance and
    NTK blocks; the NTK uses

        theta = 2 sigma + E[A1 theta' A2^T]
                + (2 sigma' + theta') * E[Tr(sigma', sigma')] + sigma' * E[Tr(sigma', theta')]

    with the Jacobian traces in Hadamard form.
    """
    if not state.has_ntk:
        raise MissingNtk("theta blocks are absent")
    return _attention_update(state, mc, True, repair)


# ---------------------------------------------------------------------------
# LayerNorm

def layernorm_cov(state: KernelState, params: BlockParams) -> KernelState:
    """Infinite-width LayerNorm (gain 1, shift 0): per-token rescaling.

    ``sigma[a, b] / sqrt((k_aa + eps)(k_bb + eps))``; NTK blocks get the same
    rescaling plus, if ``params.ln_param_grads``, the gain (normalised sigma)
    and shift (constant 1) gradient contributions.
    """
    d1 = np.diag(state.sigma11).copy()
    d2 = np.diag(state.sigma22).copy()
    if min(d1.min(), d2.min()) < -1e-10:
        raise NegativeVariance("negative diagonal covariance entry")
    eps = params.ln_epsilon
    r1 = 1.0 / np.sqrt(np.clip(d1, 0.0, None) + eps)
    r2 = 1.0 / np.sqrt(np.clip(d2, 0.0, None) + eps)
    if eps == 0.0 and (not np.all(np.isfinite(r1)) or not np.all(np.isfinite(r2))):
        raise NegativeVariance("zero variance token with ln_epsilon = 0")
    scale = {"11": np.outer(r1, r1), "12": np.outer(r1, r2), "22": np.outer(r2, r2)}
    new = replace(state, stderr={})
    for w in BLOCKS:
        sig = state.block("sigma", w) * scale[w]
        setattr(new, f"sigma{w}", sig)
        new.stderr[f"sigma{w}"] = state.se("sigma", w) * scale[w]
        if state.has_ntk:
            th = state.block("theta", w) * scale[w]
            if params.ln_param_grads:
                th = th + sig + 1.0
            setattr(new, f"theta{w}", th)
            new.stderr[f"theta{w}"] = np.sqrt((state.se("theta", w) * scale[w]) ** 2
                                              + new.stderr[f"sigma{w}"] ** 2)
    return new


# ---------------------------------------------------------------------------
# dual activations

def _gelu(x):
    return x * ndtr(x)


def _gelu_prime(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


_GH_CACHE: dict = {}


def _gh(order):
    if order not in _GH_CACHE:
        x, w = np.polynomial.hermite_e.hermegauss(order)
        _GH_CACHE[order] = (x, w / math.sqrt(2 * math.pi))
    return _GH_CACHE[order]


def _clamp_psd(k11, k12, k22):
    k11 = np.asarray(k11, dtype=np.float64)
    k12 = np.asarray(k12, dtype=np.float64)
    k22 = np.asarray(k22, dtype=np.float64)
    if np.any(k11 < -1e-8) or np.any(k22 < -1e-8):
        raise NotPsd2x2("negative variance in 2x2 covariance")
    k11 = np.clip(k11, 0.0, None)
    k22 = np.clip(k22, 0.0, None)
    bound = np.sqrt(k11 * k22)
    if np.any(np.abs(k12) > bound + 1e-8 * np.maximum(1.0, bound)):
        raise NotPsd2x2("|k12| exceeds sqrt(k11 k22)")
    return k11, np.clip(k12, -bound, bound), k22, bound


# arc-cosine normaliser; module level so the self-test can mutate it
ARC_COS_NORM = 2.0 * np.pi


def dual_activation_arrays(k11, k12, k22, params: BlockParams):
    """Vectorised ``(E[phi(u) phi(v)], E[phi'(u) phi'(v)])`` for ``(u, v) ~ N(0, k)``."""
    k11, k12, k22, bound = _clamp_psd(k11, k12, k22)
    if params.activation == "relu":
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(bound > 0, k12 / np.where(bound > 0, bound, 1.0), 0.0)
        theta = np.arccos(np.clip(cos, -1.0, 1.0))
        value = bound / ARC_COS_NORM * (np.sin(theta) + (np.pi - theta) * np.cos(theta))
        deriv = (np.pi - theta) / ARC_COS_NORM
        return value, deriv
    x, w = _gh(params.gauss_hermite_order)
    s1 = np.sqrt(k11)[..., None, None]
    s2 = np.sqrt(k22)[..., None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(bound > 0, k12 / np.where(bound > 0, bound, 1.0), 0.0)
    rho = np.clip(rho, -1.0, 1.0)[..., None, None]
    z1 = x[:, None]
    z2 = x[None, :]
    u = s1 * z1
    v = s2 * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2)
    ww = np.outer(w, w)
    value = np.sum(ww * _gelu(u) * _gelu(v), axis=(-2, -1))
    deriv = np.sum(ww * _gelu_prime(u) * _gelu_prime(v), axis=(-2, -1))
    return value, deriv


def dual_activation(k11, k12, k22, params: BlockParams):
    """Scalar bivariate-Gaussian expectations of ``phi`` and ``phi'`` products."""
    value, deriv = dual_activation_arrays(k11, k12, k22, params)
    return float(value), float(deriv)


# ---------------------------------------------------------------------------
# MLP

def _mlp_duals(state, params):
    d1 = np.diag(state.sigma11)
    d2 = np.diag(state.sigma22)
    kdiag = {"11": (d1, d1), "12": (d1, d2), "22": (d2, d2)}
    out = {}
    for w in BLOCKS:
        ka, kb = kdiag[w]
        kab = state.block("sigma", w)
        out[w] = dual_activation_arrays(ka[:, None] * np.ones_like(kab), kab,
                                        kb[None, :] * np.ones_like(kab), params)
    return out


def mlp_cov_update(state: KernelState, params: BlockParams, _duals=None) -> KernelState:
    """``sigma <- sigma_b^2 + sigma_w^2 * E[phi(u) phi(v)]`` entrywise (no mixing)."""
    duals = _duals if _duals is not None else _mlp_duals(state, params)
    sw2, sb2 = params.sigma_w ** 2, params.sigma_b ** 2
    new = replace(state, stderr=dict(state.stderr))
    for w in BLOCKS:
        value, deriv = duals[w]
        setattr(new, f"sigma{w}", sb2 + sw2 * value)
        # d E[phi phi] / d k12 = E[phi' phi'] (Price), first order only
        new.stderr[f"sigma{w}"] = sw2 * deriv * state.se("sigma", w)
    return new


def mlp_ntk_update(state: KernelState, params: BlockParams) -> KernelState:
    """Joint sigma/theta MLP update from the post-LayerNorm state.

    ``theta <- sigma_out + theta * sigma_w^2 * E[phi'(u) phi'(v)]``.
    """
    if not state.has_ntk:
        raise MissingNtk("theta blocks are absent")
    duals = _mlp_duals(state, params)
    new = mlp_cov_update(state, params, _duals=duals)
    sw2 = params.sigma_w ** 2
    for w in BLOCKS:
        _, deriv = duals[w]
        setattr(new, f"theta{w}", new.block("sigma", w) + state.block("theta", w) * sw2 * deriv)
        new.stderr[f"theta{w}"] = np.sqrt(new.stderr[f"sigma{w}"] ** 2
                                          + (sw2 * deriv * state.se("theta", w)) ** 2)
    return new


# ---------------------------------------------------------------------------
# full stack

class KernelReadout(NamedTuple):
    value: float
    matrix: np.ndarray
    stderr: float


def propagate_state(x1, x2, depth: int, params: BlockParams, mc: McConfig,
                    mode: str = "nngp", pe: str = "none",
                    repair: PsdRepair = DEFAULT_REPAIR) -> KernelState:
    """Run ``depth`` blocks of attention -> LayerNorm -> MLP on the embedded pair."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if mode not in ("nngp", "ntk"):
        raise ValueError(f"mode must be 'nngp' or 'ntk', got {mode!r}")
    ntk = mode == "ntk"
    state = embed_covariance(x1, x2, pe=pe, with_ntk=ntk)
    fresh_se = 0.0
    for _ in range(depth):
        if ntk:
            state = attention_ntk_update(state, mc, repair)
        else:
            state = attention_cov_update(state, mc, repair)
        fresh_se = max(fresh_se, state.stderr["sigma12"].max())
        state = layernorm_cov(state, params)
        state = mlp_ntk_update(state, params) if ntk else mlp_cov_update(state, params)
    # warning metric: how much the propagated error exceeds a single-block MC error
    final = state.stderr["theta12" if ntk else "sigma12"].max()
    ok = 0 < fresh_se < np.inf
    state.flags["se_amplification"] = final / fresh_se if ok else 1.0
    return state


def propagate_transformer(x1, x2, depth: int, params: BlockParams, mc: McConfig,
                          mode: str = "nngp", pe: str = "none",
                          repair: PsdRepair = DEFAULT_REPAIR) -> KernelReadout:
    """Kernel value at the last-token pair, the full final block, and its error."""
    state = propagate_state(x1, x2, depth, params, mc, mode, pe, repair)
    kind = "theta" if mode == "ntk" else "sigma"
    mat = state.block(kind, "12")
    se = state.se(kind, "12")
    return KernelReadout(float(mat[-1, -1]), mat, float(se[-1, -1]))


# ---------------------------------------------------------------------------
# fully connected baseline

def fcn_kernel_arrays(k12, k11, k22, depth: int, params: BlockParams):
    """FCN recursion applied entrywise to first-layer kernel arrays."""
    k12 = np.asarray(k12, dtype=np.float64)
    k11 = np.asarray(k11, dtype=np.float64)
    k22 = np.asarray(k22, dtype=np.float64)
    sw2, sb2 = params.sigma_w ** 2, params.sigma_b ** 2
    for _ in range(depth - 1):
        v12, _ = dual_activation_arrays(k11, k12, k22, params)
        v11, _ = dual_activation_arrays(k11, k11, k11, params)
        v22, _ = dual_activation_arrays(k22, k22, k22, params)
        k12, k11, k22 = sb2 + sw2 * v12, sb2 + sw2 * v11, sb2 + sw2 * v22
    return k12, k11, k22


def _first_layer(x1, x2, params):
    sw2, sb2 = params.sigma_w ** 2, params.sigma_b ** 2
    n = x1.shape[-1]
    return (sb2 + sw2 * (x1 @ x2.T) / n,
            sb2 + sw2 * np.einsum("ij,ij->i", x1, x1) / n,
            sb2 + sw2 * np.einsum("ij,ij->i", x2, x2) / n)


def fcn_kernel(x1, x2, depth: int, params: BlockParams) -> float:
    """Closed-form NNGP kernel of a depth-``depth`` FCN on flattened inputs."""
    v1 = np.asarray(x1, dtype=np.float64).ravel()
    v2 = np.asarray(x2, dtype=np.float64).ravel()
    if v1.shape != v2.shape:
        raise ShapeMismatch(f"flattened lengths differ: {v1.size} vs {v2.size}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    k12, k11, k22 = _first_layer(v1[None], v2[None], params)
    out, _, _ = fcn_kernel_arrays(k12[0, 0], k11[0], k22[0], depth, params)
    return float(out)


def fcn_kernel_matrix(xs1, xs2, depth: int, params: BlockParams) -> np.ndarray:
    """Gram block ``K[i, j] = fcn_kernel(xs1[i], xs2[j])`` in one vectorised pass."""
    a = np.asarray([np.ravel(x) for x in xs1], dtype=np.float64)
    b = np.asarray([np.ravel(x) for x in xs2], dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch("flattened lengths differ")
    k12, k11, k22 = _first_layer(a, b, params)
    out, _, _ = fcn_kernel_arrays(k12, k11[:, None] * np.ones_like(k12),
                                  k22[None, :] * np.ones_like(k12), depth, params)
    return out
