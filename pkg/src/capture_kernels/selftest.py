"""Fast built-in consistency suites run by ``capture-kernels selftest``."""
from __future__ import annotations

import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass
from unittest import mock

import numpy as np

from . import kernel_propagation as kp
from .finite_width import FiniteDims, empirical_covariance
from .score_sampler import ScorePairSampler, kronecker_joint_covariance, naive_joint_sampler
from .softmax import (jacobian_trace_matrix, softmax_grad, softmax_hessian, softmax_jacobian,
                      softmax_rows, softmax_third)

Z_MAX = 5.0


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_psd2(rng):
    a = rng.standard_normal((2, 3))
    k = a @ a.T / 3
    return k[0, 0], k[0, 1], k[1, 1]


def suite_softmax_bounds(rng, n=5000):
    worst = 0.0
    for _ in range(n):
        t = int(rng.integers(2, 9))
        s = rng.standard_normal(t) * rng.uniform(0.1, 10)
        a = softmax_rows(s)
        g1 = np.abs(softmax_grad(a)).sum(axis=1) / (2 * a)
        g2 = np.abs(softmax_hessian(a)).sum(axis=(1, 2)) / (6 * a)
        g3 = np.abs(softmax_third(a)).sum(axis=(1, 2, 3)) / (26 * a)
        jn = np.abs(softmax_jacobian(a)).sum() / 2
        worst = max(worst, g1.max(), g2.max(), g3.max(), jn)
    for _ in range(n):
        t = int(rng.integers(2, 9))
        a1 = softmax_rows(rng.standard_normal((t, t)) * 3)
        a2 = softmax_rows(rng.standard_normal((t, t)) * 3)
        m, nn = rng.standard_normal((2, t, t))
        tr = jacobian_trace_matrix(a1, a2, m, nn)
        worst = max(worst, np.abs(tr).max() / (4 * np.abs(m).max() * np.abs(nn).max()))
    return worst <= 1 + 1e-12, f"max bound ratio {worst:.4f}"


def suite_trace_identity(rng, n=200):
    worst = 0.0
    for _ in range(n):
        t = int(rng.integers(2, 9))
        a1 = softmax_rows(rng.standard_normal((t, t)))
        a2 = softmax_rows(rng.standard_normal((t, t)))
        m, nn = rng.standard_normal((2, t, t))
        fast = jacobian_trace_matrix(a1, a2, m, nn)
        slow = np.array([[np.trace(softmax_jacobian(a1[i]).T @ m @ softmax_jacobian(a2[j]) @ nn.T)
                          for j in range(t)] for i in range(t)])
        worst = max(worst, np.abs(fast - slow).max() / max(np.abs(slow).max(), 1e-300))
    return worst < 1e-10, f"max relative gap {worst:.2e}"


def suite_sampler_equivalence(rng, n=40000):
    t = 3
    x = rng.standard_normal((2 * t, 5))
    c = x @ x.T / 5
    s11, s12, s22 = c[:t, :t], c[:t, t:], c[t:, t:]
    full = kronecker_joint_covariance(s11, s12, s22)
    zmax = 0.0
    for draws in (ScorePairSampler(s11, s12, s22).draw_batch(rng, n),
                  naive_joint_sampler(s11, s12, s22, rng, size=n)):
        z = np.concatenate([draws[0].reshape(n, -1), draws[1].reshape(n, -1)], axis=1)
        emp = z.T @ z / n
        se = np.sqrt(np.maximum(np.einsum("ni,nj->ij", z * z, z * z) / n - emp ** 2, 1e-300) / n)
        zmax = max(zmax, np.abs((emp - full) / se).max())
    return zmax < Z_MAX, f"max |z| {zmax:.2f}"


def suite_arc_cosine(rng, n=200000, cases=5):
    """ReLU closed form and GeLU quadrature against plain MC."""
    zmax = 0.0
    for act in ("relu", "gelu"):
        params = kp.BlockParams(activation=act)
        phi = (lambda v: np.maximum(v, 0)) if act == "relu" else kp._gelu
        for _ in range(cases):
            k11, k12, k22 = _random_psd2(rng)
            lo = np.linalg.cholesky(np.array([[k11, k12], [k12, k22]]) + 1e-14 * np.eye(2))
            uv = rng.standard_normal((n, 2)) @ lo.T
            prod = phi(uv[:, 0]) * phi(uv[:, 1])
            value, _ = kp.dual_activation(k11, k12, k22, params)
            zmax = max(zmax, abs(prod.mean() - value) / (prod.std() / np.sqrt(n)))
    return zmax < Z_MAX, f"max |z| {zmax:.2f}"


def suite_score_factorization(rng, d_model=256, draws=2000):
    t = 2
    x1 = rng.standard_normal((t, 4))
    x2 = rng.standard_normal((t, 4))
    st = kp.embed_covariance(x1, x2, with_ntk=False)
    dims = FiniteDims(d_in=4, d_model=d_model, n_heads=1, d_k=d_model)
    seed = int(rng.integers(2 ** 31))
    zmax = 0.0
    for w in ("11", "12"):
        e = empirical_covariance(x1, x2, dims, draws, seed, "scores", which=w)
        sab = st.block("sigma", w)
        zmax = max(zmax, np.abs((e.matrix - np.einsum("ab,ce->acbe", sab, sab)) / e.stderr).max())
    return zmax < Z_MAX, f"max |z| {zmax:.2f}"


def suite_fixed_point(rng):
    zmax = 0.0
    for c in (0.0, 0.5, 1.0):
        s = np.full((4, 4), c)
        st = kp.KernelState(s, s.copy(), s.copy())
        out = kp.attention_cov_update(st, kp.McConfig(n_mc=2000, seed=int(rng.integers(2 ** 31))))
        for w in kp.BLOCKS:
            gap = np.abs(out.block("sigma", w) - c)
            se = out.se("sigma", w)
            zmax = max(zmax, np.max(np.where(se > 0, gap / np.where(se > 0, se, 1), gap * 1e12)))
    return zmax < Z_MAX, f"max |z| {zmax:.2f}"


SUITES = {
    "softmax_bounds": suite_softmax_bounds,
    "trace_identity": suite_trace_identity,
    "sampler_equivalence": suite_sampler_equivalence,
    "arc_cosine": suite_arc_cosine,
    "score_factorization": suite_score_factorization,
    "fixed_point": suite_fixed_point,
}


@contextmanager
def perturbed_dual_constant(factor=1.2):
    """Test hook: scale the arc-cosine normaliser so the ReLU dual is wrong."""
    with mock.patch.object(kp, "ARC_COS_NORM", kp.ARC_COS_NORM * factor):
        yield


def run_selftest(seed=0, suites=None, mutate=False) -> list[SuiteResult]:
    names = list(SUITES) if suites is None else list(suites)
    results = []
    with perturbed_dual_constant() if mutate else nullcontext():
        for i, name in enumerate(names):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            t0 = time.perf_counter()
            try:
                ok, detail = SUITES[name](rng)
            except Exception as exc:  # a crashing suite is a failing suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
