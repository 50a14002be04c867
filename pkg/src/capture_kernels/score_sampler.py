"""Joint sampling of infinite-width attention score matrices.

At infinite width the score matrices of two inputs are jointly centred
Gaussian with Kronecker-factorised covariance

    E[S1_ac S2_be] = sig12[a, b] * sig12[c, e]

(and analogously for the diagonal blocks).  :class:`ScorePairSampler`
draws ``(S1, S2)`` in O(T^3) per draw by sampling ``S1 = L1 U L1^T`` and then
``S2 | S1`` through the whitened conditional covariance ``I (x) I - H (x) H``.
The factors that only depend on the covariance triple are computed once.

Blocks may be rectangular: ``sig12`` is ``T1 x T2`` when the two inputs have
different lengths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import EigenOvershoot, NotSymmetric, RepairExceeded, ShapeMismatch, TooLarge

JITTER_CAP = 1e-4
SYM_TOL = 1e-10
EIG_TOL = 1e-8


@dataclass(frozen=True)
class PsdRepair:
    """Diagonal jitter policy for factorising PSD blocks.

    ``jitter`` is the first value tried; it grows by x10 up to ``JITTER_CAP``.
    ``jitter == 0`` selects the semidefinite path (exact factor of a
    rank-deficient PSD matrix, no perturbation).
    """

    jitter: float = 1e-10
    eigen_floor: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.jitter <= 1e-6 and 0.0 <= self.eigen_floor <= 1e-6):
            raise ValueError("jitter and eigen_floor must lie in [0, 1e-6]")


DEFAULT_REPAIR = PsdRepair()


def _check_block(m, name="m"):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ShapeMismatch(f"{name} must be a non-empty square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeMismatch(f"{name} has non-finite entries")
    scale = 1.0 + np.abs(m).max()
    if np.abs(m - m.T).max() > SYM_TOL * scale:
        raise NotSymmetric(f"{name} is not symmetric (max asym {np.abs(m - m.T).max():.3e})")
    return m


def semidefinite_cholesky(m, tol=None):
    """Lower-triangular factor of a PSD matrix, tolerating zero pivots.

    Columns whose pivot falls below ``tol`` are zeroed, which is exact for
    rank-deficient PSD input.  Raises :class:`RepairExceeded` if a pivot is
    clearly negative (indefinite input).
    """
    m = np.array(m, dtype=np.float64)
    t = m.shape[0]
    scale = 1.0 + np.abs(m).max()
    if tol is None:
        tol = 1e-12 * scale
    out = np.zeros_like(m)
    for j in range(t):
        d = m[j, j] - out[j, :j] @ out[j, :j]
        if d < -1e-8 * scale:
            raise RepairExceeded(f"negative pivot {d:.3e} at column {j}")
        if d <= tol:
            continue
        out[j, j] = np.sqrt(d)
        out[j + 1:, j] = (m[j + 1:, j] - out[j + 1:, :j] @ out[j, :j]) / out[j, j]
    return out


def cholesky_psd(m, repair: PsdRepair = DEFAULT_REPAIR):
    """Cholesky factor of ``m + jitter * I`` with geometric jitter escalation.

    Returns the lower-triangular factor ``L``.  With ``repair.jitter == 0`` the
    exact semidefinite factor is returned instead (no diagonal shift).
    """
    m = _check_block(m)
    if repair.jitter == 0.0:
        return semidefinite_cholesky(m)
    eye = np.eye(m.shape[0])
    jitter = repair.jitter
    while jitter <= JITTER_CAP * (1 + 1e-12):
        try:
            return np.linalg.cholesky(m + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise RepairExceeded(f"Cholesky failed with jitter up to {JITTER_CAP:g}")


def sample_score_single(sigma11, rng, repair: PsdRepair = DEFAULT_REPAIR, size=None):
    """Draw ``S = L U L^T`` with ``U`` i.i.d. standard normal.

    With ``size`` given, returns a batch of shape ``(size, T, T)``.
    """
    lo = cholesky_psd(sigma11, repair)
    t = lo.shape[0]
    shape = (t, t) if size is None else (size, t, t)
    u = rng.standard_normal(shape)
    return lo @ u @ lo.T


@dataclass(frozen=True)
class ScorePairDraw:
    s1: np.ndarray
    s2: np.ndarray
    meta: dict = field(default_factory=dict)


class ScorePairSampler:
    """Precomputed O(T^3) joint sampler for ``(S(X1), S(X2))``.

    Instances are immutable after construction and can be shared; each caller
    supplies its own ``numpy.random.Generator``.
    """

    def __init__(self, sigma11, sigma12, sigma22, repair: PsdRepair = DEFAULT_REPAIR):
        s11 = _check_block(sigma11, "sigma11")
        s22 = _check_block(sigma22, "sigma22")
        s12 = np.asarray(sigma12, dtype=np.float64)
        t1, t2 = s11.shape[0], s22.shape[0]
        if s12.shape != (t1, t2):
            raise ShapeMismatch(f"sigma12 must be {(t1, t2)}, got {s12.shape}")
        if not np.all(np.isfinite(s12)):
            raise ShapeMismatch("sigma12 has non-finite entries")
        self.t1, self.t2 = t1, t2
        self.repair = repair
        self.degenerate = False
        # all three blocks equal: S2 is S1 itself (H = I, zero conditional noise)
        self.identical = (t1 == t2 and np.array_equal(s11, s12)
                          and np.array_equal(s11, s22))
        self.l1 = cholesky_psd(s11, repair)
        if self.identical:
            return
        self.l2 = cholesky_psd(s22, repair)
        s21 = s12.T
        # B = sig21 sig11^{-1}, via Cholesky solve or eigen pseudo-inverse
        evals, evecs = np.linalg.eigh(s11)
        floor = max(1e-10 * max(np.trace(s11), 0.0) / t1, repair.eigen_floor)
        if evals.min() <= floor:
            self.degenerate = True
            inv = np.where(evals > floor, 1.0 / np.where(evals > floor, evals, 1.0), 0.0)
            b = s21 @ (evecs * inv) @ evecs.T
        else:
            b = linalg.cho_solve((self.l1, True), s12).T
        self.b = b
        # whitened conditional: I (x) I - H (x) H, H = L2^{-1} sig21 sig11^{-1} sig12 L2^{-T}
        w = linalg.solve_triangular(self.l2, b @ s12, lower=True)
        h = linalg.solve_triangular(self.l2, w.T, lower=True)
        h = 0.5 * (h + h.T)
        lam, q = np.linalg.eigh(h)
        # rounding in H grows with cond(sig11); pseudo-inverse mode is looser
        cond = evals.max() / max(evals.min(), floor)
        tol = 1e-6 if self.degenerate else max(EIG_TOL, 100 * np.finfo(float).eps * cond)
        overshoot = np.abs(lam).max() - 1.0
        if overshoot > tol:
            raise EigenOvershoot(f"|lambda| exceeds 1 by {overshoot:.3e}")
        lam = np.clip(lam, -1.0, 1.0)
        self.lam = lam
        self.q = q
        self.cond_scale = np.sqrt(np.clip(1.0 - np.outer(lam, lam), 0.0, None))
        self.l2q = self.l2 @ q

    # -- drawing -----------------------------------------------------------
    def draw_batch(self, rng, n, antithetic=False):
        """Return arrays ``(s1, s2)`` of shape ``(n, T1, T1)`` and ``(n, T2, T2)``.

        With ``antithetic`` the second half of the batch is the negation of
        the first half (the joint law is symmetric under ``(S1, S2) -> -(S1, S2)``).
        """
        if antithetic:
            half = (n + 1) // 2
            s1, s2 = self.draw_batch(rng, half)
            return (np.concatenate([s1, -s1])[:n], np.concatenate([s2, -s2])[:n])
        u1 = rng.standard_normal((n, self.t1, self.t1))
        s1 = self.l1 @ u1 @ self.l1.T
        if self.identical:
            return s1, s1
        u2 = rng.standard_normal((n, self.t2, self.t2))
        m_cond = self.b @ s1 @ self.b.T
        # Q^{-1} U (Q^T)^{-1} with orthogonal Q
        delta = self.cond_scale * (self.q.T @ u2 @ self.q)
        s2 = m_cond + self.l2q @ delta @ self.l2q.T
        return s1, s2

    def draw(self, rng):
        s1, s2 = self.draw_batch(rng, 1)
        return ScorePairDraw(s1[0], s2[0], {"degenerate_sigma11": self.degenerate,
                                            "identical": self.identical})


def sample_score_pair(sigma11, sigma12, sigma22, rng, repair: PsdRepair = DEFAULT_REPAIR):
    """One joint draw ``(S(X1), S(X2))``; see :class:`ScorePairSampler`."""
    return ScorePairSampler(sigma11, sigma12, sigma22, repair).draw(rng)


def kronecker_joint_covariance(sigma11, sigma12, sigma22):
    """Full covariance of ``(vec S1, vec S2)`` in row-major vec order."""
    s11, s12, s22 = (np.asarray(x, dtype=np.float64) for x in (sigma11, sigma12, sigma22))
    return np.block([[np.kron(s11, s11), np.kron(s12, s12)],
                     [np.kron(s12.T, s12.T), np.kron(s22, s22)]])


def naive_joint_sampler(sigma11, sigma12, sigma22, rng, size=None, max_t=8):
    """Reference sampler: one factorisation of the full ``2T^2`` covariance.

    O(T^6) set-up, so restricted to ``T <= max_t``.
    """
    s11 = np.asarray(sigma11, dtype=np.float64)
    s22 = np.asarray(sigma22, dtype=np.float64)
    t1, t2 = s11.shape[0], s22.shape[0]
    if max(t1, t2) > max_t:
        raise TooLarge(f"naive sampler limited to T <= {max_t}")
    full = kronecker_joint_covariance(s11, sigma12, s22)
    lo = cholesky_psd(0.5 * (full + full.T))
    n = 1 if size is None else size
    z = rng.standard_normal((n, full.shape[0])) @ lo.T
    s1 = z[:, :t1 * t1].reshape(n, t1, t1)
    s2 = z[:, t1 * t1:].reshape(n, t2, t2)
    if size is None:
        return ScorePairDraw(s1[0], s2[0])
    return s1, s2
