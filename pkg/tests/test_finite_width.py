import math

import numpy as np
import pytest

from capture_kernels.errors import ShapeMismatch
from capture_kernels.finite_width import (FiniteDims, FiniteParams, FlopCounter,
                                          empirical_covariance, flop_count, forward, init_params)
from capture_kernels.kernel_propagation import (BlockParams, McConfig, attention_cov_update,
                                                embed_covariance, propagate_state)
from helpers import zscore


def test_init_shapes():
    p = init_params(FiniteDims(d_in=3, d_model=4, n_heads=2, n_layers=2), seed=0)
    assert p.w_emb.shape == (3, 4)
    assert len(p.blocks) == 2
    b = p.blocks[0]
    assert b["w_v"].shape == (2, 4, 4)
    assert b["w_q"].shape == b["w_k"].shape == (2, 4, 2)
    assert np.all(b["gamma"] == 1) and np.all(b["beta"] == 0)


def test_init_deterministic():
    dims = FiniteDims(d_in=3, d_model=8, n_heads=2)
    a, b = init_params(dims, 11), init_params(dims, 11)
    for k in a.blocks[0]:
        np.testing.assert_array_equal(a.blocks[0][k], b.blocks[0][k])
    np.testing.assert_array_equal(a.w_emb, b.w_emb)


def test_init_query_variance():
    dims = FiniteDims(d_in=1, d_model=16, n_heads=1, d_k=16)
    entries = np.concatenate([init_params(dims, s).blocks[0]["w_q"].ravel() for s in range(4000)])
    assert entries.size >= 10 ** 6
    assert abs(entries.var() * 16 - 1.0) < 0.01


def test_zero_query_key_gives_uniform_attention():
    dims = FiniteDims(d_in=3, d_model=8, n_heads=1)
    p = init_params(dims, 1)
    p.blocks[0]["w_q"][:] = 0
    p.blocks[0]["w_k"][:] = 0
    x = np.random.default_rng(0).standard_normal((5, 3))
    hidden, _ = forward(x, p)
    assert np.all(hidden[0]["scores"] == 0)
    z = x @ p.w_emb
    v = z @ p.blocks[0]["w_v"][0]
    np.testing.assert_allclose(hidden[0]["attn"], np.tile(v.mean(0), (5, 1)), atol=1e-14)


def test_zero_input_propagates_zero():
    dims = FiniteDims(d_in=3, d_model=8, n_heads=2, sigma_b=0.0)
    hidden, out = forward(np.zeros((4, 3)), init_params(dims, 2))
    assert np.all(hidden[0]["ln"] == 0)
    assert np.all(out == 0)


def test_hand_computed_block():
    # T = 2, d_model = 3, one head with d_k = 2, identity embedding
    dims = FiniteDims(d_in=3, d_model=3, n_heads=1, d_k=2, ln_epsilon=0.0)
    wq = np.array([[0.1, 0.0], [0.0, 0.2], [0.1, 0.1]])
    wk = np.array([[0.2, 0.1], [0.0, 0.1], [0.3, 0.0]])
    wv = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [0.5, 0.0, 1.0]])
    wm = np.array([[0.5, -0.5, 0.0], [0.0, 1.0, 0.5], [1.0, 0.0, -1.0]])
    bm = np.array([0.1, 0.0, -0.1])
    p = FiniteParams(dims, np.eye(3), [{"w_q": wq[None], "w_k": wk[None], "w_v": wv[None],
                                        "gamma": np.ones(3), "beta": np.zeros(3),
                                        "w_mlp": wm, "b_mlp": bm}])
    x = [[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]]
    _, out = forward(np.array(x), p)

    def mat(a, b):
        return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    q, k, v = mat(x, wq.tolist()), mat(x, wk.tolist()), mat(x, wv.tolist())
    want = []
    for a in range(2):
        s = [sum(q[a][c] * k[b][c] for c in range(2)) / math.sqrt(2) for b in range(2)]
        e = [math.exp(u) for u in s]
        w = [u / sum(e) for u in e]
        z = [w[0] * v[0][j] + w[1] * v[1][j] for j in range(3)]
        mu = sum(z) / 3
        sd = math.sqrt(sum((u - mu) ** 2 for u in z) / 3)
        ln = [max((u - mu) / sd, 0.0) for u in z]
        want.append([sum(ln[i] * wm[i][j] for i in range(3)) + bm[j] for j in range(3)])
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((3, 4)), init_params(FiniteDims(d_in=3), 0))


def test_forward_is_pure():
    p = init_params(FiniteDims(d_in=3, d_model=16, n_heads=2), 4)
    x = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_array_equal(forward(x, p)[1], forward(x, p)[1])


# -- FLOPs ------------------------------------------------------------------------

def test_flop_unit_case():
    assert flop_count(1, 1, 1, 1, 1) == 15


def test_flop_quadratic_in_t():
    ratio = flop_count(2, 4, 64, 16, 2 * 10 ** 6) / flop_count(2, 4, 64, 16, 10 ** 6)
    assert ratio == pytest.approx(4.0, rel=1e-3)


def test_flop_counter_matches_closed_form():
    dims = FiniteDims(d_in=3, d_model=8, n_heads=2, d_k=4)
    counter = FlopCounter()
    forward(np.ones((4, 3)), init_params(dims, 0), counter)
    assert abs(counter.total - flop_count(1, 2, 8, 4, 4)) <= 5 * 4 ** 2


def test_flop_rejects_nonpositive():
    with pytest.raises(ValueError):
        flop_count(1, 0, 8, 4, 4)


# -- empirical covariance ------------------------------------------------------------

def test_same_input_is_symmetric_psd():
    x = np.random.default_rng(2).standard_normal((3, 4))
    dims = FiniteDims(d_in=4, d_model=32, n_heads=2)
    for tap in ("pre_attn_out", "post_ln", "post_mlp"):
        e = empirical_covariance(x, x, dims, 100, seed=1, tap=tap)
        np.testing.assert_allclose(e.matrix, e.matrix.T, atol=1e-14)
        assert np.linalg.eigvalsh(0.5 * (e.matrix + e.matrix.T)).min() > -1e-12


def test_min_draws_enforced():
    x = np.zeros((2, 3))
    with pytest.raises(ValueError):
        empirical_covariance(x, x, FiniteDims(d_in=3), 50, 0, "post_mlp")


def test_reduced_matches_explicit():
    rng = np.random.default_rng(3)
    x1, x2 = rng.standard_normal((2, 3, 3))
    dims = FiniteDims(d_in=3, d_model=48, n_heads=2, n_layers=2, sigma_w=1.3, sigma_b=0.2)
    for tap in ("pre_attn_out", "post_mlp"):
        a = empirical_covariance(x1, x2, dims, 600, seed=1, tap=tap, method="reduced")
        b = empirical_covariance(x1, x2, dims, 600, seed=2, tap=tap, method="explicit")
        assert np.max(zscore(a.matrix, b.matrix, np.hypot(a.stderr, b.stderr))) < 4.5


def test_score_products_factorize():
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((2, 2, 5))
    dims = FiniteDims(d_in=5, d_model=256, n_heads=1, d_k=256)
    e = empirical_covariance(x1, x2, dims, 2000, seed=3, tap="scores")
    s = embed_covariance(x1, x2).sigma12
    target = np.einsum("ab,ce->acbe", s, s)
    assert np.max(zscore(e.matrix, target, e.stderr)) < 4.5


def test_attention_update_matches_many_heads():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((2, 3, 4))
    att = attention_cov_update(embed_covariance(x1, x2, with_ntk=False),
                               McConfig(n_mc=400_000, seed=1))
    dims = FiniteDims(d_in=4, d_model=1024, n_heads=256, d_k=256)
    e = empirical_covariance(x1, x2, dims, 600, seed=5, tap="pre_attn_out")
    assert np.max(zscore(e.matrix, att.sigma12, np.hypot(e.stderr, att.stderr["sigma12"]))) < 4.5


@pytest.mark.slow
def test_width_sweep_gap_shrinks():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((2, 3, 4))
    p = BlockParams(sigma_w=1.0, sigma_b=0.0, ln_epsilon=1e-5)
    ref = propagate_state(x1, x2, 1, p, McConfig(n_mc=400_000, seed=1)).sigma12
    gaps = []
    for dm, h in ((128, 8), (512, 16), (2048, 32)):
        e = empirical_covariance(x1, x2, FiniteDims(d_in=4, d_model=dm, n_heads=h), 4000, seed=3,
                                 tap="post_mlp")
        gaps.append(np.abs(e.matrix - ref).max())
    assert gaps[0] > gaps[1] > gaps[2]
