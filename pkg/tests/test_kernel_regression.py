import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capture_kernels.errors import NotFinite, StageViolation
from capture_kernels.kernel_propagation import BlockParams, McConfig
from capture_kernels.kernel_regression import (FittedPredictor, Gram, KernelConfig, assemble_gram,
                                               content_hash, decode_classes, fit, load_predictor,
                                               one_hot, predict, predict_batch, ridge_solve,
                                               save_predictor, transformer_kernel,
                                               two_step_adapt)
from capture_kernels.tasks import embed_instance, gen_induction
from helpers import random_psd

FCN = KernelConfig(kind="fcn", depth=2, params=BlockParams(sigma_w=1.3, sigma_b=0.4))


def oracle_fcn(u, v, depth=2, sw=1.3, sb=0.4):
    """Independent scalar FCN kernel: plain arc-cosine recursion on flattened inputs."""
    u, v = np.ravel(u), np.ravel(v)
    n = u.size
    k12 = sb ** 2 + sw ** 2 * float(u @ v) / n
    k11 = sb ** 2 + sw ** 2 * float(u @ u) / n
    k22 = sb ** 2 + sw ** 2 * float(v @ v) / n
    for _ in range(depth - 1):
        norm = math.sqrt(k11 * k22)
        th = math.acos(max(-1.0, min(1.0, k12 / norm)))
        k12 = sb ** 2 + sw ** 2 * norm / (2 * math.pi) * (math.sin(th) + (math.pi - th) * math.cos(th))
        k11 = sb ** 2 + sw ** 2 * k11 / 2
        k22 = sb ** 2 + sw ** 2 * k22 / 2
    return k12


def oracle_gram(xs1, xs2):
    return np.array([[oracle_fcn(a, b) for b in xs2] for a in xs1])


def points(vals):
    return [np.array([[float(v), 1.0]]) for v in vals]


# -- ridge_solve -----------------------------------------------------------------

def test_ridge_identity():
    np.testing.assert_allclose(ridge_solve(np.eye(4), np.full(4, 2.0), 1.0), np.ones(4))


def test_ridge_pure():
    y = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(ridge_solve(np.zeros((3, 3)), y, 1.0), y)


def test_ridge_matches_inverse():
    rng = np.random.default_rng(0)
    k = random_psd(rng, 5)
    y = rng.standard_normal(5)
    want = np.linalg.inv(k + 0.1 * np.eye(5)) @ y
    np.testing.assert_allclose(ridge_solve(Gram(k, np.zeros_like(k)), y, 0.1), want, atol=1e-10)


@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 10))
def test_ridge_residual(p, seed, kappa):
    rng = np.random.default_rng(seed)
    k = random_psd(rng, p)
    y = rng.standard_normal(p)
    a = ridge_solve(k, y, kappa)
    assert np.abs((k + kappa * np.eye(p)) @ a - y).max() <= 1e-8 * max(np.abs(y).max(), 1e-300)


def test_ridge_errors():
    with pytest.raises(NotFinite):
        ridge_solve(np.array([[np.nan]]), [1.0], 1.0)
    with pytest.raises(ValueError):
        ridge_solve(np.eye(2), [1.0, 1.0], 0.0)


def test_ridge_indefinite_falls_back():
    k = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
    a = ridge_solve(k, [1.0, 0.0], 0.5)
    np.testing.assert_allclose((k + 0.5 * np.eye(2)) @ a, [1.0, 0.0], atol=1e-12)
    assert np.all(np.isfinite(ridge_solve(k, [1.0, 0.0], 0.5, clip_eigen=True)))


# -- prediction ----------------------------------------------------------------------

def test_fcn_gram_matches_oracle():
    xs = points(np.linspace(-1, 1, 6))
    np.testing.assert_allclose(assemble_gram(xs, FCN).matrix, oracle_gram(xs, xs), rtol=1e-12)


def test_interpolation_limit():
    xs = points(np.linspace(-1, 1, 8))
    y = np.cos(3 * np.linspace(-1, 1, 8))
    assert np.linalg.cond(oracle_gram(xs, xs)) < 1e6
    f = fit(xs, y, FCN, kappa=1e-8)
    pred, se = predict_batch(f, xs)
    np.testing.assert_allclose(pred, y, rtol=1e-4, atol=1e-4 * np.abs(y).max())
    assert np.all(se == 0)


def test_null_predictor():
    xs = points([0.1, 0.5])
    f = FittedPredictor(xs, np.zeros(2), 1.0, FCN)
    assert predict(f, points([0.3])[0])[0] == 0.0


def test_matches_generic_krr_on_sine():
    xs = points(np.linspace(-1, 1, 20))
    y = np.sin(np.pi * np.linspace(-1, 1, 20))
    test = points(np.linspace(-0.95, 0.95, 7))
    kappa = 1e-3
    want = oracle_gram(test, xs) @ np.linalg.solve(oracle_gram(xs, xs) + kappa * np.eye(20), y)
    got, _ = predict_batch(fit(xs, y, FCN, kappa=kappa), test)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_default_kappa_relative_to_diagonal():
    xs = points([0.0, 0.5, 1.0])
    f = fit(xs, [1.0, 2.0, 3.0], FCN)
    assert f.kappa == pytest.approx(1e-3 * np.mean(np.diag(oracle_gram(xs, xs))))


def test_fcn_right_aligned_padding():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.0, 1.0]])
    padded = np.vstack([np.zeros((1, 2)), b])
    k = assemble_gram([a, b], FCN).matrix
    assert k[0, 1] == pytest.approx(oracle_fcn(a, padded), rel=1e-12)


# -- two-step protocol -----------------------------------------------------------------

def test_two_step_with_null_first_stage_is_fresh_fit():
    xs = points(np.linspace(-1, 1, 6))
    y = np.linspace(0, 1, 6)
    f1 = FittedPredictor(points([2.0]), np.zeros(1), 1e-3, FCN)
    f2 = two_step_adapt(f1, xs, y, kappa=1e-3)
    fresh = fit(xs, y, FCN, kappa=1e-3)
    test = points([-0.3, 0.7])
    np.testing.assert_allclose(predict_batch(f2, test)[0], predict_batch(fresh, test)[0],
                               atol=1e-12)
    assert f2.stage == "adapted"


def test_two_step_zero_residual():
    f1 = fit(points([0.0, 1.0]), [1.0, -1.0], FCN, kappa=1e-3)
    new = points([0.3, -0.4, 0.8])
    labels, _ = predict_batch(f1, new)
    f2 = two_step_adapt(f1, new, labels)
    assert np.abs(f2.alpha).max() < 1e-12
    np.testing.assert_allclose(predict_batch(f2, new)[0], labels, atol=1e-12)


def reference_two_stage(x0, y0, x1, y1, test, kappa):
    k00 = oracle_gram(x0, x0)
    a0 = np.linalg.solve(k00 + kappa * np.eye(len(x0)), y0)
    resid = y1 - oracle_gram(x1, x0) @ a0
    a1 = np.linalg.solve(oracle_gram(x1, x1) + kappa * np.eye(len(x1)), resid)
    two = oracle_gram(test, x0) @ a0 + oracle_gram(test, x1) @ a1
    xu = x0 + x1
    au = np.linalg.solve(oracle_gram(xu, xu) + kappa * np.eye(len(xu)), np.concatenate([y0, y1]))
    return two, oracle_gram(test, xu) @ au


def test_two_step_matches_reference_and_union_gap():
    rng = np.random.default_rng(1)
    v0, v1 = rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10)
    x0, x1 = points(v0), points(v1)
    y0, y1 = 2 * v0 - 0.5, 2 * v1 - 0.5
    test = points(np.linspace(-1, 1, 9))
    kappa = 1e-3
    f2 = two_step_adapt(fit(x0, y0, FCN, kappa=kappa), x1, y1, kappa=kappa)
    union = fit(x0 + x1, np.concatenate([y0, y1]), FCN, kappa=kappa)
    ref_two, ref_union = reference_two_stage(x0, y0, x1, y1, test, kappa)
    got_two, got_union = predict_batch(f2, test)[0], predict_batch(union, test)[0]
    np.testing.assert_allclose(got_two, ref_two, atol=1e-9)
    gap = np.abs(ref_two - ref_union).max()
    assert np.abs(got_two - got_union).max() <= gap + 1e-9


def test_stage_violation():
    f1 = fit(points([0.0]), [1.0], FCN, kappa=1e-3)
    f2 = two_step_adapt(f1, points([0.5]), [0.0])
    with pytest.raises(StageViolation):
        two_step_adapt(f2, points([0.7]), [0.0])


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6), st.floats(1e-4, 1e-1))
def test_stage_two_residuals_bounded(seed, p0, p1, kappa):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1, 1, p0 + p1)
    y = rng.standard_normal(p0 + p1)
    f1 = fit(points(v[:p0]), y[:p0], FCN, kappa=kappa)
    f2 = two_step_adapt(f1, points(v[p0:]), y[p0:], kappa=kappa)
    resid = y[p0:] - predict_batch(f2, points(v[p0:]))[0]
    assert np.abs(resid).max() <= kappa * f2.alpha_max + 1e-8


def test_one_hot_and_decode():
    oh = one_hot([2, 0], 3)
    np.testing.assert_array_equal(oh, [[0, 0, 1], [1, 0, 0]])
    cls, margin = decode_classes(np.array([[0.1, 0.7, 0.2], [0.5, 0.4, 0.0]]))
    np.testing.assert_array_equal(cls, [1, 0])
    np.testing.assert_allclose(margin, [0.5, 0.1])


def test_multi_output_fit():
    xs = points(np.linspace(-1, 1, 5))
    y = one_hot([0, 1, 2, 1, 0], 3)
    f = fit(xs, y, FCN, kappa=1e-8)
    assert f.n_outputs == 3
    cls, _ = decode_classes(predict_batch(f, xs)[0])
    np.testing.assert_array_equal(cls, [0, 1, 2, 1, 0])


# -- persistence ---------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    x0, x1 = points([0.0, 0.6]), points([-0.5])
    f2 = two_step_adapt(fit(x0, [1.0, 0.0], FCN, kappa=1e-3), x1, [0.5])
    path = tmp_path / "pred.json"
    save_predictor(f2, path)
    store = {content_hash(x): x for x in x0 + x1}
    g = load_predictor(path, store)
    assert g.stage == "adapted" and g.parent.stage == "initial"
    test = points([0.2, 0.9])
    np.testing.assert_array_equal(predict_batch(f2, test)[0], predict_batch(g, test)[0])


def test_load_rejects_wrong_content(tmp_path):
    x0 = points([0.0])
    path = tmp_path / "pred.json"
    save_predictor(fit(x0, [1.0], FCN, kappa=1e-3), path)
    with pytest.raises(ValueError):
        load_predictor(path, lambda h: np.ones((1, 2)))


# -- transformer Gram -------------------------------------------------------------------

TRANSFORMER = KernelConfig(kind="transformer", depth=1,
                           params=BlockParams(sigma_w=1.2, sigma_b=0.1),
                           mc=McConfig(n_mc=256, seed=3))


def test_singleton_gram():
    x = embed_instance(gen_induction(4, np.random.default_rng(0), vocab_size=16), 8)
    g = assemble_gram([x], TRANSFORMER)
    assert g.matrix.shape == (1, 1) and g.matrix[0, 0] >= 0


def test_duplicated_instance_rows_agree():
    rng = np.random.default_rng(1)
    xs = [embed_instance(gen_induction(4, rng, vocab_size=16), 8) for _ in range(3)]
    g = assemble_gram(xs + [xs[1]], TRANSFORMER)
    band = 4.5 * np.hypot(g.stderr[1], g.stderr[3]) + 1e-12
    assert np.all(np.abs(g.matrix[1] - g.matrix[3]) <= band)


def test_induction_gram_is_near_psd():
    rng = np.random.default_rng(2)
    xs = [embed_instance(gen_induction(8, rng, vocab_size=64), 8) for _ in range(8)]
    g = assemble_gram(xs, TRANSFORMER)
    np.testing.assert_array_equal(g.matrix, g.matrix.T)
    assert np.linalg.eigvalsh(g.matrix).min() >= -5 * g.stderr.max()


def test_transformer_kernel_is_order_independent():
    rng = np.random.default_rng(3)
    a, b = (embed_instance(gen_induction(5, rng, vocab_size=16), 8) for _ in range(2))
    assert transformer_kernel(a, b, TRANSFORMER) == transformer_kernel(b, a, TRANSFORMER)
