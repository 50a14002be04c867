import numpy as np
import pytest

from capture_kernels import _backend
from capture_kernels.kernel_propagation import McConfig, attention_ntk_update, embed_covariance
from capture_kernels.softmax import softmax_rows
from capture_kernels.tasks import build_grammar

pytestmark = pytest.mark.skipif(not _backend.HAVE_NUMBA, reason="numba unavailable")


def both(fn):
    out = {}
    for name in ("numpy", "numba"):
        prev = _backend.set_backend(name)
        try:
            out[name] = fn()
        finally:
            _backend.set_backend(prev)
    return out["numpy"], out["numba"]


def test_softmax_backends_agree():
    s = np.random.default_rng(0).standard_normal((50, 7, 7)) * 5
    a, b = both(lambda: _backend.softmax_rows_batch(s))
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("with_theta", [False, True])
def test_attention_moments_backends_agree(with_theta):
    rng = np.random.default_rng(1)
    a1 = softmax_rows(rng.standard_normal((40, 5, 5)))
    a2 = softmax_rows(rng.standard_normal((40, 6, 6)))
    sig = rng.standard_normal((5, 6))
    th = rng.standard_normal((5, 6)) if with_theta else None
    a, b = both(lambda: _backend.attention_moments(a1, a2, sig, th))
    assert len(a) == len(b) == (4 if with_theta else 2)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-11, atol=1e-12)


def test_cyk_backends_agree():
    g = build_grammar(3)
    rng = np.random.default_rng(2)
    for _ in range(20):
        toks = rng.integers(0, g.n_terms, int(rng.integers(1, 14)))
        a, b = both(lambda: _backend.cyk_chart(toks, g.term_mask(), g.binary, g.n_vars))
        np.testing.assert_array_equal(a, b)


def test_full_update_backends_agree():
    x = np.random.default_rng(4).standard_normal((8, 3))
    st = embed_covariance(x[:4], x[4:])
    a, b = both(lambda: attention_ntk_update(st, McConfig(n_mc=300, seed=9)))
    for key in ("sigma12", "theta12", "theta11"):
        np.testing.assert_allclose(getattr(a, key), getattr(b, key), rtol=1e-10)


def test_set_backend_validation():
    with pytest.raises(ValueError):
        _backend.set_backend("fortran")
    prev = _backend.set_backend("numpy")
    assert _backend.get_backend() == "numpy"
    _backend.set_backend(prev)


def test_env_flag_selects_backend(monkeypatch):
    monkeypatch.setenv("CAPTURE_KERNELS_BACKEND", "numpy")
    assert _backend._initial_backend() == "numpy"
    monkeypatch.setenv("CAPTURE_KERNELS_BACKEND", "numba")
    assert _backend._initial_backend() == "numba"
    monkeypatch.setenv("CAPTURE_KERNELS_BACKEND", "bogus")
    with pytest.warns(UserWarning):
        assert _backend._initial_backend() == "numpy"
