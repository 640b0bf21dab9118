import numpy as np
import pytest

from mmfuse import kernels
from mmfuse._jit import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("T,window", [(1, 1), (5, 1), (9, 3), (12, 20)])
def test_attention_paths_agree(T, window):
    rng = np.random.default_rng(T * 31 + window)
    q, k, v = rng.normal(size=(3, 2, T, 4))
    mask = rng.random(T) > 0.3
    mask[0] = True
    ctx_n, w_n = kernels.local_attention_fwd_numpy(q, k, v, window, mask)
    ctx_j, w_j = kernels.local_attention_fwd_jit(q, k, v, window, mask)
    np.testing.assert_allclose(ctx_j, ctx_n, atol=1e-13)
    np.testing.assert_allclose(w_j, w_n, atol=1e-13)
    assert np.array_equal(w_j == 0.0, w_n == 0.0)

    dctx = rng.normal(size=ctx_n.shape)
    grads_n = kernels.local_attention_bwd_numpy(dctx, q, k, v, w_n)
    grads_j = kernels.local_attention_bwd_jit(dctx, q, k, v, w_j, window)
    for a, b in zip(grads_j, grads_n):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("K,n", [(1, 2), (6, 3)])
def test_lstm_paths_agree(K, n):
    rng = np.random.default_rng(K + n)
    xp = rng.normal(size=(K, 4 * n))
    wh = rng.normal(size=(n, 4 * n))
    fwd_n = kernels.lstm_fwd_numpy(xp, wh)
    fwd_j = kernels.lstm_fwd_jit(xp, wh)
    for a, b in zip(fwd_j, fwd_n):
        np.testing.assert_allclose(a, b, atol=1e-14)
    dh = rng.normal(size=(K, n))
    for a, b in zip(kernels.lstm_bwd_jit(dh, *fwd_j, wh), kernels.lstm_bwd_numpy(dh, *fwd_n, wh)):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_dispatch_follows_flag(monkeypatch):
    q = np.ones((1, 2, 2))
    mask = np.ones(2, dtype=bool)
    calls = []
    monkeypatch.setattr(kernels, "local_attention_fwd_jit", lambda *a: calls.append("jit") or (None, None))
    monkeypatch.setattr(kernels, "USE_JIT", True)
    kernels.local_attention_fwd(q, q, q, 1, mask)
    monkeypatch.setattr(kernels, "USE_JIT", False)
    kernels.local_attention_fwd(q, q, q, 1, mask)
    assert calls == ["jit"]


def test_unnormalisable_rows_rejected():
    # a valid query always sees itself, so only a zero window leaves a row empty
    kernels.check_attention_rows(1, np.array([True, False, False, True]))
    with pytest.raises(kernels.AttentionError):
        kernels.check_attention_rows(0, np.ones(3, dtype=bool))
    with pytest.raises(kernels.AttentionError):
        kernels.check_attention_rows(2, np.zeros(3, dtype=bool))
