"""Hot inner loops: banded (local) attention and LSTM recurrence.

Each kernel exists twice: a vectorised numpy version (``*_numpy``) and an
explicit-loop version compiled with numba (``*_jit``). The public names
dispatch on :data:`mmfuse._jit.USE_JIT`. Both versions produce exact zeros
outside the attention band and on masked keys.

Array conventions (all float64):
    q, k, v     (H, T, d)   per-head queries/keys/values
    mask        (T,)        bool, True for valid frames
    weights     (H, T, T)   row t is the distribution over keys for query t
    xp          (K, 4n)     input pre-activations, gate order i, f, g, o
    wh          (n, 4n)     recurrent weights
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import USE_JIT, njit


class AttentionError(ValueError):
    pass


def check_attention_rows(window: int, mask: np.ndarray) -> None:
    """Every valid query must see at least one valid key inside its window."""
    if window < 1:
        raise AttentionError(f"attention window must be >= 1, got {window}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AttentionError("every position is masked; attention cannot be normalised")
    T = mask.shape[0]
    # counts of valid keys in [t - window, t + window] via prefix sums
    csum = np.concatenate([[0], np.cumsum(mask)])
    lo = np.clip(np.arange(T) - window, 0, T)
    hi = np.clip(np.arange(T) + window + 1, 0, T)
    empty = mask & (csum[hi] - csum[lo] == 0)
    if empty.any():
        rows = np.flatnonzero(empty).tolist()
        raise AttentionError(f"query rows {rows} have no valid key inside the window")


def band_allowed(T: int, window: int, mask: np.ndarray) -> np.ndarray:
    """(T, T) bool: query t may attend key s. Masked query rows are all False."""
    idx = np.arange(T)
    band = np.abs(idx[:, None] - idx[None, :]) <= window
    mask = np.asarray(mask, dtype=bool)
    return band & mask[None, :] & mask[:, None]


# ---------------------------------------------------------------- attention


def local_attention_fwd_numpy(q, k, v, window, mask):
    H, T, d = q.shape
    scale = 1.0 / math.sqrt(d)
    allowed = band_allowed(T, window, mask)
    scores = np.einsum("htd,hsd->hts", q, k) * scale
    scores = np.where(allowed[None], scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed[None], np.exp(scores - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    weights = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    ctx = weights @ v
    return ctx, weights


def local_attention_bwd_numpy(dctx, q, k, v, weights):
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    dweights = dctx @ v.transpose(0, 2, 1)
    dv = weights.transpose(0, 2, 1) @ dctx
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = dscores.transpose(0, 2, 1) @ q * scale
    return dq, dk, dv


@njit
def local_attention_fwd_jit(q, k, v, window, mask):
    H, T, d = q.shape
    scale = 1.0 / math.sqrt(d)
    ctx = np.zeros((H, T, d))
    weights = np.zeros((H, T, T))
    for h in range(H):
        for t in range(T):
            if not mask[t]:
                continue
            lo = max(0, t - window)
            hi = min(T, t + window + 1)
            row_max = -np.inf
            for s in range(lo, hi):
                if mask[s]:
                    acc = 0.0
                    for j in range(d):
                        acc += q[h, t, j] * k[h, s, j]
                    acc *= scale
                    weights[h, t, s] = acc
                    if acc > row_max:
                        row_max = acc
            total = 0.0
            for s in range(lo, hi):
                if mask[s]:
                    e = math.exp(weights[h, t, s] - row_max)
                    weights[h, t, s] = e
                    total += e
            for s in range(lo, hi):
                if mask[s]:
                    w = weights[h, t, s] / total
                    weights[h, t, s] = w
                    for j in range(d):
                        ctx[h, t, j] += w * v[h, s, j]
    return ctx, weights


@njit
def local_attention_bwd_jit(dctx, q, k, v, weights, window):
    H, T, d = q.shape
    scale = 1.0 / math.sqrt(d)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dw = np.zeros(T)
    for h in range(H):
        for t in range(T):
            lo = max(0, t - window)
            hi = min(T, t + window + 1)
            dot = 0.0
            for s in range(lo, hi):
                w = weights[h, t, s]
                if w == 0.0:
                    dw[s] = 0.0
                    continue
                acc = 0.0
                for j in range(d):
                    acc += dctx[h, t, j] * v[h, s, j]
                    dv[h, s, j] += w * dctx[h, t, j]
                dw[s] = acc
                dot += acc * w
            for s in range(lo, hi):
                w = weights[h, t, s]
                if w == 0.0:
                    continue
                ds = w * (dw[s] - dot) * scale
                for j in range(d):
                    dq[h, t, j] += ds * k[h, s, j]
                    dk[h, s, j] += ds * q[h, t, j]
    return dq, dk, dv


def local_attention_fwd(q, k, v, window, mask):
    """Banded softmax attention; returns ``(context, weights)``."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    check_attention_rows(window, mask)
    if USE_JIT:
        return local_attention_fwd_jit(
            np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(k, dtype=np.float64),
            np.ascontiguousarray(v, dtype=np.float64),
            int(window),
            mask,
        )
    return local_attention_fwd_numpy(q, k, v, window, mask)


def local_attention_bwd(dctx, q, k, v, weights, window):
    if USE_JIT:
        return local_attention_bwd_jit(
            np.ascontiguousarray(dctx, dtype=np.float64),
            np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(k, dtype=np.float64),
            np.ascontiguousarray(v, dtype=np.float64),
            np.ascontiguousarray(weights, dtype=np.float64),
            int(window),
        )
    return local_attention_bwd_numpy(dctx, q, k, v, weights)


# ---------------------------------------------------------------- LSTM


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_fwd_numpy(xp, wh):
    K, four_n = xp.shape
    n = four_n // 4
    h = np.zeros((K, n))
    c = np.zeros((K, n))
    gates = np.zeros((K, four_n))
    h_prev = np.zeros(n)
    c_prev = np.zeros(n)
    for t in range(K):
        z = xp[t] + h_prev @ wh
        i = _sigmoid(z[:n])
        f = _sigmoid(z[n : 2 * n])
        g = np.tanh(z[2 * n : 3 * n])
        o = _sigmoid(z[3 * n :])
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        gates[t] = np.concatenate([i, f, g, o])
        c[t] = c_prev
        h[t] = h_prev
    return h, c, gates


def lstm_bwd_numpy(dh, h, c, gates, wh):
    K, n = h.shape
    dxp = np.zeros((K, 4 * n))
    dwh = np.zeros_like(wh)
    dh_next = np.zeros(n)
    dc_next = np.zeros(n)
    for t in range(K - 1, -1, -1):
        i, f, g, o = gates[t, :n], gates[t, n : 2 * n], gates[t, 2 * n : 3 * n], gates[t, 3 * n :]
        c_prev = c[t - 1] if t > 0 else np.zeros(n)
        h_prev = h[t - 1] if t > 0 else np.zeros(n)
        tc = np.tanh(c[t])
        dht = dh[t] + dh_next
        do = dht * tc
        dct = dc_next + dht * o * (1.0 - tc * tc)
        di = dct * g
        df = dct * c_prev
        dg = dct * i
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)])
        dxp[t] = dz
        dwh += np.outer(h_prev, dz)
        dh_next = wh @ dz
        dc_next = dct * f
    return dxp, dwh


@njit
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit
def lstm_fwd_jit(xp, wh):
    K, four_n = xp.shape
    n = four_n // 4
    h = np.zeros((K, n))
    c = np.zeros((K, n))
    gates = np.zeros((K, four_n))
    h_prev = np.zeros(n)
    c_prev = np.zeros(n)
    z = np.zeros(four_n)
    for t in range(K):
        for col in range(four_n):
            z[col] = xp[t, col]
        # row-major sweep over wh keeps the inner loop contiguous
        for r in range(n):
            hr = h_prev[r]
            for col in range(four_n):
                z[col] += hr * wh[r, col]
        for j in range(n):
            i = _sig(z[j])
            f = _sig(z[n + j])
            g = math.tanh(z[2 * n + j])
            o = _sig(z[3 * n + j])
            cj = f * c_prev[j] + i * g
            gates[t, j] = i
            gates[t, n + j] = f
            gates[t, 2 * n + j] = g
            gates[t, 3 * n + j] = o
            c[t, j] = cj
            h[t, j] = o * math.tanh(cj)
        for j in range(n):
            c_prev[j] = c[t, j]
            h_prev[j] = h[t, j]
    return h, c, gates


@njit
def lstm_bwd_jit(dh, h, c, gates, wh):
    K, n = h.shape
    dxp = np.zeros((K, 4 * n))
    dwh = np.zeros_like(wh)
    dh_next = np.zeros(n)
    dc_next = np.zeros(n)
    for t in range(K - 1, -1, -1):
        for j in range(n):
            i = gates[t, j]
            f = gates[t, n + j]
            g = gates[t, 2 * n + j]
            o = gates[t, 3 * n + j]
            c_prev = c[t - 1, j] if t > 0 else 0.0
            tc = math.tanh(c[t, j])
            dht = dh[t, j] + dh_next[j]
            dct = dc_next[j] + dht * o * (1.0 - tc * tc)
            dxp[t, j] = dct * g * i * (1.0 - i)
            dxp[t, n + j] = dct * c_prev * f * (1.0 - f)
            dxp[t, 2 * n + j] = dct * i * (1.0 - g * g)
            dxp[t, 3 * n + j] = dht * tc * o * (1.0 - o)
            dc_next[j] = dct * f
        for r in range(n):
            hp = h[t - 1, r] if t > 0 else 0.0
            acc = 0.0
            for col in range(4 * n):
                dwh[r, col] += hp * dxp[t, col]
                acc += wh[r, col] * dxp[t, col]
            dh_next[r] = acc
    return dxp, dwh


def lstm_fwd(xp, wh):
    """Unidirectional LSTM over precomputed input pre-activations.

    Returns hidden states, cell states and post-activation gates, each with
    one row per step. Initial state is zero.
    """
    if USE_JIT:
        return lstm_fwd_jit(
            np.ascontiguousarray(xp, dtype=np.float64), np.ascontiguousarray(wh, dtype=np.float64)
        )
    return lstm_fwd_numpy(xp, wh)


def lstm_bwd(dh, h, c, gates, wh):
    """Backprop through time; ``dh`` is the loss gradient w.r.t. each step's h."""
    if USE_JIT:
        return lstm_bwd_jit(
            np.ascontiguousarray(dh, dtype=np.float64),
            np.ascontiguousarray(h, dtype=np.float64),
            np.ascontiguousarray(c, dtype=np.float64),
            np.ascontiguousarray(gates, dtype=np.float64),
            np.ascontiguousarray(wh, dtype=np.float64),
        )
    return lstm_bwd_numpy(dh, h, c, gates, wh)
