"""Fused causal-attention kernels.

Scores, masking, softmax, and the value reduction are fused into one pass per
(batch, head) slice. A numba build is used when available; the numpy fallback
computes the same quantities with stacked matmuls. Both paths are run-to-run
deterministic: every (batch, head) slice is independent, so parallel
scheduling cannot reorder any floating-point accumulation.
"""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

try:
    # a stale TBB install makes numba emit an advisory at first parallel launch
    warnings.filterwarnings("ignore", message=".*TBB.*", module="numba.*")
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else wrap(args[0])


def configure_threads(n: int | None = None) -> int:
    """Cap worker threads (numba layer). Honors BAMFORGE_THREADS when n is None."""
    if n is None:
        raw = os.environ.get("BAMFORGE_THREADS", "")
        if not raw:
            return 0
        n = int(raw)
    if HAVE_NUMBA and n > 0:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return n or 0


@njit(parallel=True, cache=True)
def _fwd_numba(q, k, v, out, probs):  # pragma: no cover - compiled
    B, H, T, D = q.shape
    scale = 1.0 / math.sqrt(D)
    for bh in prange(B * H):
        b = bh // H
        h = bh % H
        for i in range(T):
            m = -1e300
            for j in range(i + 1):
                s = 0.0
                for d in range(D):
                    s += q[b, h, i, d] * k[b, h, j, d]
                s *= scale
                probs[b, h, i, j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(i + 1):
                e = math.exp(probs[b, h, i, j] - m)
                probs[b, h, i, j] = e
                z += e
            inv = 1.0 / z
            for d in range(D):
                out[b, h, i, d] = 0.0
            for j in range(i + 1):
                p = probs[b, h, i, j] * inv
                probs[b, h, i, j] = p
                for d in range(D):
                    out[b, h, i, d] += p * v[b, h, j, d]


@njit(parallel=True, cache=True)
def _bwd_numba(gout, q, k, v, probs, gq, gk, gv):  # pragma: no cover - compiled
    B, H, T, D = q.shape
    scale = 1.0 / math.sqrt(D)
    for bh in prange(B * H):
        b = bh // H
        h = bh % H
        gp = np.empty(T)
        for i in range(T):
            # gp[j] = d(loss)/d(probs[i,j]); dot feeds the softmax jacobian
            dot = 0.0
            for j in range(i + 1):
                acc = 0.0
                for d in range(D):
                    acc += gout[b, h, i, d] * v[b, h, j, d]
                gp[j] = acc
                p = probs[b, h, i, j]
                dot += p * acc
                for d in range(D):
                    gv[b, h, j, d] += p * gout[b, h, i, d]
            for j in range(i + 1):
                gs = probs[b, h, i, j] * (gp[j] - dot) * scale
                for d in range(D):
                    gq[b, h, i, d] += gs * k[b, h, j, d]
                    gk[b, h, j, d] += gs * q[b, h, i, d]


_NEG = -1e30


def _fwd_numpy(q, k, v):
    B, H, T, D = q.shape
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(D)
    mask = np.triu(np.full((T, T), _NEG, dtype=scores.dtype), k=1)
    scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores @ v, scores


def _bwd_numpy(gout, q, k, v, probs):
    D = q.shape[-1]
    scale = 1.0 / math.sqrt(D)
    gprobs = gout @ v.swapaxes(-1, -2)
    gscores = probs * (gprobs - (probs * gprobs).sum(axis=-1, keepdims=True))
    gscores *= scale
    gq = gscores @ k
    gk = gscores.swapaxes(-1, -2) @ q
    gv = probs.swapaxes(-1, -2) @ gout
    return gq, gk, gv


def causal_attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """q, k, v: (B, H, T, D) -> (output (B, H, T, D), probs (B, H, T, T))."""
    if HAVE_NUMBA and q.dtype == np.float64:
        out = np.empty_like(q)
        probs = np.empty(q.shape[:3] + (q.shape[2],), dtype=q.dtype)
        _fwd_numba(q, k, v, out, probs)  # fills the causal triangle of probs
        return out, probs
    return _fwd_numpy(q, k, v)


def causal_attention_backward(gout, q, k, v, probs):
    """Gradients of the fused forward wrt q, k, v."""
    if HAVE_NUMBA and q.dtype == np.float64:
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gv = np.zeros_like(v)
        _bwd_numba(gout, q, k, v, probs, gq, gk, gv)
        return gq, gk, gv
    return _bwd_numpy(gout, q, k, v, probs)
