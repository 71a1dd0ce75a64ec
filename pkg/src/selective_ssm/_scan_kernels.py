"""Compiled loops for the batched scan and its adjoint.

Arguments are broadcast views of shape (batch, T, d, N) (zero strides are
fine), so one kernel serves every mixer kind. Used only when numba is
importable; the numpy path in ``mixers`` is the reference.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None


def _forward(A, U, C, states, y):
    bsz, T, d, N = A.shape
    h = np.zeros((d, N))
    for b in range(bsz):
        h[:, :] = 0.0
        for t in range(T):
            for i in range(d):
                acc = 0.0
                for n in range(N):
                    v = A[b, t, i, n] * h[i, n] + U[b, t, i, n]
                    h[i, n] = v
                    states[b, t, i, n] = v
                    acc += v * C[b, t, n]
                y[b, t, i] = acc


def _backward(A, D, lam, S, x, Bm, C, states, gy, scaled, gx, gB, gC, gDr, glam):
    bsz, T, d, N = A.shape
    rd = gDr.shape[2] > 1
    rn = gDr.shape[3] > 1
    g = np.zeros((d, N))
    for b in range(bsz):
        g[:, :] = 0.0
        for t in range(T - 1, -1, -1):
            for i in range(d):
                gyi = gy[b, t, i]
                xb = x[b, t, i]
                ii = i if rd else 0
                acc_x = 0.0
                for n in range(N):
                    gv = gyi * C[b, t, n]
                    if t + 1 < T:
                        gv += A[b, t + 1, i, n] * g[i, n]
                    g[i, n] = gv
                    gC[b, t, n] += states[b, t, i, n] * gyi
                    s = S[b, t, i, n]
                    bb = Bm[b, t, n]
                    acc_x += gv * s * bb
                    gB[b, t, n] += gv * s * xb
                    gd = gv * xb * bb if scaled else 0.0
                    if t > 0:
                        gla = gv * states[b, t - 1, i, n] * A[b, t, i, n]
                        glam[i, n] -= gla * D[b, t, i, n]
                        gd -= gla * lam[i, n]
                    gDr[b, t, ii, n if rn else 0] += gd
                gx[b, t, i] = acc_x


if AVAILABLE:
    _forward_jit = numba.njit(cache=True, nogil=True)(_forward)
    _backward_jit = numba.njit(cache=True, nogil=True)(_backward)


def forward(A, U, C):
    """Return (y, states) with y (batch, T, d) and states (batch, T, d, N).

    A holds the decay factors and U the input terms, both (batch, T, d, N).
    """
    bsz, T, d, N = A.shape
    states = np.empty((bsz, T, d, N))
    y = np.empty((bsz, T, d))
    _forward_jit(A, U, C, states, y)
    return y, states


def backward(A, D, lam, S, x, Bm, C, states, gy, delta_shape, scaled):
    """Cotangents (gx, gB, gC, gdelta, glam).

    gdelta is summed down to ``delta_shape`` (batch, T, 1 or d, 1 or N); with
    ``scaled`` it includes the Δ factor on the input term.
    """
    bsz, T, d, N = A.shape
    gx = np.empty((bsz, T, d))
    gB = np.zeros((bsz, T, N))
    gC = np.zeros((bsz, T, N))
    gDr = np.zeros(delta_shape)
    glam = np.zeros((d, N))
    _backward_jit(A, D, lam, S, x, Bm, C, states, np.ascontiguousarray(gy), bool(scaled), gx, gB, gC, gDr, glam)
    return gx, gB, gC, gDr, glam
