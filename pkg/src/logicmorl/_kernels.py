"""Compiled inner loops for the recurrent encoder and the optimizer."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def gru_scan(G, M, wh, bh_n, h_prev, RZ, N, GHN, out):
    """Forward recurrence for both directions of a GRU layer.

    G: (T, 2, B, 3H) input-side gate pre-activations (recurrent r/z biases folded in)
    M: (T, 2, B) mask; wh: (2, H, 3H); bh_n: (2, H) recurrent candidate bias.
    Fills the caches h_prev, RZ (T, 2, B, 2H), N, GHN and the outputs ``out``.
    """
    T, _, B, H3 = G.shape
    H = H3 // 3
    h = np.zeros((2, B, H))
    for k in range(T):
        for d in range(2):
            gh = np.dot(h[d], wh[d])
            for b in range(B):
                m = M[k, d, b]
                for j in range(H):
                    hp = h[d, b, j]
                    r = 1.0 / (1.0 + math.exp(-(G[k, d, b, j] + gh[b, j])))
                    z = 1.0 / (1.0 + math.exp(-(G[k, d, b, H + j] + gh[b, H + j])))
                    ghn = gh[b, 2 * H + j] + bh_n[d, j]
                    n = math.tanh(G[k, d, b, 2 * H + j] + r * ghn)
                    h_prev[k, d, b, j] = hp
                    RZ[k, d, b, j] = r
                    RZ[k, d, b, H + j] = z
                    N[k, d, b, j] = n
                    GHN[k, d, b, j] = ghn
                    hn = n + z * (hp - n)
                    if m != 1.0:
                        hn = hp + m * (hn - hp)
                    out[k, d, b, j] = hn
                    h[d, b, j] = hn


@njit(cache=True)
def gru_scan_backward(d_out, M, wh_t, h_prev, RZ, N, GHN, dG, dGH):
    """Backpropagation through time for :func:`gru_scan`.

    d_out: (T, 2, B, H) gradient w.r.t. every output; wh_t: (2, 3H, H).
    Fills dG (input-side pre-activation grads) and dGH (recurrent-side grads).
    """
    T, _, B, H = d_out.shape
    dh = np.zeros((2, B, H))
    for k in range(T - 1, -1, -1):
        for d in range(2):
            for b in range(B):
                m = M[k, d, b]
                for j in range(H):
                    g = dh[d, b, j] + d_out[k, d, b, j]
                    dhn = m * g
                    r = RZ[k, d, b, j]
                    z = RZ[k, d, b, H + j]
                    n = N[k, d, b, j]
                    dan = dhn * (1.0 - z) * (1.0 - n * n)
                    dar = dan * GHN[k, d, b, j] * r * (1.0 - r)
                    daz = dhn * (h_prev[k, d, b, j] - n) * z * (1.0 - z)
                    dG[k, d, b, j] = dar
                    dG[k, d, b, H + j] = daz
                    dG[k, d, b, 2 * H + j] = dan
                    dGH[k, d, b, j] = dar
                    dGH[k, d, b, H + j] = daz
                    dGH[k, d, b, 2 * H + j] = dan * r
                    dh[d, b, j] = g - dhn + dhn * z
            dh[d] += np.dot(dGH[k, d], wh_t[d])


@njit(cache=True)
def adam_update(param, grad, m, v, step_size, beta1, beta2, bias2, eps):
    """In-place Adam update; ``step_size`` already includes the first-moment bias correction."""
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        param[i] -= step_size * m[i] / (math.sqrt(v[i] / bias2) + eps)
