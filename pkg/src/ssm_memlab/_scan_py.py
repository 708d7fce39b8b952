"""Pure-numpy selective scan kernels.

Reference implementation of one layer's hot path: the recurrence with its
state readout, plus the matching reverse sweep. The compiled twin in
``_scan_ext.pyx`` has the same contract and must agree to rounding error;
``ssm_memlab.kernels`` picks one at import time.

Shapes: ``B`` batch, ``T`` time, ``D`` channels, ``N`` state size.
"""

from __future__ import annotations

import numpy as np


def layer_forward(a_bar, delta, bp, cp, u, h0):
    """Scan one layer given its discretized gates.

    Parameters
    ----------
    a_bar : (B, T, D, N) discretized diagonal, already masked by any ablation
    delta, u : (B, T, D) step sizes and layer input
    bp, cp : (B, T, N) input and output projections
    h0 : (B, D, N) initial state

    Returns
    -------
    h : (B, T, D, N)
    y : (B, T, D) state readout ``h_t @ cp_t`` (no skip term)
    """
    n_batch, n_time, d = delta.shape
    inject = (delta[..., None] * bp[:, :, None, :]) * u[..., None]
    h = np.empty_like(a_bar)
    y = np.empty((n_batch, n_time, d))
    prev = h0
    for t in range(n_time):
        cur = a_bar[:, t] * prev + inject[:, t]
        h[:, t] = cur
        y[:, t] = np.einsum("bdn,bn->bd", cur, cp[:, t])
        prev = cur
    return h, y


def layer_backward(delta, A, bp, cp, u, a_bar, h, h0, grad_y):
    """Reverse sweep of :func:`layer_forward`.

    Returns ``(g_delta, g_A, g_bp, g_cp, g_u, g_h0)``; ``g_u`` covers only the
    paths through the injection ``delta * u * bp``.
    """
    n_batch, n_time, d, n = a_bar.shape
    gh = np.empty_like(a_bar)
    g_cp = np.empty((n_batch, n_time, n))
    carry = np.zeros((n_batch, d, n))
    for t in range(n_time - 1, -1, -1):
        g_cp[:, t] = np.einsum("bd,bdn->bn", grad_y[:, t], h[:, t])
        cur = carry + grad_y[:, t, :, None] * cp[:, t, None, :]
        gh[:, t] = cur
        carry = cur * a_bar[:, t]
    prev = np.concatenate([h0[:, None], h[:, :-1]], axis=1)
    g_pre = gh * prev * a_bar  # d/d(delta * A)
    g_A = np.einsum("btdn,btd->dn", g_pre, delta)
    gh_bp = np.einsum("btdn,btn->btd", gh, bp)
    g_delta = np.einsum("btdn,dn->btd", g_pre, A) + gh_bp * u
    g_u = gh_bp * delta
    g_bp = np.einsum("btdn,btd->btn", gh, delta * u)
    return g_delta, g_A, g_bp, g_cp, g_u, carry
