"""First-order recurrences coded straight from their textbook forms.

These never call into the momentum kernels. They serve as independent
oracles for the reductions of the momentum rule (mu = 0, eta = 1):

* gated delta rule: ``S_t = alpha (I - beta k k^T) S_{t-1} + beta k v^T``
* delta rule:       ``S_t = (I - beta k k^T) S_{t-1} + beta k v^T``
* decay rule:       ``S_t = alpha S_{t-1} + beta k v^T``

All outputs are ``o_t = S_t^T (scale q_t)``; inputs are ``[B, T, H, d]`` arrays.
"""
from __future__ import annotations

import numpy as np


def _run(q, k, v, scale, transition, write):
    B, T, H, dk = k.shape
    dv = v.shape[-1]
    out = np.zeros((B, T, H, dv), dtype=np.float64)
    finals = np.zeros((B, H, dk, dv))
    eye = np.eye(dk)
    for b in range(B):
        for h in range(H):
            S = np.zeros((dk, dv))
            for t in range(T):
                kt = k[b, t, h].astype(np.float64)
                S = transition(b, t, h, kt, eye) @ S + write(b, t, h) * np.outer(kt, v[b, t, h])
                out[b, t, h] = S.T @ (scale * q[b, t, h])
            finals[b, h] = S
    return out, finals


def gated_deltanet(q, k, v, alpha, beta, scale):
    return _run(q, k, v, scale,
                lambda b, t, h, kt, eye: alpha[b, t, h] * (eye - beta[b, t, h] * np.outer(kt, kt)),
                lambda b, t, h: beta[b, t, h])


def deltanet(q, k, v, beta, scale):
    return _run(q, k, v, scale,
                lambda b, t, h, kt, eye: eye - beta[b, t, h] * np.outer(kt, kt),
                lambda b, t, h: beta[b, t, h])


def decay_rule(q, k, v, alpha, beta, scale):
    return _run(q, k, v, scale,
                lambda b, t, h, kt, eye: alpha[b, t, h] * eye,
                lambda b, t, h: beta[b, t, h])
