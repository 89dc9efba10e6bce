"""Reverse-mode gradients of the recurrent forward pass.

The scalar being differentiated is ``L = sum(grad_O * O)``. States are
checkpointed every ``segment`` steps on a forward sweep; each segment is then
replayed forward and walked backwards, so memory is O(segment * d_k * d_v)
per lane instead of O(T * d_k * d_v).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lanes import from_lanes, map_lanes, to_lanes
from .recurrent import AttnInputs, DualState, _init_lanes
from .tensor import max_rel_err


@dataclass
class GradBundle:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_log_alpha: np.ndarray
    d_log_mu: np.ndarray
    d_beta: np.ndarray
    d_eta: np.ndarray
    d_S0: np.ndarray
    d_M0: np.ndarray
    d_p: np.ndarray | None = None  # only when the caller supplied p explicitly

    def flat(self) -> np.ndarray:
        parts = [self.d_q, self.d_k, self.d_v, self.d_log_alpha, self.d_log_mu,
                 self.d_beta, self.d_eta, self.d_S0, self.d_M0]
        if self.d_p is not None:
            parts.append(self.d_p)
        return np.concatenate([np.ravel(x) for x in parts])


def _outer(a, b):
    return np.einsum("ni,nj->nij", a, b)


def _inner(A, B):
    n = A.shape[0]
    return np.matmul(A.reshape(n, 1, -1), B.reshape(n, -1, 1))[:, 0, 0]


def _backward_lanes(scale, explicit_p, segment, q, k, v, p, la, lm, beta, eta, S, M, go):
    N, T, dk = k.shape
    alpha, mu = np.exp(la), np.exp(lm)
    if not explicit_p:
        p = alpha[..., None] * k

    # forward sweep keeping only segment-entry checkpoints
    starts = list(range(0, T, segment))
    ckpt = {}
    for t in range(T):
        if t in starts:
            ckpt[t] = (S, M)
        vt = v[:, t] - np.matmul(p[:, t, None, :], S)[:, 0, :]
        M = mu[:, t, None, None] * M - eta[:, t, None, None] * _outer(k[:, t], vt)
        S = alpha[:, t, None, None] * S - beta[:, t, None, None] * M

    d_q, d_k, d_v = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    d_p = np.zeros_like(k) if explicit_p else None
    d_la, d_lm, d_beta, d_eta = (np.zeros_like(la) for _ in range(4))
    gS = np.zeros_like(S)
    gM = np.zeros_like(M)

    for s0 in reversed(starts):
        s1 = min(s0 + segment, T)
        S, M = ckpt[s0]
        hist = []
        for t in range(s0, s1):
            vt = v[:, t] - np.matmul(p[:, t, None, :], S)[:, 0, :]
            Mn = mu[:, t, None, None] * M - eta[:, t, None, None] * _outer(k[:, t], vt)
            Sn = alpha[:, t, None, None] * S - beta[:, t, None, None] * Mn
            hist.append((S, M, Sn, Mn, vt))
            S, M = Sn, Mn
        for t in range(s1 - 1, s0 - 1, -1):
            S_prev, M_prev, S_t, M_t, vt = hist[t - s0]
            a, m, b, e = alpha[:, t], mu[:, t], beta[:, t], eta[:, t]
            qs = scale * q[:, t]
            gS = gS + _outer(qs, go[:, t])
            d_q[:, t] = scale * np.matmul(S_t, go[:, t, :, None])[..., 0]
            # S_t = a S_prev - b M_t
            g_a = _inner(S_prev, gS)
            d_beta[:, t] = -_inner(M_t, gS)
            gM = gM - b[:, None, None] * gS
            gS_prev = a[:, None, None] * gS
            # M_t = m M_prev - e k vt^T
            d_lm[:, t] = m * _inner(M_prev, gM)
            gMv = np.matmul(gM, vt[:, :, None])[..., 0]          # [N, dk]
            d_eta[:, t] = -(k[:, t] * gMv).sum(-1)
            d_k[:, t] -= e[:, None] * gMv
            g_vt = -e[:, None] * np.matmul(k[:, t, None, :], gM)[:, 0, :]
            gM = m[:, None, None] * gM
            # vt = v - S_prev^T p
            d_v[:, t] = g_vt
            g_p = -np.matmul(S_prev, g_vt[:, :, None])[..., 0]
            gS_prev = gS_prev - _outer(p[:, t], g_vt)
            if explicit_p:
                d_p[:, t] = g_p
            else:
                d_k[:, t] += a[:, None] * g_p
                g_a = g_a + (k[:, t] * g_p).sum(-1)
            d_la[:, t] = a * g_a
            gS = gS_prev
    out = (d_q, d_k, d_v, d_la, d_lm, d_beta, d_eta, gS, gM)
    return out + (d_p,) if explicit_p else out


def mdn_recurrent_backward(inputs: AttnInputs, grad_O, init: DualState | None = None, *,
                           segment: int = 64, workers: int = 1) -> GradBundle:
    """Exact gradients of ``sum(grad_O * O)`` w.r.t. every input, gate and initial state."""
    inputs.check_finite()
    B, T, H, dk, dv = inputs.dims
    grad_O = np.asarray(grad_O, dtype=inputs.dtype)
    if grad_O.shape != (B, T, H, dv):
        raise ValueError(f"grad_O shaped {grad_O.shape}, expected {(B, T, H, dv)}")
    if segment < 1:
        raise ValueError("segment must be >= 1")
    dt = inputs.dtype
    g = inputs.gates.astype(dt)
    explicit_p = inputs.p is not None
    p = inputs.p if explicit_p else np.zeros_like(inputs.k)
    lanes = [to_lanes(x) for x in (inputs.q, inputs.k, inputs.v, p, g.log_alpha, g.log_mu,
                                   g.beta, g.eta)]
    S0, M0 = _init_lanes(init, B, H, dk, dv, dt)
    scale = inputs.resolved_scale

    def run(*a):
        return _backward_lanes(scale, explicit_p, segment, *a)

    r = map_lanes(run, lanes + [S0, M0, to_lanes(grad_O)], workers)
    back = lambda x: from_lanes(x, B, H)
    return GradBundle(
        d_q=back(r[0]), d_k=back(r[1]), d_v=back(r[2]),
        d_log_alpha=back(r[3]), d_log_mu=back(r[4]), d_beta=back(r[5]), d_eta=back(r[6]),
        d_S0=r[7].reshape(B, H, dk, dv), d_M0=r[8].reshape(B, H, dk, dv),
        d_p=back(r[9]) if explicit_p else None,
    )


def finite_diff_grad(f, x, h: float = 1e-6, *, batched: bool = False) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    With ``batched=True`` ``f`` receives a ``[2n, n]`` stack of perturbed points
    (all ``+h`` rows first) and must return ``2n`` values.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    steps = h * np.eye(n)
    if batched:
        vals = np.asarray(f(np.concatenate([x + steps, x - steps])), dtype=np.float64)
        if vals.shape != (2 * n,):
            raise ValueError(f"batched f returned shape {vals.shape}, expected {(2 * n,)}")
        plus, minus = vals[:n], vals[n:]
    else:
        plus = np.array([f(x + s) for s in steps], dtype=np.float64)
        minus = np.array([f(x - s) for s in steps], dtype=np.float64)
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise FloatingPointError("objective returned a non-finite value")
    return (plus - minus) / (2 * h)


_FIELDS = ("q", "k", "v", "log_alpha", "log_mu", "beta", "eta", "S0", "M0")


def _pack(inputs: AttnInputs, init: DualState):
    g = inputs.gates
    arrays = [inputs.q, inputs.k, inputs.v, g.log_alpha, g.log_mu, g.beta, g.eta, init.S, init.M]
    shapes = [a.shape for a in arrays]
    return np.concatenate([np.ravel(a) for a in arrays]).astype(np.float64), shapes


def gradient_check(inputs: AttnInputs, grad_O, init: DualState | None = None, h: float = 1e-6) -> dict:
    """Compare :func:`mdn_recurrent_backward` with central differences.

    Every perturbed point becomes its own batch entry of a single forward
    call. Returns ``{field: norm-wise relative error}`` plus ``"all"``, the
    same metric over the concatenated gradient. A field whose true gradient
    sits at the difference quotient's round-off floor (e.g. ``S0`` after a
    near-zero ``alpha``) has a meaningless per-field ratio; ``"all"`` does not.
    """
    from .gating import GateSeq
    from .recurrent import mdn_recurrent_forward

    if inputs.p is not None:
        raise ValueError("gradient_check covers the default p = alpha * k path only")
    B, T, H, dk, dv = inputs.dims
    inputs = inputs.astype(np.float64)
    if init is None:
        init = DualState.zeros(B, H, dk, dv)
    x0, shapes = _pack(inputs, init)
    sizes = [int(np.prod(s)) for s in shapes]
    gO = np.asarray(grad_O, dtype=np.float64)

    def f(X):
        m = X.shape[0]
        parts, off = [], 0
        for s, n in zip(shapes, sizes):
            parts.append(X[:, off:off + n].reshape(m * s[0], *s[1:]))
            off += n
        q, k, v, la, lm, be, et, S0, M0 = parts
        batch = AttnInputs(q, k, v, GateSeq(la, lm, be, et), inputs.scale)
        o, _ = mdn_recurrent_forward(batch, DualState(S0, M0))
        return (o.reshape(m, *gO.shape) * gO).sum(axis=tuple(range(1, gO.ndim + 1)))

    fd = finite_diff_grad(f, x0, h, batched=True)
    ad = mdn_recurrent_backward(inputs, gO, init)
    errs, off, flat = {}, 0, []
    for name, n, got in zip(_FIELDS, sizes, (ad.d_q, ad.d_k, ad.d_v, ad.d_log_alpha, ad.d_log_mu,
                                             ad.d_beta, ad.d_eta, ad.d_S0, ad.d_M0)):
        ref = fd[off:off + n]
        off += n
        flat.append(np.ravel(got))
        scale = np.max(np.abs(ref))
        diff = np.max(np.abs(np.ravel(got) - ref))
        errs[name] = float(diff / scale) if scale > 0 else float(diff)
    errs["all"] = max_rel_err(np.concatenate(flat), fd)
    return errs
