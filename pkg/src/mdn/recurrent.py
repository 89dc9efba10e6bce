"""Stepwise momentum delta rule, recurrent form.

Per token, with ``p_t = alpha_t * k_t`` unless overridden:

    v~_t = v_t - S_{t-1}^T p_t
    M_t  = mu_t M_{t-1} - eta_t k_t v~_t^T
    S_t  = alpha_t S_{t-1} - beta_t M_t
    o_t  = S_t^T (scale * q_t)

This is the ground truth the chunkwise kernel is checked against, and the
decoding path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gating import GateSeq
from .lanes import from_lanes, map_lanes, to_lanes


class NonFiniteInput(ValueError, FloatingPointError):
    """NaN or Inf where a finite value is required."""


@dataclass
class DualState:
    """Fast weight ``S`` and momentum ``M``, shaped ``[..., d_k, d_v]``."""

    S: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        if self.S.shape != self.M.shape:
            raise ValueError(f"S and M shapes differ: {self.S.shape} vs {self.M.shape}")

    @classmethod
    def zeros(cls, *shape, dtype=np.float64) -> "DualState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))

    def astype(self, dtype) -> "DualState":
        return DualState(self.S.astype(dtype), self.M.astype(dtype))

    def norm(self) -> np.ndarray:
        """Joint Frobenius norm of ``(S, M)`` per leading index."""
        return np.sqrt((self.S ** 2).sum((-1, -2)) + (self.M ** 2).sum((-1, -2)))


@dataclass
class AttnInputs:
    q: np.ndarray          # [B, T, H, d_k]
    k: np.ndarray          # [B, T, H, d_k]
    v: np.ndarray          # [B, T, H, d_v]
    gates: GateSeq         # [B, T, H] each
    scale: float | None = None
    p: np.ndarray | None = None  # defaults to alpha * k

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.q.ndim != 4 or self.q.shape != self.k.shape:
            raise ValueError(f"q and k must be [B,T,H,d_k] and equal, got {self.q.shape}, {self.k.shape}")
        if self.v.ndim != 4 or self.v.shape[:3] != self.k.shape[:3]:
            raise ValueError(f"v must be [B,T,H,d_v] matching k, got {self.v.shape}")
        if self.gates.shape != self.k.shape[:3]:
            raise ValueError(f"gates shaped {self.gates.shape}, expected {self.k.shape[:3]}")
        if self.p is not None and self.p.shape != self.k.shape:
            raise ValueError(f"p must match k, got {self.p.shape}")

    @property
    def dims(self):
        B, T, H, dk = self.k.shape
        return B, T, H, dk, self.v.shape[-1]

    @property
    def dtype(self):
        return self.k.dtype

    @property
    def resolved_scale(self) -> float:
        return 1.0 / np.sqrt(self.q.shape[-1]) if self.scale is None else float(self.scale)

    def resolved_p(self) -> np.ndarray:
        if self.p is not None:
            return self.p
        return self.gates.alpha.astype(self.k.dtype)[..., None] * self.k

    def astype(self, dtype) -> "AttnInputs":
        return AttnInputs(self.q.astype(dtype), self.k.astype(dtype), self.v.astype(dtype),
                          self.gates.astype(dtype), self.scale,
                          None if self.p is None else self.p.astype(dtype))

    def slice_time(self, start: int, stop: int) -> "AttnInputs":
        g = self.gates
        sl = slice(start, stop)
        return AttnInputs(self.q[:, sl], self.k[:, sl], self.v[:, sl],
                          GateSeq(g.log_alpha[:, sl], g.log_mu[:, sl], g.beta[:, sl], g.eta[:, sl]),
                          self.scale, None if self.p is None else self.p[:, sl])

    def check_finite(self) -> None:
        for name in ("q", "k", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteInput(f"non-finite values in {name}")
        g = self.gates
        if np.isnan(g.log_alpha).any() or np.isnan(g.log_mu).any() or not (
                np.all(np.isfinite(g.beta)) and np.all(np.isfinite(g.eta))):
            raise NonFiniteInput("NaN in gate tensors")


def l2_normalize(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    n = np.sqrt((x * x).sum(-1, keepdims=True))
    return x / (n + eps)


def mdn_step(state: DualState, q_t, k_t, v_t, alpha, beta, mu, eta, scale: float = 1.0, p_t=None):
    """One token of the recurrence. Scalars may be batched along leading axes."""
    q_t, k_t, v_t = np.asarray(q_t), np.asarray(k_t), np.asarray(v_t)
    dk, dv = state.S.shape[-2:]
    if k_t.shape[-1] != dk or q_t.shape[-1] != dk or v_t.shape[-1] != dv:
        raise ValueError(f"token dims ({q_t.shape[-1]}, {k_t.shape[-1]}, {v_t.shape[-1]}) "
                         f"do not fit state ({dk}, {dv})")
    alpha, beta, mu, eta = (np.asarray(x)[..., None, None] for x in (alpha, beta, mu, eta))
    p_t = alpha[..., 0] * k_t if p_t is None else np.asarray(p_t)
    pred = np.matmul(p_t[..., None, :], state.S)[..., 0, :]
    v_tilde = v_t - pred
    M = mu * state.M - eta * (k_t[..., :, None] * v_tilde[..., None, :])
    S = alpha * state.S - beta * M
    o = np.matmul((scale * q_t)[..., None, :], S)[..., 0, :]
    return DualState(S, M), o


def _forward_lanes(q, k, v, p, la, lm, beta, eta, S, M, record=False):
    """Sequential scan over time for a block of lanes. ``q`` is pre-scaled."""
    N, T, dk = k.shape
    o = np.empty((N, T, v.shape[-1]), dtype=v.dtype)
    trace = np.empty((N, T + 1, dk, v.shape[-1]), dtype=v.dtype) if record else None
    if record:
        trace[:, 0] = S
    alpha = np.exp(la)[..., None, None]
    mu = np.exp(lm)[..., None, None]
    beta = beta[..., None, None]
    keta = eta[..., None] * k
    for t in range(T):
        pred = np.matmul(p[:, t, None, :], S)[:, 0, :]
        vt = v[:, t] - pred
        M = mu[:, t] * M - np.einsum("ni,nj->nij", keta[:, t], vt)
        S = alpha[:, t] * S - beta[:, t] * M
        o[:, t] = np.matmul(q[:, t, None, :], S)[:, 0, :]
        if record:
            trace[:, t + 1] = S
    out = (o, S, M)
    return out + (trace,) if record else out


def _init_lanes(init: DualState | None, B, H, dk, dv, dtype):
    if init is None:
        z = np.zeros((B * H, dk, dv), dtype)
        return z, z.copy()
    S = np.broadcast_to(np.asarray(init.S, dtype), (B, H, dk, dv)).reshape(B * H, dk, dv)
    M = np.broadcast_to(np.asarray(init.M, dtype), (B, H, dk, dv)).reshape(B * H, dk, dv)
    return S.copy(), M.copy()


def mdn_recurrent_forward(inputs: AttnInputs, init: DualState | None = None, *,
                          record_states: bool = False, workers: int = 1):
    """Run the recurrence over ``t = 1..T`` for every (batch, head) lane.

    Returns ``(O, finals)`` with ``O`` shaped ``[B, T, H, d_v]`` and ``finals``
    a :class:`DualState` of ``[B, H, d_k, d_v]`` arrays. With
    ``record_states=True`` a third element holds every ``S_t`` as
    ``[B, T + 1, H, d_k, d_v]`` (index 0 is the initial state).
    """
    inputs.check_finite()
    B, T, H, dk, dv = inputs.dims
    dt = inputs.dtype
    g = inputs.gates.astype(dt)
    lanes = [to_lanes(x) for x in (inputs.q * dt.type(inputs.resolved_scale), inputs.k, inputs.v,
                                   inputs.resolved_p(), g.log_alpha, g.log_mu, g.beta, g.eta)]
    S0, M0 = _init_lanes(init, B, H, dk, dv, dt)

    def run(*a):
        return _forward_lanes(*a, record=record_states)

    res = map_lanes(run, lanes + [S0, M0], workers)
    o = from_lanes(res[0], B, H)
    finals = DualState(res[1].reshape(B, H, dk, dv), res[2].reshape(B, H, dk, dv))
    if record_states:
        return o, finals, from_lanes(res[3], B, H)
    return o, finals


def state_change_norm(trace) -> np.ndarray:
    """Per-step mean Frobenius norm of ``S_t - S_{t-1}`` over all lanes.

    ``trace`` is the ``[B, T + 1, H, d_k, d_v]`` array returned with
    ``record_states=True``; the result has length ``T``.
    """
    if trace is None:
        raise ValueError("no state trace recorded; run the forward pass with record_states=True")
    trace = np.asarray(trace)
    if trace.ndim != 5 or trace.shape[1] < 1:
        raise ValueError(f"expected a [B, T+1, H, d_k, d_v] trace, got {trace.shape}")
    delta = np.diff(trace, axis=1)
    norms = np.sqrt((delta ** 2).sum(axis=(-1, -2)))   # [B, T, H]
    return norms.mean(axis=(0, 2))
