"""Exact chunkwise-parallel form of the momentum delta rule.

Inside a chunk the corrected values solve a unit lower triangular system,

    (I + (P K_eta^T) * Gamma_strict) V~ = V - Diag(abar_prev) P S + Diag(b_prev) P M

which the UT transform turns into ``V~ = U - Y S + Z M``. Outputs and the
chunk-exit states then follow from matrix products with the Gamma mask. The
only sequential dependency left is the (S, M) hand-off between chunks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import ChunkCoeffs, chunk_coefficients
from .lanes import from_lanes, map_lanes, to_lanes
from .recurrent import AttnInputs, DualState, _init_lanes
from .tensor import unit_lower_tri_inverse

CHUNK_SIZES = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_CHUNK = 64


@dataclass
class ChunkBatch:
    """Streams of one chunk, ``[..., C, d]``; ``Q`` already carries the scale."""

    Q: np.ndarray
    K_eta: np.ndarray
    P: np.ndarray
    V: np.ndarray
    coeffs: ChunkCoeffs

    @classmethod
    def from_tokens(cls, q, k, v, log_alpha, log_mu, beta, eta, scale=1.0, p=None,
                    chunk_index=0, **coeff_kw) -> "ChunkBatch":
        q, k, v = (np.asarray(x) for x in (q, k, v))
        eta = np.asarray(eta)
        if p is None:
            p = np.exp(log_alpha)[..., None] * k
        coeffs = chunk_coefficients(log_alpha, log_mu, beta, chunk_index, **coeff_kw)
        return cls(Q=scale * q, K_eta=eta[..., None] * k, P=np.asarray(p), V=v, coeffs=coeffs)


@dataclass
class UTFactors:
    T: np.ndarray   # [..., C, C] unit lower triangular
    U: np.ndarray   # [..., C, d_v]
    Y: np.ndarray   # [..., C, d_k]
    Z: np.ndarray   # [..., C, d_k]


def ut_transform(batch: ChunkBatch) -> UTFactors:
    c = batch.coeffs
    A = np.matmul(batch.P, np.swapaxes(batch.K_eta, -1, -2)) * c.Gamma_strict
    C = A.shape[-1]
    T = unit_lower_tri_inverse(A + np.eye(C, dtype=A.dtype))
    U = np.matmul(T, batch.V)
    Y = np.matmul(T, np.exp(c.log_abar_prev)[..., None] * batch.P)
    Z = np.matmul(T, c.b_prev[..., None] * batch.P)
    return UTFactors(T=T, U=U, Y=Y, Z=Z)


def correction_values(f: UTFactors, state: DualState) -> np.ndarray:
    if f.Y.shape[-1] != state.S.shape[-2] or f.U.shape[-1] != state.S.shape[-1]:
        raise ValueError(f"factor dims {f.Y.shape}, {f.U.shape} do not fit state {state.S.shape}")
    return f.U - np.matmul(f.Y, state.S) + np.matmul(f.Z, state.M)


def chunk_forward(batch: ChunkBatch, state: DualState, factors: UTFactors | None = None):
    """Outputs, exit state and corrected values for one chunk.

    Returns ``(O_chunk, new_state, V_tilde)``.
    """
    if batch.Q.shape[-1] != state.S.shape[-2]:
        raise ValueError(f"d_k mismatch: chunk {batch.Q.shape[-1]} vs state {state.S.shape[-2]}")
    f = ut_transform(batch) if factors is None else factors
    c = batch.coeffs
    S, M = state.S, state.M
    Q, K = batch.Q, batch.K_eta
    v_tilde = correction_values(f, state)

    o_inter = np.exp(c.log_abar)[..., None] * np.matmul(Q, S) - c.b[..., None] * np.matmul(Q, M)
    attn = np.matmul(Q, np.swapaxes(K, -1, -2)) * c.Gamma
    o = o_inter + np.matmul(attn, v_tilde)

    mbar_C = c.log_mbar[..., -1:]
    decay_m = np.exp(mbar_C - c.log_mbar)[..., None] * K
    M_new = np.exp(mbar_C)[..., None] * M - np.matmul(np.swapaxes(decay_m, -1, -2), v_tilde)
    decay_s = c.Gamma[..., -1, :][..., None] * K
    S_new = (np.exp(c.log_abar[..., -1:])[..., None] * S
             - c.b[..., -1:, None] * M
             + np.matmul(np.swapaxes(decay_s, -1, -2), v_tilde))
    return o, DualState(S_new, M_new), v_tilde


def check_chunk_size(C: int) -> int:
    if int(C) != C or C not in CHUNK_SIZES:
        raise ValueError(f"chunk size must be one of {CHUNK_SIZES}, got {C}")
    return int(C)


def _pad_time(x, pad, value=0.0):
    if pad == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[1] = (0, pad)
    return np.pad(x, width, constant_values=value)


def _chunk_lanes(C, eps, gamma_mode, keep_vtilde, q, k, v, p, la, lm, beta, eta, S, M):
    N, L, dk = k.shape
    dv = v.shape[-1]
    n = L // C
    split = lambda x: x.reshape(N, n, C, *x.shape[2:])
    batch = ChunkBatch.from_tokens(split(q), split(k), split(v), split(la), split(lm),
                                   split(beta), split(eta), scale=1.0, p=split(p),
                                   eps=eps, gamma_mode=gamma_mode)
    # The UT factors do not depend on the carried state: form them for all chunks at once.
    f = ut_transform(batch)
    o = np.empty((N, n, C, dv), dtype=v.dtype)
    vt = np.empty((N, n, C, dv), dtype=v.dtype) if keep_vtilde else None
    state = DualState(S, M)
    c = batch.coeffs
    for i in range(n):
        sub = lambda x: x[:, i]
        cb = ChunkBatch(sub(batch.Q), sub(batch.K_eta), sub(batch.P), sub(batch.V),
                        ChunkCoeffs(*(sub(getattr(c, name)) for name in c.__dataclass_fields__)))
        fi = UTFactors(sub(f.T), sub(f.U), sub(f.Y), sub(f.Z))
        o[:, i], state, v_i = chunk_forward(cb, state, fi)
        if keep_vtilde:
            vt[:, i] = v_i
    out = (o.reshape(N, L, dv), state.S, state.M)
    return out + (vt.reshape(N, L, dv),) if keep_vtilde else out


def mdn_chunkwise_forward(inputs: AttnInputs, C: int = DEFAULT_CHUNK, init: DualState | None = None,
                          *, workers: int = 1, eps: float = 0.0, gamma_mode: str = "scan",
                          return_vtilde: bool = False):
    """Chunkwise forward over ``[B, T, H, d]`` inputs.

    ``T`` is zero-padded up to a multiple of ``C``. Padded steps carry zero
    q/k/v, ``alpha = mu = 1``, ``beta = 0`` and ``eta = 1``, which leaves
    ``(S, M)`` untouched, so the returned final state is the state after
    token ``T``. Returns ``(O, finals)`` and, when requested, the corrected
    values ``V~`` shaped like ``v``.
    """
    C = check_chunk_size(C)
    inputs.check_finite()
    g = inputs.gates
    if not np.all(np.isfinite(g.log_mu)):
        raise ValueError("chunkwise kernel requires mu > 0 (finite log_mu); use the recurrent kernel for mu = 0")
    if not np.all(np.isfinite(g.log_alpha)):
        raise ValueError("chunkwise kernel requires alpha > 0 (finite log_alpha)")
    B, T, H, dk, dv = inputs.dims
    dt = inputs.dtype
    g = g.astype(dt)
    pad = (-T) % C
    streams = [
        _pad_time(inputs.q * dt.type(inputs.resolved_scale), pad),
        _pad_time(inputs.k, pad), _pad_time(inputs.v, pad), _pad_time(inputs.resolved_p(), pad),
        _pad_time(g.log_alpha, pad), _pad_time(g.log_mu, pad),
        _pad_time(g.beta, pad), _pad_time(g.eta, pad, 1.0),
    ]
    lanes = [to_lanes(x) for x in streams]
    S0, M0 = _init_lanes(init, B, H, dk, dv, dt)

    def run(*a):
        return _chunk_lanes(C, eps, gamma_mode, return_vtilde, *a)

    res = map_lanes(run, lanes + [S0, M0], workers)
    o = from_lanes(res[0], B, H)[:, :T]
    finals = DualState(res[1].reshape(B, H, dk, dv), res[2].reshape(B, H, dk, dv))
    if return_vtilde:
        return o, finals, from_lanes(res[3], B, H)[:, :T]
    return o, finals
