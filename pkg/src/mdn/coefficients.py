"""Decoupled per-chunk coefficients of the momentum delta rule.

Within a chunk of length C (1-based positions t, i):

    mbar_t = prod_{j<=t} mu_j        abar_t = prod_{j<=t} alpha_j
    c_t    = sum_{i<=t} beta_i mbar_i / abar_i
    b_t    = abar_t c_t
    gamma_{t,i} = abar_t / mbar_i * (c_t - c_{i-1})      for i <= t

Everything is formed in the log domain so that long runs of small gates do
not overflow the ``mbar / abar`` ratios.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import cumsum, log_cumsum_exp_tril

GAMMA_MODES = ("scan", "difference")


@dataclass
class ChunkCoeffs:
    """Coefficient vectors ``[..., C]`` and masks ``[..., C, C]`` for one chunk."""

    log_abar: np.ndarray
    log_mbar: np.ndarray
    log_c: np.ndarray
    b: np.ndarray
    Gamma: np.ndarray
    Gamma_strict: np.ndarray
    b_prev: np.ndarray
    log_abar_prev: np.ndarray

    @property
    def C(self) -> int:
        return self.log_c.shape[-1]


def _shift_right(x: np.ndarray, fill) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0] = fill
    out[..., 1:] = x[..., :-1]
    return out


def _gamma_difference(log_abar, log_mbar, log_c):
    """``exp(A~) * (1 - exp(S))`` with ``S_ij = log c_{j-1} - log c_i``.

    Loses all precision when ``c_{j-1}`` is close to ``c_i`` relative to the
    ``mbar`` growth, which happens whenever ``mu/alpha`` shrinks inside the
    chunk. Kept for comparison with :func:`_gamma_scan`.
    """
    C = log_c.shape[-1]
    tril = np.tri(C, dtype=bool)
    log_c_prev = _shift_right(log_c, -np.inf)
    row = (log_abar + log_c)[..., :, None]
    finite_row = np.isfinite(log_c)[..., :, None]
    with np.errstate(invalid="ignore"):
        a_log = np.where(tril, row - log_mbar[..., None, :], -np.inf)
        s = np.where(tril & finite_row, log_c_prev[..., None, :] - log_c[..., :, None], -np.inf)
        gamma = np.exp(a_log) * (1 - np.exp(s))
    return np.where(tril & finite_row, gamma, 0).astype(log_c.dtype)


def _gamma_scan(log_abar, log_mbar, log_w):
    """Column-wise log-domain partial sums, no subtraction.

    ``D[j, i] = log sum_{k=j}^{i} w_k`` is a log-cumsum-exp along ``i`` that
    starts at column ``j``; then ``gamma_{i,j} = exp(log abar_i - log mbar_j + D[j, i])``.
    """
    C = log_w.shape[-1]
    upper = np.tri(C, dtype=bool).T       # [j, k]: k >= j
    L = np.where(upper, log_w[..., None, :], -np.inf)
    D = np.logaddexp.accumulate(L, axis=-1)          # [..., j, i]
    D = np.swapaxes(D, -1, -2)                        # [..., i, j]
    tril = np.tri(C, dtype=bool)
    expo = np.where(tril, log_abar[..., :, None] - log_mbar[..., None, :] + D, -np.inf)
    return np.exp(expo)


def chunk_coefficients(log_alpha, log_mu, beta, chunk_index: int = 0, *,
                       eps: float = 0.0, gamma_mode: str = "scan") -> ChunkCoeffs:
    """Log-domain coefficients for one chunk (batched over leading axes).

    ``eps`` is added to ``beta`` before the log; 0 keeps the result exact and
    ``beta == 0`` maps to a ``-inf`` sentinel. ``gamma_mode`` picks how the
    pair sums ``c_t - c_{i-1}`` are formed (see the two ``_gamma_*`` helpers).
    """
    log_alpha, log_mu, beta = (np.asarray(x) for x in (log_alpha, log_mu, beta))
    if not (log_alpha.shape == log_mu.shape == beta.shape):
        raise ValueError(f"gate shapes differ: {log_alpha.shape}, {log_mu.shape}, {beta.shape}")
    if gamma_mode not in GAMMA_MODES:
        raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
    if np.any(~np.isfinite(beta)) or np.any(beta < 0) or np.any(beta > 1):
        raise ValueError("beta must lie in [0, 1]")
    if not (np.all(np.isfinite(log_alpha)) and np.all(np.isfinite(log_mu))):
        raise ValueError("log_alpha and log_mu must be finite (alpha, mu > 0); "
                         "mu = 0 needs the recurrent kernel")
    C = beta.shape[-1]

    log_abar = cumsum(log_alpha, axis=-1)
    log_mbar = cumsum(log_mu, axis=-1)
    with np.errstate(divide="ignore"):
        log_beta = np.log(beta + eps)
    log_w = log_beta + log_mbar - log_abar
    log_c = log_cumsum_exp_tril(log_w, chunk_index, C)

    if gamma_mode == "scan":
        Gamma = _gamma_scan(log_abar, log_mbar, log_w)
    else:
        Gamma = _gamma_difference(log_abar, log_mbar, log_c)

    b = np.exp(log_abar + log_c)
    Gamma_strict = np.zeros_like(Gamma)
    Gamma_strict[..., 1:, :] = Gamma[..., :-1, :]
    return ChunkCoeffs(
        log_abar=log_abar, log_mbar=log_mbar, log_c=log_c, b=b,
        Gamma=Gamma, Gamma_strict=Gamma_strict,
        b_prev=_shift_right(b, 0), log_abar_prev=_shift_right(log_abar, 0),
    )


def naive_coefficients(alpha, mu, beta) -> ChunkCoeffs:
    """Direct float64 products and sums; the test oracle for moderate gates.

    ``c_t - c_{i-1}`` is accumulated as the partial sum ``sum_{k=i}^{t}``
    rather than by subtraction, so the oracle carries no cancellation error.
    Raises ``FloatingPointError`` when a product over- or underflows.
    """
    alpha, mu, beta = (np.asarray(x, dtype=np.float64) for x in (alpha, mu, beta))
    C = beta.shape[-1]
    with np.errstate(over="raise", under="ignore", divide="raise", invalid="raise"):
        abar = np.cumprod(alpha, axis=-1)
        mbar = np.cumprod(mu, axis=-1)
        w = beta * mbar / abar
        c = np.cumsum(w, axis=-1)
        b = abar * c
        Gamma = np.zeros(beta.shape + (C,))
        for i in range(C):
            partial = np.cumsum(w[..., i:], axis=-1)
            Gamma[..., i:, i] = abar[..., i:] / mbar[..., i, None] * partial
        if np.any(abar == 0) or np.any(mbar == 0):
            raise FloatingPointError("cumulative product underflowed to zero")
    with np.errstate(divide="ignore"):
        log_c = np.log(c)
    Gamma_strict = np.zeros_like(Gamma)
    Gamma_strict[..., 1:, :] = Gamma[..., :-1, :]
    log_abar = np.log(abar)
    return ChunkCoeffs(
        log_abar=log_abar, log_mbar=np.log(mbar), log_c=log_c, b=b,
        Gamma=Gamma, Gamma_strict=Gamma_strict,
        b_prev=_shift_right(b, 0), log_abar_prev=_shift_right(log_abar, 0),
    )
