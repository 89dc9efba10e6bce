"""Frozen-coefficient spectral analysis of the (S, M) recurrence.

For one token the state pair evolves as ``(S_t; M_t) = A (S_{t-1}; M_{t-1}) + forcing``
with

    A = [[alpha I - alpha beta eta k k^T,  -beta mu I],
         [alpha eta k k^T,                  mu I     ]]

whose spectrum is alpha and mu (each ``d - 1`` times) plus the roots of
``lambda^2 - p lambda + alpha mu`` with ``p = alpha + mu - alpha beta eta |k|^2``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

DISC_TIE = 1e-14
CSV_HEADER = ("alpha", "beta", "mu", "eta", "re_lp", "im_lp", "re_lm", "im_lm", "stable", "rhp")


@dataclass
class SpectralReport:
    lambda_plus: complex
    lambda_minus: complex
    bulk_alpha: float
    bulk_mu: float
    d: int
    spectral_radius: float
    stable: bool
    right_half_plane: bool

    @property
    def multiplicity(self) -> int:
        return self.d - 1

    def eigenvalues(self) -> list[complex]:
        """All ``2d`` eigenvalues, with multiplicity."""
        bulk = [complex(self.bulk_alpha)] * self.multiplicity + [complex(self.bulk_mu)] * self.multiplicity
        return bulk + [self.lambda_plus, self.lambda_minus]


def transition_matrix(alpha, beta, mu, eta, k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    d = k.size
    if d < 1:
        raise ValueError("key dimension must be >= 1")
    I = np.eye(d)
    kk = np.outer(k, k)
    top = np.hstack([alpha * I - alpha * beta * eta * kk, -beta * mu * I])
    bottom = np.hstack([alpha * eta * kk, mu * I])
    return np.vstack([top, bottom])


def quadratic_roots(alpha, beta, mu, eta, knorm2=1.0):
    """Vectorized ``(lambda_plus, lambda_minus)`` as complex arrays."""
    alpha, beta, mu, eta, knorm2 = np.broadcast_arrays(
        *(np.asarray(x, dtype=np.float64) for x in (alpha, beta, mu, eta, knorm2)))
    p = alpha + mu - alpha * beta * eta * knorm2
    disc = p * p - 4 * alpha * mu
    disc = np.where(np.abs(disc) <= DISC_TIE, 0.0, disc)
    root = np.sqrt(disc.astype(np.complex128))
    return (p + root) / 2, (p - root) / 2


def stability_condition(alpha, beta, mu, eta, knorm2=1.0, d: int | None = None):
    """True iff every eigenvalue of the frozen transition lies in the closed unit disk.

    ``|alpha| <= 1``, ``|mu| <= 1`` and
    ``-(1 - alpha)(1 - mu) <= alpha beta eta |k|^2 <= (1 + alpha)(1 + mu)``.
    With ``d=1`` there are no bulk eigenvalues and the first two conditions
    weaken to ``|alpha mu| <= 1`` (the Jury test on the quadratic alone).
    Vectorized; returns a Python bool for scalar input.
    """
    alpha, beta, mu, eta, knorm2 = (np.asarray(x, dtype=np.float64) for x in (alpha, beta, mu, eta, knorm2))
    x = alpha * beta * eta * knorm2
    if d == 1:
        bulk = np.abs(alpha * mu) <= 1
    else:
        bulk = (np.abs(alpha) <= 1) & (np.abs(mu) <= 1)
    ok = bulk & (-(1 - alpha) * (1 - mu) <= x) & (x <= (1 + alpha) * (1 + mu))
    return bool(ok) if ok.ndim == 0 else ok


def right_half_plane(lp, lm, alpha, mu):
    return (np.real(lp) >= 0) & (np.real(lm) >= 0) & (np.asarray(alpha) >= 0) & (np.asarray(mu) >= 0)


def closed_form_spectrum(alpha, beta, mu, eta, knorm2=1.0, d: int = 1) -> SpectralReport:
    if knorm2 < 0:
        raise ValueError("knorm2 must be non-negative")
    if d < 1:
        raise ValueError("d must be >= 1")
    lp, lm = (complex(z) for z in quadratic_roots(alpha, beta, mu, eta, knorm2))
    mags = [abs(lp), abs(lm)]
    if d > 1:
        mags += [abs(alpha), abs(mu)]
    return SpectralReport(
        lambda_plus=lp, lambda_minus=lm, bulk_alpha=float(alpha), bulk_mu=float(mu), d=d,
        spectral_radius=max(mags),
        stable=stability_condition(alpha, beta, mu, eta, knorm2, d),
        right_half_plane=bool(right_half_plane(lp, lm, alpha, mu)),
    )


def parse_axis(spec: str) -> np.ndarray:
    """``"lo:hi:n"`` -> ``linspace(lo, hi, n)``; a bare number is a single point."""
    parts = spec.split(":")
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) != 3:
        raise ValueError(f"axis spec must be 'lo:hi:n' or a number, got {spec!r}")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1:
        raise ValueError("axis needs at least one point")
    return np.linspace(lo, hi, n)


def spectrum_sweep(alphas, betas, mus, etas, *, constrained: bool = False, knorm2: float = 1.0) -> np.ndarray:
    """Evaluate the root pair over a parameter grid.

    Returns a float array with one row per grid point in :data:`CSV_HEADER`
    column order. ``constrained=True`` keeps only points with
    ``beta <= 1 - alpha`` and ``mu`` in ``[e^-1, 1)``.
    """
    grid = np.stack(np.meshgrid(alphas, betas, mus, etas, indexing="ij"), -1).reshape(-1, 4)
    if constrained:
        a, b, m = grid[:, 0], grid[:, 1], grid[:, 2]
        keep = (b <= 1 - a) & (m >= math.exp(-1)) & (m < 1)
        grid = grid[keep]
    if grid.shape[0] == 0:
        raise ValueError("empty sweep grid")
    a, b, m, e = grid.T
    lp, lm = quadratic_roots(a, b, m, e, knorm2)
    stable = stability_condition(a, b, m, e, knorm2)
    rhp = right_half_plane(lp, lm, a, m)
    return np.column_stack([a, b, m, e, lp.real, lp.imag, lm.real, lm.imag,
                            stable.astype(float), rhp.astype(float)])


def sweep_to_csv(rows: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([repr(float(x)) for x in r[:8]] + [int(r[8]), int(r[9])])
    return buf.getvalue()
