"""Oracle-equivalence and invariant suite behind ``mdn verify``.

Each check yields one row: a name, the measured max relative error and the
tolerance it is held to. ``run_suite`` never raises on a numerical mismatch;
the caller decides what a failing row means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reference
from .adjoint import gradient_check
from .chunkwise import mdn_chunkwise_forward
from .coefficients import chunk_coefficients, naive_coefficients
from .recurrent import AttnInputs, DualState, mdn_recurrent_forward, mdn_step
from .sampling import override_gates, random_gates, random_inputs
from .spectral import closed_form_spectrum, stability_condition, transition_matrix
from .tensor import as_dtype, max_rel_err, unit_lower_tri_inverse, unit_lower_tri_inverse_iterative

KERNELS = ("chunkwise", "recurrent")
DEFAULT_TOL = {"float64": 1e-10, "float32": 3e-3}
REDUCTION_TOL = 1e-12

# (B, T, H, dk, dv) x C; T values off a multiple of C exercise padding
EQUIV_SHAPES = [(1, 16, 1, 4, 4), (2, 33, 2, 8, 8), (1, 64, 1, 16, 8),
                (2, 100, 3, 8, 16), (1, 128, 2, 32, 32)]
EQUIV_CHUNKS = (1, 16, 32, 64)


class UsageError(ValueError):
    """Flag combination the suite refuses to run."""


@dataclass
class Check:
    name: str
    err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.err) and self.err <= self.tol)


def _stepwise(inputs: AttnInputs, init: DualState | None = None):
    """Token-by-token loop over :func:`mdn_step`; an independent path to the lane scan."""
    B, T, H, dk, dv = inputs.dims
    g = inputs.gates
    state = init or DualState.zeros(B, H, dk, dv, dtype=inputs.dtype)
    out = np.empty((B, T, H, dv), dtype=inputs.dtype)
    p = inputs.resolved_p()
    for t in range(T):
        state, out[:, t] = mdn_step(state, inputs.q[:, t], inputs.k[:, t], inputs.v[:, t],
                                    g.alpha[:, t], g.beta[:, t], g.mu[:, t], g.eta[:, t],
                                    inputs.resolved_scale, p[:, t])
    return out, state


def equivalence_checks(rng, dtype, tol, kernel="chunkwise", mu=None, workers=1):
    checks = []
    for shape in EQUIV_SHAPES:
        for C in EQUIV_CHUNKS:
            B, T, H, dk, dv = shape
            x = random_inputs(rng, B, T, H, dk, dv, dtype=np.float64)
            if mu is not None:
                x = AttnInputs(x.q, x.k, x.v, override_gates(x.gates, mu=mu), x.scale)
            init = DualState(0.1 * rng.standard_normal((B, H, dk, dv)),
                             0.1 * rng.standard_normal((B, H, dk, dv)))
            ref_o, ref_f = mdn_recurrent_forward(x, init)
            xd, initd = x.astype(dtype), init.astype(dtype)
            if kernel == "chunkwise":
                o, f = mdn_chunkwise_forward(xd, C, initd, workers=workers)
                label = f"chunkwise C={C}"
            else:
                o, f = _stepwise(xd, initd) if C == EQUIV_CHUNKS[0] else mdn_recurrent_forward(
                    xd, initd, workers=workers)
                label = "stepwise" if C == EQUIV_CHUNKS[0] else f"recurrent/{C}"
            err = max(max_rel_err(o, ref_o), max_rel_err(f.S, ref_f.S), max_rel_err(f.M, ref_f.M))
            checks.append(Check(f"equiv {label} B={B} T={T} H={H} dk={dk} dv={dv}", err, tol))
    return checks


def reduction_checks(rng, n=3, tol=REDUCTION_TOL):
    checks = []
    for i in range(n):
        B, T, H, d = 2, 24, 2, 8
        x = random_inputs(rng, B, T, H, d)
        g = x.gates
        gdn = override_gates(g, mu=0.0, eta=1.0)
        o, _ = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, gdn))
        ref, _ = reference.gated_deltanet(x.q, x.k, x.v, gdn.alpha, gdn.beta, x.resolved_scale)
        checks.append(Check(f"reduction gated-deltanet #{i}", max_rel_err(o, ref), tol))

        dn = override_gates(g, alpha=1.0, mu=0.0, eta=1.0)
        o, _ = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, dn))
        ref, _ = reference.deltanet(x.q, x.k, x.v, dn.beta, x.resolved_scale)
        checks.append(Check(f"reduction deltanet #{i}", max_rel_err(o, ref), tol))

        o, _ = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, gdn, p=np.zeros_like(x.k)))
        ref, _ = reference.decay_rule(x.q, x.k, x.v, gdn.alpha, gdn.beta, x.resolved_scale)
        checks.append(Check(f"reduction decay #{i}", max_rel_err(o, ref), tol))
    return checks


def coefficient_checks(rng, n=4, C=32, tol=1e-10):
    checks = []
    for i in range(n):
        g = random_gates(rng, (8, C), spread=1.5)
        got = chunk_coefficients(g.log_alpha, g.log_mu, g.beta)
        ref = naive_coefficients(g.alpha, g.mu, g.beta)
        err = max(max_rel_err(got.Gamma, ref.Gamma), max_rel_err(got.b, ref.b),
                  max_rel_err(got.log_abar, ref.log_abar))
        checks.append(Check(f"coefficients C={C} #{i}", err, tol))
    A = np.tril(rng.standard_normal((4, 16, 16)), -1) * 0.3 + np.eye(16)
    err = max_rel_err(unit_lower_tri_inverse_iterative(A), unit_lower_tri_inverse(A))
    checks.append(Check("unit lower inverse (iterative vs substitution)", err, tol))
    return checks


def spectral_checks(rng, n=50, tol=1e-8):
    worst_det, disagree = 0.0, 0
    for _ in range(n):
        d = int(rng.choice([1, 2, 4, 8]))
        a, m = rng.uniform(0, 1, 2)
        b, e = rng.uniform(0, 1), rng.uniform(0, 2)
        k = rng.standard_normal(d)
        k /= np.linalg.norm(k)
        rep = closed_form_spectrum(a, b, m, e, 1.0, d)
        A = transition_matrix(a, b, m, e, k)
        scale = 1 + np.linalg.norm(A, 2)
        for lam in rep.eigenvalues():
            smin = np.linalg.svd(A - lam * np.eye(2 * d), compute_uv=False)[-1]
            worst_det = max(worst_det, smin / scale)
        numeric = np.max(np.abs(np.linalg.eigvals(A))) <= 1 + 1e-9
        disagree += int(numeric != stability_condition(a, b, m, e, 1.0, d))
    return [Check("spectral closed form (scaled singular residual)", worst_det, tol),
            Check("stability condition vs eigvals (disagreements)", float(disagree), 0.0)]


def gradient_checks(rng, n=2, tol=1e-5):
    checks = []
    for i in range(n):
        x = random_inputs(rng, 1, 8, 1, 4)
        init = DualState(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 4, 4)))
        errs = gradient_check(x, rng.standard_normal((1, 8, 1, 4)), init)
        checks.append(Check(f"adjoint vs finite differences #{i}", max(errs.values()), tol))
    return checks


def run_suite(*, seed: int = 0, dtype="f64", tol: float | None = None, kernel: str = "chunkwise",
              mu: float | None = None, workers: int = 1) -> list[Check]:
    if kernel not in KERNELS:
        raise UsageError(f"kernel must be one of {KERNELS}")
    if mu is not None:
        if not 0 <= mu <= 1:
            raise UsageError("mu must lie in [0, 1]")
        if mu == 0 and kernel == "chunkwise":
            raise UsageError("mu = 0 is only supported by the recurrent kernel "
                             "(the chunkwise coefficients divide by cumulative mu)")
    dt = as_dtype(dtype)
    eq_tol = DEFAULT_TOL[dt.name] if tol is None else tol
    rng = np.random.default_rng(seed)
    checks = equivalence_checks(rng, dt, eq_tol, kernel, mu, workers)
    checks += reduction_checks(rng, tol=REDUCTION_TOL if tol is None else tol)
    checks += coefficient_checks(rng, tol=1e-10 if tol is None else tol)
    checks += spectral_checks(rng)
    checks += gradient_checks(rng)
    return checks


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'case':<{width}}  {'max_rel_err':>12}  {'tol':>9}  result"]
    for c in checks:
        lines.append(f"{c.name:<{width}}  {c.err:>12.3e}  {c.tol:>9.1e}  {'PASS' if c.passed else 'FAIL'}")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} passed")
    return "\n".join(lines)
