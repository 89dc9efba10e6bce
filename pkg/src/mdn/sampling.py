"""Seeded random problem instances for verification, benchmarks and tests."""
from __future__ import annotations

import numpy as np

from .gating import GateConfig, GateSeq, compute_gates
from .recurrent import AttnInputs, l2_normalize


def random_gates(rng: np.random.Generator, shape, cfg: GateConfig | None = None,
                 spread: float = 1.0) -> GateSeq:
    """Quadrant-constrained gates from Gaussian pre-activations."""
    pre = [spread * rng.standard_normal(shape) for _ in range(4)]
    return compute_gates(*pre, cfg or GateConfig())


def random_inputs(rng: np.random.Generator, B=1, T=32, H=1, dk=8, dv=None, *,
                  dtype=np.float64, gates: GateSeq | None = None, cfg: GateConfig | None = None,
                  normalize_keys: bool = True, scale=None) -> AttnInputs:
    dv = dk if dv is None else dv
    q = rng.standard_normal((B, T, H, dk))
    k = rng.standard_normal((B, T, H, dk))
    v = rng.standard_normal((B, T, H, dv))
    if normalize_keys:
        k = l2_normalize(k)
    if gates is None:
        gates = random_gates(rng, (B, T, H), cfg)
    return AttnInputs(q.astype(dtype), k.astype(dtype), v.astype(dtype), gates.astype(dtype), scale)


def override_gates(gates: GateSeq, alpha=None, beta=None, mu=None, eta=None) -> GateSeq:
    """Replace selected gates by constants (``None`` keeps the sampled values)."""
    shape, dt = gates.shape, gates.beta.dtype
    with np.errstate(divide="ignore"):
        la = gates.log_alpha if alpha is None else np.full(shape, np.log(alpha), dt)
        lm = gates.log_mu if mu is None else np.full(shape, np.log(mu), dt)
    b = gates.beta if beta is None else np.full(shape, beta, dt)
    e = gates.eta if eta is None else np.full(shape, eta, dt)
    return GateSeq(la, lm, b, e)
