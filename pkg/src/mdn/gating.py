"""Stability-aware gate parameterization.

Raw per-token, per-head pre-activations are mapped to gates whose frozen
transition matrix keeps its eigenvalues in the right half plane:

    eta   = tanh(pre_eta / tau) + 1                      in (0, 2)
    theta = arctan(eta * s)
    alpha_max, beta_max = cos(theta)**2, sin(theta)**2   (sum to one)
    log_alpha = f(pre_alpha) + log(alpha_max)
    beta      = sigmoid(pre_beta) * beta_max
    log_mu    = max(f(pre_mu), mu_min_log)

with ``f(x) = -a * softplus(x + b)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np


@dataclass(frozen=True)
class GateConfig:
    a: float = 1.0
    b: float = 0.0
    s: float = 1.0
    tau: float = 1.0
    mu_min_log: float = -2.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not self.tau >= 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.mu_min_log <= 0:
            raise ValueError(f"mu_min_log must be <= 0, got {self.mu_min_log}")

    @classmethod
    def for_model(cls, d_in: int, heads: int, **kw) -> "GateConfig":
        """Config with the temperature defaulted to ``sqrt(d_in / heads)``."""
        kw.setdefault("tau", max(1.0, math.sqrt(d_in / heads)))
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GateConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown GateConfig fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class GateSeq:
    """Gate tensors, each shaped ``[B, T, H]``."""

    log_alpha: np.ndarray
    log_mu: np.ndarray
    beta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.log_alpha, self.log_mu, self.beta, self.eta)}
        if len(shapes) != 1:
            raise ValueError(f"gate tensors disagree in shape: {sorted(shapes)}")

    @property
    def shape(self):
        return self.beta.shape

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu)

    def astype(self, dtype) -> "GateSeq":
        return GateSeq(*(np.asarray(x, dtype=dtype) for x in
                         (self.log_alpha, self.log_mu, self.beta, self.eta)))

    @classmethod
    def constant(cls, shape, alpha=1.0, beta=0.5, mu=0.5, eta=1.0, dtype=np.float64) -> "GateSeq":
        with np.errstate(divide="ignore"):
            la, lm = np.log(alpha), np.log(mu)
        return cls(np.full(shape, la, dtype), np.full(shape, lm, dtype),
                   np.full(shape, beta, dtype), np.full(shape, eta, dtype))


def softplus(x):
    return np.logaddexp(0, x)


def sigmoid(x):
    x = np.asarray(x)
    return np.exp(-np.logaddexp(0, -x))


def decay_fn(x, cfg: GateConfig):
    return -cfg.a * softplus(x + cfg.b)


def gate_bounds(eta, s: float):
    """``(alpha_max, beta_max)`` for a given eta."""
    theta = np.arctan(eta * s)
    return np.cos(theta) ** 2, np.sin(theta) ** 2


def compute_gates(pre_alpha, pre_beta, pre_mu, pre_eta, cfg: GateConfig | None = None) -> GateSeq:
    cfg = cfg or GateConfig()
    pre_alpha, pre_beta, pre_mu, pre_eta = np.broadcast_arrays(
        *(np.asarray(x) for x in (pre_alpha, pre_beta, pre_mu, pre_eta)))
    eta = np.tanh(pre_eta / cfg.tau) + 1
    alpha_max, beta_max = gate_bounds(eta, cfg.s)
    log_alpha = decay_fn(pre_alpha, cfg) + np.log(alpha_max)
    beta = sigmoid(pre_beta) * beta_max
    log_mu = np.maximum(decay_fn(pre_mu, cfg), cfg.mu_min_log)
    return GateSeq(log_alpha=log_alpha, log_mu=log_mu, beta=beta, eta=eta)


def compute_gates_vjp(pre_alpha, pre_beta, pre_mu, pre_eta, cfg: GateConfig,
                      d_log_alpha, d_beta, d_log_mu, d_eta):
    """Pull gate-level gradients back to the four pre-activation streams.

    Returns ``(d_pre_alpha, d_pre_beta, d_pre_mu, d_pre_eta)``. The clamp on
    ``log_mu`` passes no gradient where it binds.
    """
    t = np.tanh(pre_eta / cfg.tau)
    eta = t + 1
    r = (eta * cfg.s) ** 2
    # log(alpha_max) = -log(1 + r); beta_max = r / (1 + r)
    dlogamax_deta = -2 * eta * cfg.s ** 2 / (1 + r)
    dbmax_deta = 2 * eta * cfg.s ** 2 / (1 + r) ** 2
    sig_b = sigmoid(pre_beta)
    beta_max = r / (1 + r)

    d_pre_alpha = d_log_alpha * (-cfg.a * sigmoid(pre_alpha + cfg.b))
    d_pre_beta = d_beta * sig_b * (1 - sig_b) * beta_max
    fm = decay_fn(pre_mu, cfg)
    d_pre_mu = np.where(fm > cfg.mu_min_log, d_log_mu * (-cfg.a * sigmoid(pre_mu + cfg.b)), 0.0)
    d_eta_total = d_eta + d_log_alpha * dlogamax_deta + d_beta * sig_b * dbmax_deta
    d_pre_eta = d_eta_total * (1 - t * t) / cfg.tau
    return d_pre_alpha, d_pre_beta, d_pre_mu, d_pre_eta
