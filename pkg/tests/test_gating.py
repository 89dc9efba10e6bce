import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdn.gating import GateConfig, GateSeq, compute_gates, compute_gates_vjp
from mdn.adjoint import finite_diff_grad


def test_neutral_point():
    g = compute_gates(0.0, 0.0, 0.0, 0.0, GateConfig())
    assert float(g.eta) == 1.0
    assert float(g.log_alpha) == pytest.approx(-2 * math.log(2), abs=1e-15)
    assert float(g.alpha) == pytest.approx(0.25)
    assert float(g.beta) == pytest.approx(0.25)
    assert float(g.log_mu) == pytest.approx(-math.log(2), abs=1e-15)


def test_mu_clamp_binds():
    g = compute_gates(0.0, 0.0, np.inf, 0.0)
    assert float(g.log_mu) == -2.0
    g = compute_gates(0.0, 0.0, 1e6, 0.0, GateConfig(mu_min_log=-1.0))
    assert float(g.log_mu) == -1.0


@settings(max_examples=200, deadline=None)
@given(*(st.floats(-30, 30) for _ in range(4)), st.floats(0.1, 5), st.floats(1, 10))
def test_quadrant_and_ranges(pa, pb, pm, pe, s, tau):
    cfg = GateConfig(s=s, tau=tau)
    g = compute_gates(pa, pb, pm, pe, cfg)
    a, b, m, e = float(g.alpha), float(g.beta), float(g.mu), float(g.eta)
    assert 0 <= a < 1 and 0 <= b and b <= 1 - a + 1e-15
    assert math.exp(-2) - 1e-15 <= m < 1
    assert 0 <= e <= 2


@pytest.mark.parametrize("kw", [dict(a=0), dict(s=-1), dict(tau=0.5), dict(mu_min_log=0.1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        GateConfig(**kw)


def test_config_json_roundtrip():
    cfg = GateConfig(a=2.0, tau=3.0)
    assert GateConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        GateConfig.from_json(json.dumps({"zeta": 1}))


def test_for_model_temperature():
    assert GateConfig.for_model(128, 2).tau == pytest.approx(8.0)
    assert GateConfig.for_model(128, 2, tau=2.0).tau == 2.0


def test_gateseq_shape_mismatch():
    with pytest.raises(ValueError):
        GateSeq(np.zeros(3), np.zeros(3), np.zeros(2), np.zeros(3))


def test_constant_gates():
    g = GateSeq.constant((2, 3), alpha=0.5, mu=0.0)
    assert g.shape == (2, 3)
    np.testing.assert_allclose(g.alpha, 0.5)
    assert np.all(g.log_mu == -np.inf)


def test_vjp_matches_finite_differences(rng):
    cfg = GateConfig(a=1.5, b=0.3, s=0.8, tau=2.0)
    pre = rng.normal(size=(4, 7))
    pre[2, :3] = 5.0   # clamp binds on a few mu entries
    w = rng.normal(size=(4, 7))

    def f(x):
        g = compute_gates(*x.reshape(4, 7), cfg)
        return float((w[0] * g.log_alpha + w[1] * g.beta + w[2] * g.log_mu + w[3] * g.eta).sum())

    fd = finite_diff_grad(f, pre.ravel(), 1e-6).reshape(4, 7)
    ad = np.stack(compute_gates_vjp(*pre, cfg, w[0], w[1], w[2], w[3]))
    np.testing.assert_allclose(ad, fd, atol=1e-7)
