"""The momentum rule reduces to the classic first-order recurrences."""
import numpy as np
import pytest

from mdn import reference
from mdn.recurrent import AttnInputs, mdn_recurrent_forward
from mdn.sampling import override_gates, random_inputs


@pytest.fixture
def x(rng):
    return random_inputs(rng, 1, 32, 1, 8)


def test_mu_zero_is_gated_deltanet(x):
    g = override_gates(x.gates, mu=0.0, eta=1.0)
    o, fin = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, g))
    ref, ref_fin = reference.gated_deltanet(x.q, x.k, x.v, g.alpha, g.beta, x.resolved_scale)
    np.testing.assert_allclose(o, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(fin.S, ref_fin, rtol=1e-12, atol=1e-14)


def test_alpha_one_is_deltanet(x):
    g = override_gates(x.gates, alpha=1.0, mu=0.0, eta=1.0)
    o, _ = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, g))
    ref, _ = reference.deltanet(x.q, x.k, x.v, g.beta, x.resolved_scale)
    np.testing.assert_allclose(o, ref, rtol=1e-12, atol=1e-14)


def test_p_zero_is_decay_rule(x):
    g = override_gates(x.gates, mu=0.0, eta=1.0)
    o, _ = mdn_recurrent_forward(AttnInputs(x.q, x.k, x.v, g, p=np.zeros_like(x.k)))
    ref, _ = reference.decay_rule(x.q, x.k, x.v, g.alpha, g.beta, x.resolved_scale)
    np.testing.assert_allclose(o, ref, rtol=1e-12, atol=1e-14)


def test_momentum_differs_from_gdn(x):
    o, _ = mdn_recurrent_forward(x)
    g = override_gates(x.gates, mu=0.0, eta=1.0)
    ref, _ = reference.gated_deltanet(x.q, x.k, x.v, g.alpha, g.beta, x.resolved_scale)
    assert np.max(np.abs(o - ref)) > 1e-3
