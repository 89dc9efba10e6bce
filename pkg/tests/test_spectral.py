import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdn.spectral import (CSV_HEADER, closed_form_spectrum, parse_axis, quadratic_roots,
                          spectrum_sweep, stability_condition, sweep_to_csv, transition_matrix)

unit = st.floats(0, 1)


def test_beta_zero_block_structure():
    k = np.array([0.6, 0.8])
    A = transition_matrix(0.7, 0.0, 0.4, 1.5, k)
    np.testing.assert_allclose(A[:2, :2], 0.7 * np.eye(2))
    np.testing.assert_array_equal(A[:2, 2:], 0)
    np.testing.assert_allclose(A[2:, :2], 0.7 * 1.5 * np.outer(k, k))
    np.testing.assert_allclose(A[2:, 2:], 0.4 * np.eye(2))


def test_d1_unit_gates_matrix():
    beta, eta = 0.5, 2.0
    np.testing.assert_allclose(transition_matrix(1.0, beta, 1.0, eta, [1.0]), [[0, -beta], [eta, 1]])


def test_beta_zero_roots():
    r = closed_form_spectrum(0.7, 0.0, 0.3, 1.0)
    assert sorted([r.lambda_plus.real, r.lambda_minus.real]) == pytest.approx([0.3, 0.7])


def test_complex_pair_on_unit_circle():
    r = closed_form_spectrum(1.0, 0.5, 1.0, 2.0)
    assert r.lambda_plus == pytest.approx(complex(0.5, math.sqrt(3) / 2))
    assert r.lambda_minus == pytest.approx(complex(0.5, -math.sqrt(3) / 2))
    assert abs(r.lambda_plus) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit, st.floats(0, 2), st.floats(0.1, 3))
def test_vieta(a, b, m, e, kn):
    lp, lm = quadratic_roots(a, b, m, e, kn)
    assert complex(lp * lm) == pytest.approx(a * m, abs=1e-9)
    assert complex(lp + lm) == pytest.approx(a + m - a * b * e * kn, abs=1e-9)


@pytest.mark.parametrize("d", [1, 2, 4, 8])
def test_determinant_residual(rng, d):
    for _ in range(25):
        a, b, m = rng.uniform(0, 1, 3)
        e = rng.uniform(0, 2)
        k = rng.normal(size=d)
        rep = closed_form_spectrum(a, b, m, e, float(k @ k), d)
        A = transition_matrix(a, b, m, e, k)
        eig = rep.eigenvalues()
        assert len(eig) == 2 * d and rep.multiplicity == d - 1
        for lam in eig:
            smin = np.linalg.svd(A - lam * np.eye(2 * d), compute_uv=False)[-1]
            assert smin <= 1e-8 * (1 + np.linalg.norm(A, 2))
        ref = np.sort_complex(np.linalg.eigvals(A))
        np.testing.assert_allclose(np.sort_complex(np.array(eig)), ref, atol=1e-6)


def test_stability_examples():
    assert stability_condition(1.0, 1.0, 1.0, 3.0) is True
    assert stability_condition(1.0, 1.0, 1.0, 5.0) is False


def test_stability_agrees_with_eigvals(rng):
    n = 3000
    a, b, m = rng.uniform(-1.2, 1.2, (3, n))
    e = rng.uniform(-3, 3, n)
    d = rng.choice([1, 2, 4], n)
    for i in range(n):
        k = rng.normal(size=d[i])
        A = transition_matrix(a[i], b[i], m[i], e[i], k)
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        if abs(rho - 1) > 1e-9:
            assert stability_condition(a[i], b[i], m[i], e[i], k @ k, d[i]) == (rho <= 1)


def test_d1_only_needs_product_bound():
    # alpha > 1 with a small mu: no bulk mode at alpha when d = 1
    a, b, m, e = 1.14, 0.74, -0.18, 1.91
    rho = np.max(np.abs(np.linalg.eigvals(transition_matrix(a, b, m, e, [1.0]))))
    assert rho < 1
    assert stability_condition(a, b, m, e, d=1) is True
    assert stability_condition(a, b, m, e) is False


def test_vectorized_stability():
    out = stability_condition(np.array([1.0, 1.0]), 1.0, 1.0, np.array([3.0, 5.0]))
    np.testing.assert_array_equal(out, [True, False])


def test_mu_zero_sweep_is_real():
    rows = spectrum_sweep(np.linspace(0, 1, 11), np.linspace(0, 1, 11), [0.0], [1.0])
    assert np.all(rows[:, 5] == 0) and np.all(rows[:, 7] == 0)
    np.testing.assert_allclose(rows[:, 4], rows[:, 0] * (1 - rows[:, 1]), atol=1e-15)


def test_constrained_sweep_right_half_plane():
    ax = np.linspace(0, 1, 41)
    rows = spectrum_sweep(ax, ax, ax, np.linspace(0, 2, 21), constrained=True)
    assert len(rows) > 0
    assert np.all(rows[:, 4] >= 0) and np.all(rows[:, 6] >= 0) and np.all(rows[:, 9] == 1)
    assert np.all(rows[:, 1] <= 1 - rows[:, 0]) and np.all(rows[:, 2] >= math.exp(-1))


def test_unconstrained_sweep_has_left_half_plane_root():
    rows = spectrum_sweep([0.9], [0.99], [0.05], [2.0])
    assert rows[0, 6] < 0
    ax = np.linspace(0, 1, 11)
    rows = spectrum_sweep(ax, ax, ax, np.linspace(0, 2, 5))
    assert np.any(rows[:, 6] < 0)


def test_csv_and_axes():
    text = sweep_to_csv(spectrum_sweep([0.5], [0.1, 0.2], [0.5], [1.0]))
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 3
    np.testing.assert_allclose(parse_axis("0:1:3"), [0, 0.5, 1])
    np.testing.assert_allclose(parse_axis("0.25"), [0.25])
    for bad in ("0:1", "0:1:0", "a:b:c"):
        with pytest.raises(ValueError):
            parse_axis(bad)
    with pytest.raises(ValueError):
        spectrum_sweep([0.9], [0.9], [0.9], [1.0], constrained=True)


def test_report_validation():
    with pytest.raises(ValueError):
        closed_form_spectrum(0.5, 0.5, 0.5, 1.0, knorm2=-1)
    with pytest.raises(ValueError):
        closed_form_spectrum(0.5, 0.5, 0.5, 1.0, d=0)
