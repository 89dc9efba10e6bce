import pytest

from mdn.verify import UsageError, format_table, run_suite


def test_default_suite_passes():
    checks = run_suite()
    assert all(c.passed for c in checks), format_table(checks)
    assert sum(c.name.startswith("equiv") for c in checks) >= 20
    assert "passed" in format_table(checks).splitlines()[-1]


def test_tight_f32_tolerance_fails():
    checks = run_suite(dtype="f32", tol=1e-12)
    assert any(not c.passed for c in checks)


def test_recurrent_kernel_accepts_mu_zero():
    checks = run_suite(kernel="recurrent", mu=0.0)
    assert all(c.passed for c in checks)


@pytest.mark.parametrize("kw", [dict(mu=0.0), dict(kernel="fft"), dict(mu=1.5)])
def test_refusals(kw):
    with pytest.raises(UsageError):
        run_suite(**kw)
