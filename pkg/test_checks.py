import pytest

from checks import (
    SUITES, CheckResult, check_expected_min, check_losses, check_primitives, check_prop1, check_quantile,
    check_sphere, run_suite,
)


def test_math_suite_passes():
    results = run_suite("math")
    failed = [r.line() for r in results if not r.passed]
    assert not failed


def test_reduced_math_checks_pass():
    assert all(r.passed for r in check_sphere(dims=(2, 4), samples=200_000))
    assert all(r.passed for r in check_expected_min(sizes=(2, 10), draws=200_000))
    assert all(r.passed for r in check_prop1(instances=10))
    assert check_quantile(points=20).passed


def test_loss_gradients_pass():
    results = check_losses()
    assert len(results) == 8
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_primitive_gradients_pass_on_few_seeds():
    results = check_primitives(seeds=5)
    assert len(results) == 23
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_unknown_suite_is_rejected():
    assert SUITES == ("math", "gradients", "all")
    with pytest.raises(ValueError):
        run_suite("physics")


def test_result_line_format():
    assert CheckResult("x", 1e-3, 1e-2, True).line() == "✅ x: measured=1.000e-03 tol=1.0e-02"
    assert CheckResult("y", 0.5, 1e-6, False).line().startswith("❌ y:")
