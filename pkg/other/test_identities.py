import numpy as np
import pytest

from identities import (
    CheckResult, central_difference, check_log_divergence, check_pushthrough, check_rescaled_vanish,
    log_divergence_gap, relative_error, run_all_checks,
)


def test_relative_error():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [-1.0]) == pytest.approx(1.0)


def test_central_difference_of_cubic():
    assert central_difference(lambda t: (1.0 + t) ** 3) == pytest.approx(3.0, rel=1e-8)


def test_log_divergence_two_atoms():
    # E[-log 4nu] = -log 0.64, both divergences equal 0.5 log(0.25 / 0.16)
    assert log_divergence_gap(np.array([0.5, 0.5]), np.array([0.2, 0.8])) == pytest.approx(0.0, abs=1e-12)
    assert log_divergence_gap(np.array([0.5, 0.5]), np.array([0.5, 0.5])) == pytest.approx(0.0, abs=1e-12)


def test_log_divergence_suite():
    result = check_log_divergence(instances=20, seed=3)
    assert result.passed, result.detail


def test_rescaled_scores_vanish_at_gamma_zero():
    assert check_rescaled_vanish(n=50).passed


def test_pushthrough_holds_only_for_oracle():
    result = check_pushthrough(n=40, queries=30, seed=2)
    assert result.passed, result.detail


def test_run_all_checks_reports_every_suite():
    results = run_all_checks(seed=0, draws=2000)
    assert len(results) == 9
    assert all(isinstance(r, CheckResult) and r.detail for r in results)
    assert len({r.name for r in results}) == 9
