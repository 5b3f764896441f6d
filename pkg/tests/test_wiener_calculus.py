from __future__ import annotations

import math

import numpy as np
import pytest

from wienerlab.core.exceptions import GridMismatchError, ValidationError
from wienerlab.core.pathspace import Direction, make_grid, sample_ensemble
from wienerlab.core.utils import dyadic_schedule
from wienerlab.core.wiener_calculus import (
    CylindricalFunctional,
    GrowthTag,
    cameron_martin_gap,
    convergence_test,
    convergence_verdict,
    duality_residual,
    evaluate,
    fit_slope,
    gateaux_quotient,
    gradient_pairing,
    skorohod_product,
)

SCHEDULE = dyadic_schedule(3, 8)


@pytest.fixture
def large_ensemble(grid):
    return sample_ensemble(grid, d=1, n_paths=20_000, seed=17)


class TestCylindricalFunctional:
    def test_inconsistent_partial_is_rejected(self, grid):
        h = Direction.constant(grid)
        with pytest.raises(ValidationError):
            CylindricalFunctional((h,), np.sin, (np.sin,))

    def test_partial_count_must_match(self, grid):
        h = Direction.constant(grid)
        with pytest.raises(ValidationError):
            CylindricalFunctional((h, h), np.sin, (np.cos,))

    def test_directions_share_grid(self, grid):
        h1 = Direction.constant(grid)
        h2 = Direction.constant(make_grid(1.0, 8))
        with pytest.raises(GridMismatchError):
            CylindricalFunctional.product_sine(h1, h2)

    def test_evaluate_sine_of_terminal_value(self, ensemble, grid):
        F = CylindricalFunctional.sine(Direction.constant(grid))
        values = evaluate(F, ensemble)
        assert values.shape == (ensemble.n_paths,)
        expected = np.sin(ensemble.paths[:, -1, 0])
        assert np.allclose(values, expected, rtol=0, atol=1e-12)

    def test_growth_tags(self, grid):
        h = Direction.constant(grid)
        assert CylindricalFunctional.sine(h).growth_tag is GrowthTag.BOUNDED
        assert CylindricalFunctional.square(h).growth_tag is GrowthTag.POLYNOMIAL

    def test_gradient_pairing_of_product(self, ensemble, grid):
        h1 = Direction.constant(grid)
        h2 = Direction.indicator(grid, 0.0, 0.5)
        F = CylindricalFunctional.product_sine(h1, h2)
        x = ensemble.paths[:, -1, 0]
        y = ensemble.paths[:, 8, 0]
        expected = np.sin(y) * 1.0 + x * np.cos(y) * 0.5
        value = gradient_pairing(F, h1, ensemble).value
        assert np.allclose(value, expected, rtol=0, atol=1e-12)

    def test_skorohod_product_of_constant(self, ensemble, grid):
        """delta(1 * h) = W(h)."""
        h = Direction.ramp(grid, 1.0)
        one = CylindricalFunctional.constant(h, 1.0)
        values = skorohod_product(one, h, ensemble)
        expected = np.einsum("nid,id->n", ensemble.increments, h.density)
        assert np.allclose(values, expected, rtol=0, atol=1e-12)


class TestGateauxConvergence:
    def test_linear_functional_is_exact(self, ensemble, grid):
        h = Direction.ramp(grid, 2.0)
        F = CylindricalFunctional.linear(h, scale=3.0)
        target = gradient_pairing(F, h, ensemble).value
        report = convergence_test(F, target, ensemble, h, SCHEDULE, q=1.0)
        assert max(report.errors) <= 1e-9

    def test_sine_converges_at_first_order(self, large_ensemble, grid):
        h = Direction.constant(grid)
        F = CylindricalFunctional.sine(h)
        target = gradient_pairing(F, h, large_ensemble).value
        report = convergence_test(
            F, target, large_ensemble, h, SCHEDULE, q=1.0, expected_slope=1.0
        )
        assert report.passed
        assert 0.8 <= report.slope <= 1.2
        assert list(report.errors) == sorted(report.errors, reverse=True)

    def test_central_difference_converges_at_second_order(self, large_ensemble, grid):
        h = Direction.indicator(grid, 0.0, 0.5)
        F = CylindricalFunctional.cosine(h)
        target = gradient_pairing(F, h, large_ensemble).value
        report = convergence_test(
            F, target, large_ensemble, h, SCHEDULE, q=2.0, central=True
        )
        assert report.passed
        assert 1.8 <= report.slope <= 2.2

    def test_wrong_target_fails(self, large_ensemble, grid):
        h = Direction.constant(grid)
        F = CylindricalFunctional.tanh(h)
        target = gradient_pairing(F, h, large_ensemble).value + 0.25
        report = convergence_test(F, target, large_ensemble, h, SCHEDULE)
        assert not report.passed
        assert report.errors[-1] > 0.2

    def test_quotient_rejects_zero_epsilon(self, ensemble, grid):
        F = CylindricalFunctional.sine(Direction.constant(grid))
        with pytest.raises(ValidationError):
            gateaux_quotient(F, ensemble, Direction.constant(grid), 0.0)

    def test_report_rows(self, ensemble, grid):
        h = Direction.constant(grid)
        F = CylindricalFunctional.square(h)
        target = gradient_pairing(F, h, ensemble).value
        report = convergence_test(F, target, ensemble, h, SCHEDULE, label="square")
        assert report.columns == ["eps", "lq_error", "stderr"]
        rows = report.rows()
        assert len(rows) == len(SCHEDULE)
        assert rows[0][0] == SCHEDULE[0]
        assert report.to_summary()["label"] == "square"


class TestSlopeAndVerdict:
    def test_slope_of_power_law(self):
        errors = [3.0 * e**1.5 for e in SCHEDULE]
        assert fit_slope(SCHEDULE, errors) == pytest.approx(1.5)

    def test_slope_needs_positive_errors(self):
        assert math.isnan(fit_slope(SCHEDULE[:4], [0.0, 0.0, 0.0, 1e-3]))

    def test_verdict_rejects_growth(self):
        assert not convergence_verdict([0.1, 0.2, 0.05, 0.01], [0.0] * 4, 1.0)

    def test_verdict_allows_noise(self):
        errors = [0.1, 0.05, 0.051, 0.02]
        assert convergence_verdict(errors, [0.001] * 4, 0.05)

    def test_verdict_ignores_roundoff(self):
        errors = [1e-3, 1e-12, 4e-12, 8e-12]
        assert not convergence_verdict(errors, [0.0] * 4, 1e-3)
        assert convergence_verdict(errors, [0.0] * 4, 1e-3, floor=1e-9)

    def test_slope_skips_roundoff(self):
        errors = [2.0 * e for e in SCHEDULE[:3]] + [1e-13] * 3
        assert fit_slope(SCHEDULE, errors, floor=1e-9) == pytest.approx(1.0)


class TestIntegrationByParts:
    def test_duality_holds_within_noise(self, large_ensemble, grid):
        G = CylindricalFunctional.cosine(Direction.ramp(grid, 1.0))
        h = Direction.indicator(grid, 0.0, 0.5, 1.5)
        for F in (
            CylindricalFunctional.sine(Direction.constant(grid)),
            CylindricalFunctional.square(Direction.indicator(grid, 0.0, 0.5)),
        ):
            gap = duality_residual(F, G, h, large_ensemble)
            assert gap.within(5.0)

    def test_duality_needs_bounded_multiplier(self, ensemble, grid):
        h = Direction.constant(grid)
        with pytest.raises(ValidationError):
            duality_residual(
                CylindricalFunctional.sine(h),
                CylindricalFunctional.square(h),
                h,
                ensemble,
            )

    def test_cameron_martin_within_noise(self, large_ensemble, grid):
        F = CylindricalFunctional.cosine(Direction.indicator(grid, 0.0, 0.5))
        gap = cameron_martin_gap(F, Direction.constant(grid, 0.5), large_ensemble)
        assert gap.within(5.0)
        assert gap.lhs == pytest.approx(gap.rhs, abs=0.05)

    def test_cameron_martin_for_linear_functional(self, large_ensemble, grid):
        """E[W(h)(omega + h)] = |h|^2 = 1, взвешенное среднее дает то же."""
        h = Direction.constant(grid, 1.0)
        F = CylindricalFunctional.linear(h)
        gap = cameron_martin_gap(F, h, large_ensemble)
        assert gap.lhs == pytest.approx(1.0, abs=0.05)
        assert gap.rhs == pytest.approx(1.0, abs=0.1)
