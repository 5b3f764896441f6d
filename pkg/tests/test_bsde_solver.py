from __future__ import annotations

import math

import numpy as np
import pytest

from wienerlab.core.bsde_solver import (
    BrownianTerminal,
    BsdeSpec,
    Regime,
    affine_oracle,
    forward_backward_spec,
    quadratic_oracle,
    solve_backward,
    solve_picard,
)
from wienerlab.core.exceptions import (
    ContractViolationError,
    ExponentOverflowError,
    NestedBudgetError,
    RegimeError,
    ValidationError,
)
from wienerlab.core.forward_sde import SdeSpec
from wienerlab.core.pathspace import sample_ensemble
from wienerlab.core.regression import RegressionBasis
from wienerlab.core.states import BrownianState
from wienerlab.infra.settings import SettingsLoader


def sup_rel_l2(numeric: np.ndarray, reference: np.ndarray) -> float:
    gap = np.sqrt(((numeric - reference) ** 2).mean(axis=0)).max()
    scale = np.sqrt((reference**2).mean(axis=0)).max()
    return float(gap / scale)


@pytest.fixture
def large_ensemble(grid):
    return sample_ensemble(grid, d=1, n_paths=20_000, seed=29)


def stripped(terminal: BrownianTerminal) -> BrownianTerminal:
    """Тот же терминал без гауссовских формул: эталон идет через вложенное МК."""
    return BrownianTerminal(g=terminal.g, g_prime=terminal.g_prime, name="nested")


class TestBsdeSpec:
    def test_inconsistent_driver_derivative(self):
        with pytest.raises(ValidationError):
            BsdeSpec(
                terminal=BrownianTerminal.linear(),
                driver=lambda t, x, y, z: np.sin(y),
                driver_y=lambda t, x, y, z: np.sin(y),
                driver_z=lambda t, x, y, z: np.zeros_like(z),
                markov_state=BrownianState(),
            )

    def test_lipschitz_bound_is_checked(self):
        with pytest.raises(ValidationError):
            BsdeSpec(
                terminal=BrownianTerminal.linear(),
                driver=lambda t, x, y, z: 3.0 * y,
                driver_y=lambda t, x, y, z: np.full_like(y, 3.0),
                driver_z=lambda t, x, y, z: np.zeros_like(z),
                markov_state=BrownianState(),
                lipschitz_bound=1.0,
            )

    def test_quadratic_regime_needs_growth_constant(self):
        with pytest.raises(ValidationError):
            BsdeSpec(
                terminal=BrownianTerminal.linear(),
                driver=lambda t, x, y, z: np.zeros_like(y),
                driver_y=lambda t, x, y, z: np.zeros_like(y),
                driver_z=lambda t, x, y, z: np.zeros_like(z),
                markov_state=BrownianState(),
                regime=Regime.QUADRATIC,
            )

    def test_affine_factory_bound(self):
        xi = BrownianTerminal.linear()
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, xi, BrownianState())
        assert spec.lipschitz_bound == 0.5
        assert spec.regime is Regime.LIPSCHITZ


class TestBackwardScheme:
    def test_affine_matches_analytic_oracle(self, large_ensemble):
        xi = BrownianTerminal.linear(1.0)
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, xi, BrownianState())
        solution = solve_backward(spec, large_ensemble, RegressionBasis(degree=3))
        oracle = affine_oracle(0.2, 0.5, 0.3, xi, large_ensemble)
        assert oracle.method == "analytic"
        assert sup_rel_l2(solution.Y, oracle.Y) <= 0.05

    def test_affine_z_is_deterministic_exponential(self, large_ensemble):
        xi = BrownianTerminal.linear(1.0)
        spec = BsdeSpec.affine(0.0, 0.5, 0.0, xi, BrownianState())
        solution = solve_backward(spec, large_ensemble)
        times = large_ensemble.grid.times
        expected = np.exp(0.5 * (1.0 - times[1:]))
        z = solution.Z[:, :, 0]
        gap = np.sqrt(((z - expected[None, :]) ** 2).mean())
        assert gap / np.sqrt((expected**2).mean()) <= 0.08

    def test_decay_with_sine_terminal(self, large_ensemble):
        """f = -beta y, xi = sin W_T: Y_t = exp(-(beta + 1/2)(T - t)) sin W_t."""
        beta = 0.5
        spec = BsdeSpec.linear_decay(beta, BrownianTerminal.sine(), BrownianState())
        solution = solve_backward(spec, large_ensemble, RegressionBasis(degree=5))
        tau = 1.0 - large_ensemble.grid.times
        exact = np.exp(-(beta + 0.5) * tau)[None, :] * np.sin(
            large_ensemble.paths[:, :, 0]
        )
        assert sup_rel_l2(solution.Y, exact) <= 0.05

    def test_evaluate_reproduces_solution(self, ensemble):
        spec = BsdeSpec.linear_decay(0.5, BrownianTerminal.sine(), BrownianState())
        solution = solve_backward(spec, ensemble)
        values = solution.evaluate(ensemble)
        assert np.allclose(values.Y, solution.Y, rtol=0, atol=1e-10)
        assert np.allclose(values.Z, solution.Z, rtol=0, atol=1e-10)

    def test_step_too_large_for_lipschitz_constant(self, ensemble):
        xi = BrownianTerminal.linear()
        spec = BsdeSpec.affine(0.0, 20.0, 0.0, xi, BrownianState())
        with pytest.raises(RegimeError):
            solve_backward(spec, ensemble)

    def test_missing_markov_state(self, ensemble):
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(), None)
        with pytest.raises(ContractViolationError):
            solve_backward(spec, ensemble)

    def test_quantile_rows(self, ensemble):
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(), BrownianState())
        solution = solve_backward(spec, ensemble)
        y_rows, z_rows = solution.quantile_rows()
        assert len(y_rows) == ensemble.grid.n_steps + 1
        assert len(z_rows) == ensemble.grid.n_steps
        node, t, mean, q05, q50, q95 = y_rows[-1]
        assert node == ensemble.grid.n_steps
        assert t == 1.0
        assert q05 <= q50 <= q95

    def test_bounds(self, ensemble):
        spec = BsdeSpec.zero_driver(BrownianTerminal.sine(), BrownianState())
        solution = solve_backward(spec, ensemble)
        bounds = solution.bounds()
        assert bounds["sup_abs_y"] == pytest.approx(np.abs(solution.Y).max())
        assert bounds["sup_norm_z"] == pytest.approx(np.abs(solution.Z).max())
        assert bounds["max_condition"] >= 1.0

    def test_forward_backward_system_solves(self, ensemble):
        spec = forward_backward_spec(
            SdeSpec.geometric(0.05, 0.2), g=lambda x: x, g_prime=np.ones_like
        )
        solution = solve_backward(spec, ensemble)
        assert np.all(np.isfinite(solution.Y))
        assert solution.Y[:, 0].mean() == pytest.approx(math.exp(0.05), rel=0.02)


class TestPicard:
    def test_zero_iterations_give_zero_solution(self, ensemble):
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, BrownianTerminal.sine(), BrownianState())
        solution = solve_picard(spec, ensemble, None, n_iter=0)
        assert solution.method == "picard"
        assert not np.any(solution.Y)
        assert not np.any(solution.Z)
        assert solution.diagnostics["iterations"] == 0

    def test_converges_to_backward_scheme(self, ensemble):
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, BrownianTerminal.sine(), BrownianState())
        basis = RegressionBasis(degree=5)
        picard = solve_picard(spec, ensemble, basis, n_iter=30, tol=1e-8)
        backward = solve_backward(spec, ensemble, basis)
        assert picard.diagnostics["converged_at"] is not None
        assert sup_rel_l2(picard.Y, backward.Y) <= 0.01
        ratios = picard.diagnostics["picard_ratios"]
        assert ratios and max(ratios[:3]) < 1.0

    def test_negative_iterations_rejected(self, ensemble):
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, BrownianTerminal.sine(), BrownianState())
        with pytest.raises(ValidationError):
            solve_picard(spec, ensemble, None, n_iter=-1)

    def test_quadratic_regime_rejected(self, ensemble):
        spec = BsdeSpec.quadratic(1.0, BrownianTerminal.linear(0.5), BrownianState())
        with pytest.raises(RegimeError):
            solve_picard(spec, ensemble, None, n_iter=5)

    def test_evaluate_not_available(self, ensemble):
        spec = BsdeSpec.affine(0.2, 0.5, 0.3, BrownianTerminal.sine(), BrownianState())
        solution = solve_picard(spec, ensemble, None, n_iter=3)
        with pytest.raises(ContractViolationError):
            solution.evaluate(ensemble)


class TestQuadratic:
    def test_linear_terminal_matches_exponential_transform(self, large_ensemble):
        """Y_t = a W_t + c a^2 (T - t) / 2, Z = a."""
        c, a = 1.0, 0.5
        xi = BrownianTerminal.linear(a)
        spec = BsdeSpec.quadratic(c, xi, BrownianState())
        solution = solve_backward(spec, large_ensemble)
        oracle = quadratic_oracle(c, xi, large_ensemble)
        assert oracle.method == "analytic"
        assert sup_rel_l2(solution.Y, oracle.Y) <= 0.05
        assert np.sqrt(((solution.Z - a) ** 2).mean()) / a <= 0.03
        assert solution.diagnostics["sup_norm_z"] > 0.0

    def test_square_terminal_not_integrable(self, ensemble):
        with pytest.raises(ValidationError):
            quadratic_oracle(1.0, BrownianTerminal.square(), ensemble)

    def test_nested_oracle_matches_analytic(self, ensemble):
        small = ensemble.subset(40)
        xi = BrownianTerminal.linear(0.5)
        analytic = quadratic_oracle(1.0, xi, small)
        nested = quadratic_oracle(1.0, stripped(xi), small, n_inner=4000, seed=3)
        assert nested.method == "nested-endpoint"
        gap = np.abs(nested.Y - analytic.Y)
        assert np.all(gap <= 5.0 * nested.stderr + 1e-3)

    def test_exponent_overflow(self, ensemble):
        xi = stripped(BrownianTerminal.linear(1.0))
        with pytest.raises(ExponentOverflowError):
            quadratic_oracle(1000.0, xi, ensemble.subset(10), n_inner=100)


class TestAffineOracle:
    def test_endpoint_nesting_matches_analytic(self, ensemble):
        small = ensemble.subset(40)
        xi = BrownianTerminal.linear(1.0)
        analytic = affine_oracle(0.2, 0.5, 0.3, xi, small)
        nested = affine_oracle(0.2, 0.5, 0.3, stripped(xi), small, n_inner=4000)
        assert nested.method == "nested-endpoint"
        gap = np.abs(nested.Y - analytic.Y)
        assert np.all(gap <= 5.0 * nested.stderr + 1e-3)

    def test_stepped_nesting_matches_analytic(self, ensemble):
        """Коэффициент-функция, равная константе, дает тот же эталон."""
        small = ensemble.subset(20)
        xi = BrownianTerminal.linear(1.0)
        analytic = affine_oracle(0.0, 0.5, 0.0, xi, small)
        nested = affine_oracle(
            0.0, lambda t, w: np.full_like(w, 0.5), 0.0, xi, small, n_inner=2000
        )
        assert nested.method == "nested-stepped"
        gap = np.abs(nested.Y - analytic.Y)
        assert np.all(gap <= 5.0 * nested.stderr + 1e-3)

    def test_budget_is_enforced(self, ensemble, monkeypatch):
        monkeypatch.setenv("NESTED_MC_BUDGET", "1000")
        SettingsLoader().reload()
        with pytest.raises(NestedBudgetError):
            affine_oracle(
                0.0,
                lambda t, w: np.zeros_like(w),
                0.0,
                BrownianTerminal.sine(),
                ensemble,
                n_inner=100,
            )

    def test_requires_brownian_terminal(self, ensemble):
        with pytest.raises(ValidationError):
            affine_oracle(0.0, 0.5, 0.0, lambda view: view.paths[:, -1, 0], ensemble)
