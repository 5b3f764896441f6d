from __future__ import annotations

import math

import numpy as np
import pytest

from wienerlab.core.bsde_solver import (
    BrownianTerminal,
    BsdeSpec,
    forward_backward_spec,
    solve_backward,
    solve_picard,
)
from wienerlab.core.exceptions import ContractViolationError, ValidationError
from wienerlab.core.forward_sde import SdeSpec
from wienerlab.core.malliavin_bsde import (
    bsde_quotient,
    driver_sensitivity_check,
    interior_nodes,
    markovian_identity_check,
    solve_linear_malliavin,
    verify_malliavin,
)
from wienerlab.core.pathspace import Direction, make_grid, sample_ensemble
from wienerlab.core.regression import RegressionBasis
from wienerlab.core.states import BrownianState
from wienerlab.core.utils import dyadic_schedule
from wienerlab.core.wiener_calculus import CylindricalFunctional, gradient_pairing

SCHEDULE = dyadic_schedule(3, 8)


@pytest.fixture
def large_ensemble(grid):
    return sample_ensemble(grid, d=1, n_paths=20_000, seed=31)


@pytest.fixture
def fine_ensemble():
    return sample_ensemble(make_grid(1.0, 32), d=1, n_paths=80_000, seed=41)


@pytest.fixture
def sine_affine():
    return BsdeSpec.affine(0.2, 0.5, 0.3, BrownianTerminal.sine(), BrownianState())


class TestLinearMalliavin:
    def test_linear_terminal_gives_constant_derivative(self, ensemble, grid):
        """f = 0, xi = a W_T: Y^h_t = a h(T) во всех узлах."""
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(1.5), BrownianState())
        h = Direction.ramp(grid, 2.0)
        base = solve_backward(spec, ensemble)
        linear = solve_linear_malliavin(spec, base, h)
        expected = 1.5 * h.cumulative[-1, 0]
        assert np.allclose(linear.Yhat, expected, rtol=0, atol=1e-5)

    def test_terminal_value_is_pairing(self, ensemble, grid, sine_affine):
        h = Direction.indicator(grid, 0.0, 0.5)
        base = solve_backward(sine_affine, ensemble)
        linear = solve_linear_malliavin(sine_affine, base, h)
        assert sine_affine.dxi_pairing is not None
        pairing = sine_affine.dxi_pairing(ensemble, h)
        assert np.array_equal(linear.Yhat[:, -1], pairing)

    def test_linear_in_direction(self, ensemble, grid, sine_affine):
        h1 = Direction.constant(grid)
        h2 = Direction.ramp(grid, 1.0)
        base = solve_backward(sine_affine, ensemble)
        first = solve_linear_malliavin(sine_affine, base, h1)
        second = solve_linear_malliavin(sine_affine, base, h2)
        total = solve_linear_malliavin(sine_affine, base, h1 + h2)
        assert np.allclose(total.Yhat, first.Yhat + second.Yhat, rtol=0, atol=1e-9)
        assert np.allclose(total.Zhat, first.Zhat + second.Zhat, rtol=0, atol=1e-9)

    def test_agrees_with_gradient_at_start(self, ensemble, grid):
        """f = 0, xi = sin W(1): Y^h_0 совпадает со средним <grad xi, h>_H."""
        xi = CylindricalFunctional.sine(Direction.constant(grid))
        spec = BsdeSpec.zero_driver(xi, BrownianState())
        h = Direction.ramp(grid, 1.0)
        linear = solve_linear_malliavin(spec, solve_backward(spec, ensemble), h)
        gradient = gradient_pairing(xi, h, ensemble).value
        se = gradient.std(ddof=1) / np.sqrt(ensemble.n_paths)
        assert abs(linear.Yhat[:, 0].mean() - gradient.mean()) <= 3.0 * se

    def test_decay_sine_closed_form(self, large_ensemble, grid):
        """h' = 1_[0,t]: Y^h_t = exp(-beta (T - t) - (T - t) / 2) cos(W_t) t."""
        beta, node = 0.5, 8
        t = float(grid.times[node])
        spec = BsdeSpec.linear_decay(beta, BrownianTerminal.sine(), BrownianState())
        base = solve_backward(spec, large_ensemble, RegressionBasis(degree=5))
        h = Direction.indicator(grid, 0.0, t)
        linear = solve_linear_malliavin(spec, base, h)
        tau = 1.0 - t
        w_t = large_ensemble.paths[:, node, 0]
        exact = math.exp(-beta * tau - 0.5 * tau) * np.cos(w_t) * t
        gap = np.sqrt(np.mean((linear.Yhat[:, node] - exact) ** 2))
        assert gap / np.sqrt(np.mean(exact**2)) <= 0.03

    def test_missing_pairing(self, ensemble, grid):
        spec = BsdeSpec.zero_driver(lambda view: view.paths[:, -1, 0], BrownianState())
        base = solve_backward(spec, ensemble)
        with pytest.raises(ContractViolationError):
            solve_linear_malliavin(spec, base, Direction.constant(grid))

    def test_picard_solution_is_not_a_base(self, ensemble, grid, sine_affine):
        base = solve_picard(sine_affine, ensemble, None, n_iter=2)
        with pytest.raises(ContractViolationError):
            solve_linear_malliavin(sine_affine, base, Direction.constant(grid))


class TestQuotients:
    def test_square_terminal_errors_equal_epsilon(self, ensemble, grid):
        """(W_T + eps)^2: отношение отличается от Y^h ровно на eps."""
        spec = BsdeSpec.zero_driver(BrownianTerminal.square(), BrownianState())
        h = Direction.constant(grid)
        report = verify_malliavin(spec, ensemble, h, SCHEDULE, p=1.5)
        assert list(report.errors) == pytest.approx(list(SCHEDULE), rel=1e-6)
        assert report.slope == pytest.approx(1.0, abs=1e-3)
        assert report.passed
        assert "z_error" in report.columns

    def test_wrong_pairing_fails(self, ensemble, grid):
        xi = BrownianTerminal.square()
        spec = BsdeSpec.zero_driver(
            xi, BrownianState(), dxi_pairing=lambda view, h: 2.0 * xi.pairing(view, h)
        )
        report = verify_malliavin(spec, ensemble, Direction.constant(grid), SCHEDULE)
        assert not report.passed

    def test_thread_count_does_not_change_report(self, ensemble, grid, sine_affine):
        h = Direction.constant(grid)
        serial = verify_malliavin(sine_affine, ensemble, h, SCHEDULE, threads=1)
        parallel = verify_malliavin(sine_affine, ensemble, h, SCHEDULE, threads=3)
        assert parallel.errors == pytest.approx(serial.errors, rel=1e-9)
        assert parallel.extra["z_error"] == pytest.approx(
            serial.extra["z_error"], rel=1e-9
        )

    def test_quadratic_linear_terminal_is_exact(self, ensemble, grid):
        xi = BrownianTerminal.linear(0.5)
        spec = BsdeSpec.quadratic(1.0, xi, BrownianState())
        report = verify_malliavin(
            spec, ensemble, Direction.constant(grid), SCHEDULE, p=2.0
        )
        assert max(report.errors) <= 1e-6
        assert report.passed

    @pytest.mark.parametrize("p", [1.5, 3.0])
    def test_quadratic_passes_at_both_exponents(self, ensemble, grid, p):
        spec = BsdeSpec.quadratic(1.0, BrownianTerminal.linear(0.5), BrownianState())
        h = Direction.constant(grid)
        assert verify_malliavin(spec, ensemble, h, SCHEDULE, p=p).passed

    @pytest.mark.parametrize("case", ["decay-sine", "affine-cosine"])
    def test_lipschitz_cases_pass(self, ensemble, grid, case):
        if case == "decay-sine":
            spec = BsdeSpec.linear_decay(0.5, BrownianTerminal.sine(), BrownianState())
        else:
            xi = BrownianTerminal.cosine()
            spec = BsdeSpec.affine(0.2, 0.5, 0.3, xi, BrownianState())
        report = verify_malliavin(
            spec,
            ensemble,
            Direction.ramp(grid, 1.0),
            SCHEDULE,
            p=1.5,
            basis=RegressionBasis(degree=5),
        )
        assert report.passed
        assert list(report.errors) == sorted(report.errors, reverse=True)

    def test_truncated_direction_keeps_past_nodes(self, ensemble, grid, sine_affine):
        node = 8
        h = Direction.ramp(grid, 1.0)
        cut = h.truncate(float(grid.times[node]))
        base = solve_backward(sine_affine, ensemble)
        eps = 2.0**-4
        full = bsde_quotient(sine_affine, base, ensemble, h, eps, mode="reevaluate")
        short = bsde_quotient(sine_affine, base, ensemble, cut, eps, mode="reevaluate")
        past = slice(0, node + 1)
        assert np.allclose(short.Yq[:, past], full.Yq[:, past], rtol=0, atol=1e-12)
        assert np.allclose(short.Zq[:, past], full.Zq[:, past], rtol=0, atol=1e-12)
        assert not np.allclose(short.Yq[:, -1], full.Yq[:, -1])

    def test_reevaluated_quotient_matches_full_horizon(self, ensemble, grid):
        """xi = W_T, h = 1: <D Y_t, h'> = t."""
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(), BrownianState())
        h = Direction.constant(grid)
        base = solve_backward(spec, ensemble)
        quotient = bsde_quotient(spec, base, ensemble, h, 2.0**-6, mode="reevaluate")
        linear = solve_linear_malliavin(spec, base, h, full_horizon=True)
        times = grid.times
        assert np.allclose(quotient.Yq.mean(axis=0), times, rtol=0, atol=0.05)
        assert np.allclose(linear.Yhat.mean(axis=0), times, rtol=0, atol=0.05)

    def test_unknown_mode(self, ensemble, grid, sine_affine):
        base = solve_backward(sine_affine, ensemble)
        with pytest.raises(ValidationError):
            bsde_quotient(
                sine_affine, base, ensemble, Direction.constant(grid), 0.1, "bogus"
            )

    def test_exponent_ranges(self, ensemble, grid, sine_affine):
        h = Direction.constant(grid)
        with pytest.raises(ValidationError):
            verify_malliavin(sine_affine, ensemble, h, SCHEDULE, p=2.0)
        quadratic = BsdeSpec.quadratic(1.0, BrownianTerminal.linear(), BrownianState())
        with pytest.raises(ValidationError):
            verify_malliavin(quadratic, ensemble, h, SCHEDULE, p=1.0)


class TestMarkovianIdentity:
    def test_interior_nodes(self, ensemble):
        assert interior_nodes(ensemble) == list(range(4, 13))

    def test_diagonal_matches_z(self, large_ensemble):
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(), BrownianState())
        solution = solve_backward(spec, large_ensemble)
        report = markovian_identity_check(spec, solution)
        assert report.passed
        summary = report.to_summary()
        assert summary["nodes"] == 9
        assert summary["max_rel_residual"] <= 0.05

    def test_decay_sine(self, fine_ensemble):
        spec = BsdeSpec.linear_decay(0.5, BrownianTerminal.sine(), BrownianState())
        solution = solve_backward(spec, fine_ensemble, RegressionBasis(degree=5))
        report = markovian_identity_check(spec, solution, threshold=0.05)
        assert report.passed

    def test_quadratic(self, fine_ensemble):
        """f = (c/2) z^2, xi = a W_T: обе стороны равны a."""
        spec = BsdeSpec.quadratic(1.0, BrownianTerminal.linear(0.5), BrownianState())
        solution = solve_backward(spec, fine_ensemble)
        report = markovian_identity_check(spec, solution, threshold=0.03)
        assert report.passed

    def test_width_must_be_positive(self, ensemble):
        spec = BsdeSpec.zero_driver(BrownianTerminal.linear(), BrownianState())
        solution = solve_backward(spec, ensemble)
        with pytest.raises(ValidationError):
            markovian_identity_check(spec, solution, width=0)


class TestDriverSensitivity:
    def test_path_independent_driver(self, ensemble, grid, sine_affine):
        solution = solve_backward(sine_affine, ensemble)
        report = driver_sensitivity_check(
            sine_affine, solution, Direction.constant(grid), SCHEDULE
        )
        assert max(report.errors) == 0.0
        assert report.passed

    def test_forward_driver_converges(self, ensemble, grid):
        spec = forward_backward_spec(
            SdeSpec.geometric(0.05, 0.2),
            g=lambda x: x,
            g_prime=np.ones_like,
            beta=0.5,
            kappa=0.3,
        )
        solution = solve_backward(spec, ensemble)
        report = driver_sensitivity_check(
            spec, solution, Direction.ramp(grid, 1.0), SCHEDULE
        )
        assert report.passed
        assert list(report.errors) == sorted(report.errors, reverse=True)
