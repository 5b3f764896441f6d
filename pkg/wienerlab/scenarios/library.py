"""
Встроенные сценарии: наборы функционалов, направлений и задач BSDE.

Каждый сценарий получает ScenarioContext, выполняет свои проверки и
пишет таблицы; общий формат отчета собирает runner.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np

from wienerlab.core.bsde_solver import (
    BackwardSolution,
    BrownianTerminal,
    BsdeSpec,
    affine_oracle,
    forward_backward_spec,
    quadratic_oracle,
    solve_backward,
    solve_picard,
)
from wienerlab.core.exceptions import ContractViolationError
from wienerlab.core.forward_sde import SdeSpec, shift_remainder
from wienerlab.core.malliavin_bsde import (
    driver_sensitivity_check,
    markovian_identity_check,
    verify_malliavin,
)
from wienerlab.core.pathspace import (
    AdaptedProcess,
    Direction,
    Grid,
    drift_correction,
    inner_H,
    shift,
    shifted_stochastic_integral_identity,
    wiener_integral,
)
from wienerlab.core.regression import RegressionBasis
from wienerlab.core.states import BrownianState, WienerIntegralState
from wienerlab.core.wiener_calculus import (
    CylindricalFunctional,
    cameron_martin_gap,
    convergence_test,
    duality_residual,
    gradient_pairing,
)
from wienerlab.scenarios.config import DirectionConfig
from wienerlab.scenarios.context import ScenarioContext

logger = logging.getLogger("wienerlab.scenarios")

EXACT_TOLERANCE = 1e-12
LINEAR_TOLERANCE = 1e-9
NESTED_SIGMAS = 5.0

DEFAULT_DIRECTIONS: tuple[DirectionConfig, ...] = (
    DirectionConfig(kind="constant", value=1.0),
    DirectionConfig(kind="ramp", value=2.0),
    DirectionConfig(kind="indicator", value=1.5, start=0.0, end=0.5),
)

PAIR_COLUMNS = ["functional", "direction", "lhs_mean", "rhs_mean", "residual", "stderr"]


# Пять гладких функционалов на фиксированных направлениях первой компоненты
def functional_suite(grid: Grid, d: int = 1) -> list[CylindricalFunctional]:
    horizon = grid.horizon
    h1 = Direction.constant(grid, 1.0, d=d, component=0)
    h2 = Direction.indicator(grid, 0.0, 0.5 * horizon, 1.0, d=d, component=0)
    h3 = Direction.ramp(grid, 1.0, d=d, component=0)
    return [
        CylindricalFunctional.sine(h1),
        CylindricalFunctional.cosine(h2),
        CylindricalFunctional.tanh(h3),
        CylindricalFunctional.square(h2),
        CylindricalFunctional.product_sine(h1, h3),
    ]


def smooth_basis(ctx: ScenarioContext) -> RegressionBasis:
    return RegressionBasis(degree=max(ctx.config.degree, 5), ridge=ctx.config.ridge)


# sup по узлам нормы L^2 разности, деленный на sup нормы эталона
def sup_rel_l2(numeric: np.ndarray, reference: np.ndarray) -> float:
    gap = float(np.sqrt(((numeric - reference) ** 2).mean(axis=0)).max())
    scale = float(np.sqrt((reference**2).mean(axis=0)).max())
    return gap / scale if scale > 0 else gap


def rel_l2(numeric: np.ndarray, reference: np.ndarray) -> float:
    gap = math.sqrt(float(np.mean((numeric - reference) ** 2)))
    scale = math.sqrt(float(np.mean(reference**2)))
    return gap / scale if scale > 0 else gap


def shift_identities(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    grid = ctx.grid
    d = ctx.config.d
    directions = ctx.directions(DEFAULT_DIRECTIONS)
    middle = 0.5 * grid.horizon
    early = Direction.indicator(grid, 0.0, middle, 1.0, d=d, component=0)
    late = AdaptedProcess.supported_after(middle, AdaptedProcess.brownian())
    processes = [AdaptedProcess.constant(0.7), AdaptedProcess.brownian(), late]

    for label, h in [*directions, ("early", early)]:
        moved = shift(view, h, 1.0)
        for Z in processes:
            residual = shifted_stochastic_integral_identity(Z, h, view)
            magnitude = np.abs(Z(moved) * moved.increments).sum(axis=(1, 2)).max()
            bound = EXACT_TOLERANCE * max(1.0, float(magnitude))
            worst = float(np.abs(residual).max())
            ctx.add_check(
                f"shifted integral {Z.name} along {label}", worst <= bound, worst, bound
            )

    # носители не пересекаются: поправка равна нулю поточечно
    correction = float(np.abs(drift_correction(late, early, view)).max())
    ctx.add_check("disjoint support correction", correction == 0.0, correction, 0.0)

    label, h = directions[0]
    composed = shift(shift(view, h, 0.25), h, 0.5).increments
    direct = shift(view, h, 0.75).increments
    gap = float(np.abs(composed - direct).max())
    ctx.add_check(
        f"shift composition along {label}",
        gap <= EXACT_TOLERANCE,
        gap,
        EXACT_TOLERANCE,
    )

    for k_label, k in directions:
        moved_integral = np.einsum(
            "nid,id->n", shift(view, h, 0.5).increments, k.density
        )
        expected = wiener_integral(k, view) + 0.5 * inner_H(k, h)
        gap = float(np.abs(moved_integral - expected).max())
        bound = EXACT_TOLERANCE * max(1.0, float(np.abs(expected).max()))
        ctx.add_check(f"shifted wiener integral W({k_label})", gap <= bound, gap, bound)

    try:
        shifted_stochastic_integral_identity(AdaptedProcess.anticipating(), h, view)
    except ContractViolationError:
        rejected = True
    else:
        rejected = False
    ctx.add_check("anticipating process rejected", rejected, float(rejected), 1.0)


def cameron_martin(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    n_sigma = ctx.param("n_sigma")
    rows = []
    for i, F in enumerate(functional_suite(ctx.grid, ctx.config.d)):
        for label, h in ctx.directions(DEFAULT_DIRECTIONS):
            gap = cameron_martin_gap(F, h, view)
            ctx.add_check(
                f"cameron-martin F{i} {F.name} along {label}",
                gap.within(n_sigma),
                gap.residual,
                n_sigma * gap.stderr,
            )
            rows.append([F.name, label, gap.lhs, gap.rhs, gap.residual, gap.stderr])
    ctx.store.write_csv("cameron-martin.csv", PAIR_COLUMNS, rows)


def skorohod_duality(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    grid = ctx.grid
    n_sigma = ctx.param("n_sigma")
    G = CylindricalFunctional.cosine(
        Direction.ramp(grid, 1.0, d=ctx.config.d, component=0)
    )
    rows = []
    for i, F in enumerate(functional_suite(grid, ctx.config.d)):
        for label, h in ctx.directions(DEFAULT_DIRECTIONS):
            gap = duality_residual(F, G, h, view)
            ctx.add_check(
                f"duality F{i} {F.name} along {label}",
                gap.within(n_sigma),
                gap.residual,
                n_sigma * gap.stderr,
            )
            rows.append([F.name, label, gap.lhs, gap.rhs, gap.residual, gap.stderr])
    ctx.store.write_csv("skorohod-duality.csv", PAIR_COLUMNS, rows)


def cylindrical(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    config = ctx.config
    schedule = config.eps_schedule
    slope_tolerance = ctx.param("slope_tolerance")
    directions = ctx.directions(DEFAULT_DIRECTIONS)

    for i, F in enumerate(functional_suite(ctx.grid, config.d)):
        for label, h in directions:
            target = gradient_pairing(F, h, view).value
            report = convergence_test(
                F, target, view, h, schedule, q=config.q, label=f"gateaux F{i} {label}"
            )
            ctx.record_report(f"gateaux-f{i}-{label}", report)
            # нулевые ошибки (F не чувствует h) наклона не имеют
            slope_ok = math.isnan(report.slope) or (
                abs(report.slope - 1.0) <= slope_tolerance
            )
            ctx.add_check(
                f"gateaux F{i} {F.name} along {label}",
                report.passed and slope_ok,
                report.errors[-1],
                report.tolerance,
                detail=f"slope={report.slope:.3f}",
            )

    label, h = directions[0]
    linear = CylindricalFunctional.linear(h)
    report = convergence_test(
        linear,
        gradient_pairing(linear, h, view).value,
        view,
        h,
        schedule,
        q=config.q,
        label="gateaux linear",
    )
    ctx.record_report("gateaux-linear", report)
    worst = max(report.errors)
    ctx.add_check(
        "linear functional exact", worst <= LINEAR_TOLERANCE, worst, LINEAR_TOLERANCE
    )

    F = CylindricalFunctional.sine(h)
    target = gradient_pairing(F, h, view).value
    corrupted = target + 0.25 * (1.0 + np.abs(target))
    report = convergence_test(
        F, corrupted, view, h, schedule, q=config.q, label="gateaux corrupted"
    )
    ctx.record_report("gateaux-corrupted", report)
    ctx.add_check(
        "corrupted target rejected",
        not report.passed,
        report.errors[-1],
        report.tolerance,
    )

    report = convergence_test(
        F,
        target,
        view,
        h,
        schedule,
        q=config.q,
        central=True,
        label="gateaux central",
        expected_slope=2.0,
    )
    ctx.record_report("gateaux-central", report)
    ctx.add_check(
        "central quotient second order",
        report.passed,
        report.errors[-1],
        report.tolerance,
        detail=f"slope={report.slope:.3f}",
    )


def forward_tangent(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    schedule = ctx.config.eps_schedule
    slope_tolerance = ctx.param("slope_tolerance")
    label, h = ctx.directions(DEFAULT_DIRECTIONS)[0]

    geometric = SdeSpec.geometric(ctx.param("mu"), ctx.param("nu"))
    report = shift_remainder(geometric, view, h, schedule)
    ctx.record_report(f"forward-geometric-{label}", report)
    ctx.add_check(
        f"geometric remainder along {label}",
        report.passed and abs(report.slope - 1.0) <= slope_tolerance,
        report.errors[-1],
        report.tolerance,
        detail=f"slope={report.slope:.3f}",
    )

    # линейные коэффициенты: схема Эйлера линейна по сдвигу
    sigma = ctx.param("sigma")
    linear_specs = [
        SdeSpec.additive(sigma=sigma),
        SdeSpec.ornstein_uhlenbeck(kappa=1.0, theta=0.0, sigma=sigma),
    ]
    for spec in linear_specs:
        report = shift_remainder(spec, view, h, schedule)
        ctx.record_report(f"forward-{spec.name}-{label}", report)
        worst = max(report.errors)
        ctx.add_check(
            f"{spec.name} remainder vanishes",
            worst <= LINEAR_TOLERANCE,
            worst,
            LINEAR_TOLERANCE,
        )


def affine(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    d = ctx.config.d
    alpha, beta, gamma = ctx.param("alpha"), ctx.param("beta"), ctx.param("gamma")
    a = ctx.param("a")
    xi = BrownianTerminal.linear(a)
    spec = BsdeSpec.affine(alpha, beta, gamma, xi, BrownianState(0, d), d=d)

    solution = solve_backward(spec, view, ctx.basis)
    ctx.record_solution("affine-solution", solution)
    oracle = affine_oracle(alpha, beta, gamma, xi, view)

    y_error = sup_rel_l2(solution.Y, oracle.Y)
    y_tol = ctx.param("tolerance")
    ctx.add_check(
        "affine Y vs oracle",
        y_error <= y_tol,
        y_error,
        y_tol,
        detail=f"oracle={oracle.method}",
    )

    tau = view.grid.horizon - view.grid.times[:-1]
    z_exact = np.broadcast_to(a * np.exp(beta * tau), solution.Z.shape[:2])
    z_error = rel_l2(solution.Z[:, :, 0], z_exact)
    z_tol = ctx.param("z_tolerance")
    ctx.add_check("affine Z vs a exp(beta (T - t))", z_error <= z_tol, z_error, z_tol)

    # вложенное моделирование на подвыборке против аналитического эталона
    sub = view.subset(min(ctx.param_int("nested_paths"), view.n_paths))
    nested = affine_oracle(
        alpha,
        lambda t, w: np.full_like(w, beta),
        gamma,
        xi,
        sub,
        n_inner=ctx.param_int("n_inner"),
    )
    analytic = affine_oracle(alpha, beta, gamma, xi, sub)
    gap = np.abs(nested.Y - analytic.Y)[:, :-1]
    score = float((gap / (nested.stderr[:, :-1] + 1e-12)).max())
    ctx.add_check(
        "nested oracle vs analytic",
        score <= NESTED_SIGMAS,
        score,
        NESTED_SIGMAS,
        detail=f"method={nested.method}",
    )
    ctx.record(
        "affine",
        {
            "y_rel_error": y_error,
            "z_rel_error": z_error,
            "y0": float(solution.Y[:, 0].mean()),
        },
    )


def lipschitz_cases(
    ctx: ScenarioContext,
) -> list[tuple[str, BsdeSpec, RegressionBasis]]:
    grid, d = ctx.grid, ctx.config.d
    state = BrownianState(0, d)
    beta = ctx.param("beta")

    k = Direction.ramp(grid, 1.0, d=d, component=0)
    square = BsdeSpec.zero_driver(
        CylindricalFunctional.square(k),
        WienerIntegralState(k),
        d=d,
        name="f=0, xi=W(k)^2",
    )
    affine_spec = BsdeSpec.affine(
        ctx.param("alpha"),
        beta,
        ctx.param("gamma"),
        BrownianTerminal.cosine(),
        state,
        d=d,
    )
    decay = BsdeSpec.linear_decay(beta, BrownianTerminal.sine(), state, d=d)
    fbsde = forward_backward_spec(
        SdeSpec.geometric(ctx.param("mu"), ctx.param("nu")),
        lambda x: x,
        np.ones_like,
        beta=beta,
        kappa=ctx.param("kappa"),
        d=d,
    )
    return [
        ("square", square, ctx.basis),
        ("affine", affine_spec, smooth_basis(ctx)),
        ("decay-sine", decay, smooth_basis(ctx)),
        ("fbsde", fbsde, ctx.basis),
    ]


# Решение, проверка разностных отношений при каждом p и запись таблиц
def _verify(
    ctx: ScenarioContext,
    slug: str,
    spec: BsdeSpec,
    basis: RegressionBasis,
    h: Direction,
    exponents: Sequence[float],
) -> BackwardSolution:
    view = ctx.ensemble()
    config = ctx.config
    base = solve_backward(spec, view, basis)
    ctx.record_solution(f"{slug}-solution", base)
    for p in exponents:
        report = verify_malliavin(
            spec,
            view,
            h,
            config.eps_schedule,
            p=p,
            basis=basis,
            threads=config.threads,
            base=base,
            label=f"malliavin {slug} p={p:g}",
        )
        ctx.record_report(f"malliavin-{slug}-p{p:g}", report)
        ctx.add_check(
            f"malliavin {spec.name} p={p:g}",
            report.passed,
            report.errors[-1],
            report.tolerance,
            detail=f"z_error={report.extra['z_error'][-1]:.3e}",
        )
    return base


def lipschitz(ctx: ScenarioContext) -> None:
    _, h = ctx.directions(DEFAULT_DIRECTIONS)[0]
    p = ctx.config.p
    for slug, spec, basis in lipschitz_cases(ctx):
        base = _verify(ctx, slug, spec, basis, h, (p,))
        report = driver_sensitivity_check(spec, base, h, ctx.config.eps_schedule, p=p)
        ctx.record_report(f"driver-{slug}", report)
        ctx.add_check(
            f"driver sensitivity {spec.name}",
            report.passed,
            report.errors[-1],
            report.tolerance,
            detail="" if report.passed else "condition not verified",
        )


def quadratic(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    d = ctx.config.d
    c, a = ctx.param("c"), ctx.param("a")
    state = BrownianState(0, d)
    _, h = ctx.directions(DEFAULT_DIRECTIONS)[0]
    y_tol = ctx.param("tolerance")

    xi = BrownianTerminal.linear(a)
    spec = BsdeSpec.quadratic(c, xi, state, d=d)
    exponents = (ctx.config.p, ctx.param("p_high"))
    base = _verify(ctx, "quadratic-linear", spec, ctx.basis, h, exponents)
    oracle = quadratic_oracle(c, xi, view)
    y_error = sup_rel_l2(base.Y, oracle.Y)
    ctx.add_check(
        "quadratic Y vs oracle",
        y_error <= y_tol,
        y_error,
        y_tol,
        detail=f"oracle={oracle.method}",
    )
    z_error = rel_l2(base.Z[:, :, 0], np.full(base.Z.shape[:2], a))
    z_tol = ctx.param("z_tolerance")
    ctx.add_check("quadratic Z equals a", z_error <= z_tol, z_error, z_tol)

    sine = BrownianTerminal.sine()
    sine_spec = BsdeSpec.quadratic(c, sine, state, d=d)
    sine_base = _verify(
        ctx, "quadratic-sine", sine_spec, smooth_basis(ctx), h, (ctx.config.p,)
    )
    n_sub = min(ctx.param_int("nested_paths"), view.n_paths)
    nested = quadratic_oracle(
        c, sine, view.subset(n_sub), n_inner=ctx.param_int("n_inner")
    )
    sine_error = sup_rel_l2(sine_base.Y[:n_sub], nested.Y)
    ctx.add_check(
        "quadratic sine Y vs nested oracle",
        sine_error <= y_tol,
        sine_error,
        y_tol,
        detail=f"oracle={nested.method}",
    )
    ctx.record(
        "quadratic-bounds", {"linear": base.bounds(), "sine": sine_base.bounds()}
    )


def markovian_identity(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    d = ctx.config.d
    state = BrownianState(0, d)
    beta = ctx.param("beta")
    width = ctx.param_int("width")
    threshold = ctx.param("threshold")
    exact_threshold = ctx.param("exact_threshold")
    c, a = ctx.param("c"), ctx.param("a")
    cases = [
        (
            "linear",
            BsdeSpec.zero_driver(BrownianTerminal.linear(), state, d=d),
            ctx.basis,
            exact_threshold,
        ),
        (
            "affine",
            BsdeSpec.affine(0.0, beta, 0.0, BrownianTerminal.linear(), state, d=d),
            ctx.basis,
            threshold,
        ),
        (
            "decay-sine",
            BsdeSpec.linear_decay(beta, BrownianTerminal.sine(), state, d=d),
            smooth_basis(ctx),
            threshold,
        ),
        (
            "quadratic",
            BsdeSpec.quadratic(c, BrownianTerminal.linear(a), state, d=d),
            ctx.basis,
            exact_threshold,
        ),
    ]
    for slug, spec, basis, limit in cases:
        solution = solve_backward(spec, view, basis)
        report = markovian_identity_check(spec, solution, width=width, threshold=limit)
        ctx.store.write_csv(
            f"identity-{slug}.csv",
            ["node", "t", "component", "rel_residual"],
            report.rows,
        )
        ctx.record(f"identity-{slug}", report.to_summary())
        ctx.add_check(
            f"D_t Y_t = Z_t for {spec.name}",
            report.passed,
            report.max_residual,
            limit,
        )


def picard(ctx: ScenarioContext) -> None:
    view = ctx.ensemble()
    d = ctx.config.d
    n_iter = ctx.param_int("n_iter")
    spec = BsdeSpec.affine(
        ctx.param("alpha"),
        ctx.param("beta"),
        ctx.param("gamma"),
        BrownianTerminal.sine(),
        BrownianState(0, d),
        d=d,
    )
    basis = smooth_basis(ctx)
    iterated = solve_picard(spec, view, basis, n_iter)
    direct = solve_backward(spec, view, basis)

    diagnostics = iterated.diagnostics
    increments = diagnostics["picard_increments"]
    ratios = [math.nan, *diagnostics["picard_ratios"]]
    rows = [
        [i + 1, increment, ratio]
        for i, (increment, ratio) in enumerate(zip(increments, ratios, strict=True))
    ]
    ctx.store.write_csv(
        "picard-iterations.csv", ["iteration", "increment", "ratio"], rows
    )
    ctx.record("picard", diagnostics)

    ctx.add_check(
        "picard converged",
        diagnostics["converged_at"] is not None,
        float(diagnostics["iterations"]),
        float(n_iter),
    )
    gap = sup_rel_l2(iterated.Y, direct.Y)
    tol = ctx.param("tolerance")
    ctx.add_check("picard fixed point vs backward scheme", gap <= tol, gap, tol)
