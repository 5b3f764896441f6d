"""
Решатели BSDE Y_t = xi + int_t^T f(s, Y, Z) ds - int_t^T Z dW.

Обратная схема Эйлера с условными ожиданиями через регрессию, итерации
Пикара и эталонные решения для аффинного и квадратичного драйверов.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
from scipy.special import logsumexp

from wienerlab.core.exceptions import (
    BlowUpError,
    ContractViolationError,
    DivergenceError,
    ExponentOverflowError,
    GridMismatchError,
    NestedBudgetError,
    RegimeError,
    ValidationError,
)
from wienerlab.core.forward_sde import SdeSpec, solve_sde, tangent_pairing
from wienerlab.core.pathspace import Direction, PathView
from wienerlab.core.regression import (
    Projector,
    RegressionBasis,
    RegressionFit,
)
from wienerlab.core.states import ForwardState, MarkovState
from wienerlab.core.utils import validate_nonzero, validate_positive_int
from wienerlab.core.wiener_calculus import CylindricalFunctional, gradient_pairing
from wienerlab.decorators import log_action
from wienerlab.infra.settings import SettingsLoader

logger = logging.getLogger("wienerlab.bsde")

PathFunctional = Callable[[PathView], np.ndarray]
Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], Any]
DfPairing = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray], Any]
XiPairing = Callable[[PathView, Direction], np.ndarray]
Coefficient = float | Callable[[float, np.ndarray], Any]

_FD_STEP = 1e-5
_FD_RTOL = 1e-5
_SAMPLE_SEED = 1_299_709
_SAMPLE_TIMES = (0.0, 0.5)
_ORACLE_STREAM = 0x0AC1E
_CHUNK_PATHS = 2048
_EXP_LIMIT = 700.0


class Regime(StrEnum):
    LIPSCHITZ = "lipschitz"
    QUADRATIC = "quadratic"


def as_path_values(value: Any, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (n,))


def as_path_vectors(value: Any, n: int, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == n and d == 1:
        arr = arr[:, None]
    return np.broadcast_to(arr, (n, d))


# Терминальное условие xi = g(W_T^component) с гауссовскими формулами
@dataclass(frozen=True, slots=True)
class BrownianTerminal:
    g: Callable[[np.ndarray], Any]
    g_prime: Callable[[np.ndarray], Any]
    component: int = 0
    gaussian_mean: Callable[[np.ndarray, float], np.ndarray] | None = None
    gaussian_log_mgf: Callable[[float, np.ndarray, float], np.ndarray] | None = None
    name: str = "g(W_T)"

    def values(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return np.broadcast_to(np.asarray(self.g(w), dtype=float), w.shape)

    def __call__(self, view: PathView) -> np.ndarray:
        return self.values(view.paths[:, -1, self.component])

    # <D xi, h'> = g'(W_T) h(T)
    def pairing(self, view: PathView, h: Direction) -> np.ndarray:
        w = view.paths[:, -1, self.component]
        slope = np.broadcast_to(np.asarray(self.g_prime(w), dtype=float), w.shape)
        return slope * float(h.cumulative[-1, self.component])

    @staticmethod
    def linear(a: float = 1.0, b: float = 0.0, component: int = 0) -> BrownianTerminal:
        return BrownianTerminal(
            g=lambda w: a * w + b,
            g_prime=lambda w: np.full_like(w, a),
            component=component,
            gaussian_mean=lambda m, v: a * m + b,
            gaussian_log_mgf=lambda c, m, v: c * (a * m + b) + 0.5 * c**2 * a**2 * v,
            name=f"{a:g} W_T + {b:g}",
        )

    @staticmethod
    def square(component: int = 0) -> BrownianTerminal:
        def log_mgf(c: float, m: np.ndarray, v: float) -> np.ndarray:
            denom = 1.0 - 2.0 * c * v
            if denom <= 0:
                raise ValidationError("exp(c W_T^2) не интегрируема при 2cT >= 1")
            return c * m**2 / denom - 0.5 * math.log(denom)

        return BrownianTerminal(
            g=lambda w: w**2,
            g_prime=lambda w: 2.0 * w,
            component=component,
            gaussian_mean=lambda m, v: m**2 + v,
            gaussian_log_mgf=log_mgf,
            name="W_T^2",
        )

    @staticmethod
    def sine(component: int = 0) -> BrownianTerminal:
        return BrownianTerminal(
            g=np.sin,
            g_prime=np.cos,
            component=component,
            gaussian_mean=lambda m, v: math.exp(-0.5 * v) * np.sin(m),
            name="sin W_T",
        )

    @staticmethod
    def cosine(component: int = 0) -> BrownianTerminal:
        return BrownianTerminal(
            g=np.cos,
            g_prime=lambda w: -np.sin(w),
            component=component,
            gaussian_mean=lambda m, v: math.exp(-0.5 * v) * np.cos(m),
            name="cos W_T",
        )

    @staticmethod
    def constant(k: float, component: int = 0) -> BrownianTerminal:
        return BrownianTerminal(
            g=lambda w: np.full_like(w, k),
            g_prime=np.zeros_like,
            component=component,
            gaussian_mean=lambda m, v: np.full_like(m, k),
            gaussian_log_mgf=lambda c, m, v: np.full_like(m, c * k),
            name=f"const {k:g}",
        )


def _zero_df(
    t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, tangent: np.ndarray
) -> np.ndarray:
    return np.zeros(y.shape[0])


def default_xi_pairing(terminal: PathFunctional) -> XiPairing | None:
    if isinstance(terminal, BrownianTerminal):
        return terminal.pairing
    if isinstance(terminal, CylindricalFunctional):
        return lambda view, h: gradient_pairing(terminal, h, view).value
    return None


# Спецификация BSDE: терминальное условие, драйвер, производные, режим
@dataclass(frozen=True, slots=True)
class BsdeSpec:
    terminal: PathFunctional
    driver: Driver
    driver_y: Driver
    driver_z: Driver
    markov_state: MarkovState | None
    regime: Regime = Regime.LIPSCHITZ
    df_pairing: DfPairing | None = None
    dxi_pairing: XiPairing | None = None
    growth_constant: float | None = None
    lipschitz_bound: float | None = None
    d: int = 1
    name: str = "bsde"

    def __post_init__(self) -> None:
        object.__setattr__(self, "regime", Regime(self.regime))
        validate_positive_int(self.d, "d")
        if self.regime is Regime.QUADRATIC and not self.growth_constant:
            raise ValidationError("Квадратичный режим требует константу роста C")
        self.check()

    # Проверка f_y, f_z разностями и условий режима в пробных точках
    def check(self, n_samples: int = 8) -> None:
        rng = np.random.Generator(np.random.Philox(_SAMPLE_SEED))
        m = self.markov_state.dimension if self.markov_state is not None else 1
        x = rng.standard_normal((n_samples, m))
        y = rng.standard_normal(n_samples)
        z = rng.standard_normal((n_samples, self.d))

        for t in _SAMPLE_TIMES:
            f_y = as_path_values(self.driver_y(t, x, y, z), n_samples)
            f_z = as_path_vectors(self.driver_z(t, x, y, z), n_samples, self.d)

            numeric_y = (
                as_path_values(self.driver(t, x, y + _FD_STEP, z), n_samples)
                - as_path_values(self.driver(t, x, y - _FD_STEP, z), n_samples)
            ) / (2.0 * _FD_STEP)
            worst = _rel_error(numeric_y, f_y)
            for j in range(self.d):
                bump = np.zeros_like(z)
                bump[:, j] = _FD_STEP
                numeric_z = (
                    as_path_values(self.driver(t, x, y, z + bump), n_samples)
                    - as_path_values(self.driver(t, x, y, z - bump), n_samples)
                ) / (2.0 * _FD_STEP)
                worst = max(worst, _rel_error(numeric_z, f_z[:, j]))
            if worst > _FD_RTOL:
                raise ValidationError(
                    f"Производные драйвера {self.name} не согласованы "
                    f"(относительная ошибка {worst:.2e})"
                )

            z_norm = np.sqrt((z**2).sum(axis=1))
            fz_norm = np.sqrt((f_z**2).sum(axis=1))
            if self.regime is Regime.LIPSCHITZ and self.lipschitz_bound is not None:
                bound = self.lipschitz_bound * (1.0 + 1e-9)
                if np.abs(f_y).max() > bound or fz_norm.max() > bound:
                    raise ValidationError(
                        f"Производные драйвера {self.name} превышают "
                        f"константу Липшица {self.lipschitz_bound:g}"
                    )
            if self.regime is Regime.QUADRATIC:
                c = float(self.growth_constant or 0.0) * (1.0 + 1e-9)
                if np.abs(f_y).max() > c or np.any(fz_norm > c * (1.0 + z_norm)):
                    raise ValidationError(
                        f"Драйвер {self.name} нарушает квадратичный рост"
                    )

    def driver_sensitivity(self) -> DfPairing:
        return self.df_pairing or _zero_df

    # f = 0
    @staticmethod
    def zero_driver(
        terminal: PathFunctional,
        markov_state: MarkovState,
        dxi_pairing: XiPairing | None = None,
        d: int = 1,
        name: str = "f=0",
    ) -> BsdeSpec:
        return BsdeSpec(
            terminal=terminal,
            driver=lambda t, x, y, z: np.zeros_like(y),
            driver_y=lambda t, x, y, z: np.zeros_like(y),
            driver_z=lambda t, x, y, z: np.zeros_like(z),
            markov_state=markov_state,
            df_pairing=_zero_df,
            dxi_pairing=dxi_pairing or default_xi_pairing(terminal),
            d=d,
            name=name,
        )

    # f = -beta y
    @staticmethod
    def linear_decay(
        beta: float,
        terminal: PathFunctional,
        markov_state: MarkovState,
        dxi_pairing: XiPairing | None = None,
        d: int = 1,
    ) -> BsdeSpec:
        return BsdeSpec.affine(
            alpha=0.0,
            beta=-beta,
            gamma=0.0,
            terminal=terminal,
            markov_state=markov_state,
            dxi_pairing=dxi_pairing,
            d=d,
            name=f"f=-{beta:g}y",
        )

    # f = alpha + beta y + gamma . z
    @staticmethod
    def affine(
        alpha: float,
        beta: float,
        gamma: float | Sequence[float],
        terminal: PathFunctional,
        markov_state: MarkovState,
        dxi_pairing: XiPairing | None = None,
        d: int = 1,
        name: str | None = None,
    ) -> BsdeSpec:
        g = np.broadcast_to(np.asarray(gamma, dtype=float), (d,)).copy()
        bound = max(abs(beta), float(np.linalg.norm(g)))
        return BsdeSpec(
            terminal=terminal,
            driver=lambda t, x, y, z: alpha + beta * y + z @ g,
            driver_y=lambda t, x, y, z: np.full_like(y, beta),
            driver_z=lambda t, x, y, z: np.broadcast_to(g, z.shape),
            markov_state=markov_state,
            df_pairing=_zero_df,
            dxi_pairing=dxi_pairing or default_xi_pairing(terminal),
            lipschitz_bound=bound or None,
            d=d,
            name=name or f"affine(a={alpha:g}, b={beta:g}, g={g.tolist()})",
        )

    # f = (c / 2) |z|^2
    @staticmethod
    def quadratic(
        c: float,
        terminal: PathFunctional,
        markov_state: MarkovState,
        dxi_pairing: XiPairing | None = None,
        d: int = 1,
    ) -> BsdeSpec:
        return BsdeSpec(
            terminal=terminal,
            driver=lambda t, x, y, z: 0.5 * c * (z**2).sum(axis=1),
            driver_y=lambda t, x, y, z: np.zeros_like(y),
            driver_z=lambda t, x, y, z: c * z,
            markov_state=markov_state,
            regime=Regime.QUADRATIC,
            df_pairing=_zero_df,
            dxi_pairing=dxi_pairing or default_xi_pairing(terminal),
            growth_constant=abs(c),
            d=d,
            name=f"f=({c:g}/2)|z|^2",
        )


def _rel_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    return float((np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))).max())


def forward_backward_spec(
    sde: SdeSpec,
    g: Callable[[np.ndarray], Any],
    g_prime: Callable[[np.ndarray], Any],
    beta: float = 0.0,
    kappa: float = 0.0,
    component: int = 0,
    d: int = 1,
) -> BsdeSpec:
    """
    Прямо-обратная система: xi = g(X_T), f = -beta y + kappa X_t.

    Производные по направлению идут через касательный процесс N^h прямого
    уравнения: <D xi, h'> = g'(X_T) N^h_T, <D f, h'> = kappa N^h_t.
    """
    state = ForwardState(sde, component)

    def terminal(view: PathView) -> np.ndarray:
        return np.asarray(g(solve_sde(sde, view, component).terminal), dtype=float)

    def dxi(view: PathView, h: Direction) -> np.ndarray:
        path = solve_sde(sde, view, component)
        tangent = tangent_pairing(sde, path, h)
        return np.asarray(g_prime(path.terminal), dtype=float) * tangent[:, -1]

    def df(
        t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, tangent: np.ndarray
    ) -> np.ndarray:
        return kappa * tangent[:, 0]

    bound = max(abs(beta), 0.0)
    return BsdeSpec(
        terminal=terminal,
        driver=lambda t, x, y, z: -beta * y + kappa * x[:, 0],
        driver_y=lambda t, x, y, z: np.full_like(y, -beta),
        driver_z=lambda t, x, y, z: np.zeros_like(z),
        markov_state=state,
        df_pairing=df,
        dxi_pairing=dxi,
        lipschitz_bound=bound or None,
        d=d,
        name=f"fbsde[{sde.name}]",
    )


@dataclass(frozen=True, slots=True, eq=False)
class StepFit:
    projector: Projector
    cond_fit: RegressionFit
    z_fit: RegressionFit


@dataclass(frozen=True, slots=True, eq=False)
class SolutionValues:
    Y: np.ndarray
    Z: np.ndarray


# Решение (Y, Z) вместе с регрессионными функционалами по шагам
@dataclass(frozen=True, slots=True, eq=False)
class BackwardSolution:
    spec: BsdeSpec
    view: PathView
    basis: RegressionBasis
    Y: np.ndarray
    Z: np.ndarray
    conditional: np.ndarray | None
    y_sweep: np.ndarray | None
    fits: tuple[StepFit | None, ...]
    method: str = "backward"
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def conditions(self) -> tuple[float, ...]:
        return tuple(fit.projector.condition for fit in self.fits if fit is not None)

    def evaluate(self, view: PathView) -> SolutionValues:
        """Применяет сохраненные регрессии к другому (например, сдвинутому) виду."""
        if self.method != "backward" or any(fit is None for fit in self.fits):
            raise ContractViolationError(
                "Повторное вычисление доступно только для обратной схемы"
            )
        spec = self.spec
        grid = view.grid
        if not grid.matches(self.view.grid):
            raise GridMismatchError("решение и ансамбль")
        states = _states(spec, view)
        n, dt = view.n_paths, grid.dt

        Y = np.empty((n, grid.n_steps + 1))
        Z = np.empty((n, grid.n_steps, spec.d))
        Y[:, -1] = as_path_values(spec.terminal(view), n)
        for i in reversed(range(grid.n_steps)):
            fit = self.fits[i]
            assert fit is not None
            t, x = float(grid.times[i]), states[:, i, :]
            cond = fit.cond_fit.predict(x)
            z = as_path_vectors(fit.z_fit.predict(x), n, spec.d)
            y1 = cond + as_path_values(spec.driver(t, x, cond, z), n) * dt[i]
            Y[:, i] = cond + as_path_values(spec.driver(t, x, y1, z), n) * dt[i]
            Z[:, i, :] = z
        return SolutionValues(Y=Y, Z=Z)

    def bounds(self) -> dict[str, float]:
        z_norm = np.sqrt((self.Z**2).sum(axis=2))
        return {
            "sup_abs_y": float(np.abs(self.Y).max()),
            "sup_norm_z": float(z_norm.max()),
            "max_condition": max(self.conditions, default=1.0),
        }

    # Квантили Y по узлам и Z (первая компонента) по шагам
    def quantile_rows(
        self, levels: Sequence[float] = (0.05, 0.5, 0.95)
    ) -> tuple[list[list[float]], list[list[float]]]:
        times = self.view.grid.times
        y_q = np.quantile(self.Y, levels, axis=0)
        z_q = np.quantile(self.Z[:, :, 0], levels, axis=0)
        y_rows = [
            [i, float(times[i]), float(self.Y[:, i].mean()), *map(float, y_q[:, i])]
            for i in range(times.shape[0])
        ]
        z_rows = [
            [i, float(times[i]), float(self.Z[:, i, 0].mean()), *map(float, z_q[:, i])]
            for i in range(times.shape[0] - 1)
        ]
        return y_rows, z_rows


def _states(spec: BsdeSpec, view: PathView) -> np.ndarray:
    if spec.markov_state is None:
        raise ContractViolationError(
            f"Для {spec.name} не задано марковское состояние регрессии"
        )
    if view.d != spec.d:
        raise GridMismatchError("размерность BSDE и ансамбля")
    return spec.markov_state.trajectory(view)


def _check_lipschitz_step(spec: BsdeSpec, dt: np.ndarray) -> None:
    if spec.regime is Regime.LIPSCHITZ and spec.lipschitz_bound is not None:
        if float(dt.max()) * spec.lipschitz_bound >= 1.0:
            raise RegimeError("шаг сетки слишком велик: dt * L >= 1")


def _check_quadratic_step(spec: BsdeSpec, z: np.ndarray, dt: float, step: int) -> None:
    if spec.regime is not Regime.QUADRATIC:
        return
    z_max = float(np.sqrt((z**2).sum(axis=1)).max())
    if dt * float(spec.growth_constant or 0.0) * (1.0 + z_max) >= 0.5:
        raise RegimeError(
            f"квадратичный режим: dt * C * (1 + |Z|) >= 1/2, |Z| = {z_max:.3g}",
            step=step,
        )


def backward_sweep(
    spec: BsdeSpec,
    view: PathView,
    basis: RegressionBasis,
    noise: np.ndarray | None = None,
) -> BackwardSolution:
    grid = view.grid
    states = _states(spec, view)
    noise = view.increments if noise is None else noise
    n, N, dt = view.n_paths, grid.n_steps, grid.dt
    _check_lipschitz_step(spec, dt)

    Y = np.empty((n, N + 1))
    Z = np.empty((n, N, spec.d))
    conditional = np.empty((n, N))
    y_sweep = np.empty((n, N))
    fits: list[StepFit | None] = [None] * N

    Y[:, N] = as_path_values(spec.terminal(view), n)
    if not np.all(np.isfinite(Y[:, N])):
        raise BlowUpError(step=N, module="bsde_solver")

    for i in reversed(range(N)):
        t, x = float(grid.times[i]), states[:, i, :]
        projector, design = basis.prepare(x, step=i)
        y_next = Y[:, i + 1]

        cond, cond_fit = projector.project(design, y_next)
        # E[(Y_{i+1} - E[Y_{i+1}|x]) dW_i | x] / dt: та же оценка Z, меньше дисперсия
        z_targets = (y_next - cond)[:, None] * noise[:, i, :] / dt[i]
        z, z_fit = projector.project(design, z_targets)
        _check_quadratic_step(spec, z, float(dt[i]), i)

        y1 = cond + as_path_values(spec.driver(t, x, cond, z), n) * dt[i]
        y = cond + as_path_values(spec.driver(t, x, y1, z), n) * dt[i]
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise BlowUpError(step=i, module="bsde_solver")

        Y[:, i] = y
        Z[:, i, :] = z
        conditional[:, i] = cond
        y_sweep[:, i] = y1
        fits[i] = StepFit(projector=projector, cond_fit=cond_fit, z_fit=z_fit)

    return BackwardSolution(
        spec=spec,
        view=view,
        basis=basis,
        Y=Y,
        Z=Z,
        conditional=conditional,
        y_sweep=y_sweep,
        fits=tuple(fits),
    )


@log_action("solve_backward", fields=("basis",))
def solve_backward(
    spec: BsdeSpec, view: PathView, basis: RegressionBasis | None = None
) -> BackwardSolution:
    """
    Обратная схема с регрессией по марковскому состоянию.

    На шаге i: cond = E[Y_{i+1} | x_i], Z_i = E[Y_{i+1} dW_i / dt | x_i],
    затем одна неподвижная итерация по y:
    y1 = cond + f(cond, Z_i) dt, Y_i = cond + f(y1, Z_i) dt.
    """
    solution = backward_sweep(spec, view, basis or RegressionBasis())
    if spec.regime is Regime.QUADRATIC:
        solution.diagnostics.update(solution.bounds())
    logger.info(
        "Solved %s: Y0=%.6g max_cond=%.3g",
        spec.name,
        float(solution.Y[:, 0].mean()),
        max(solution.conditions, default=1.0),
    )
    return solution


def _sup_l2(diff: np.ndarray) -> float:
    return float(np.sqrt((diff**2).mean(axis=0)).max())


@log_action("solve_picard", fields=("n_iter",))
def solve_picard(
    spec: BsdeSpec,
    view: PathView,
    basis: RegressionBasis | None,
    n_iter: int,
    tol: float = 1e-10,
) -> BackwardSolution:
    """
    Итерации Пикара с Y^0 = Z^0 = 0 и замороженным драйвером.

    Каждая итерация решает линейную задачу
    Y^n_i = E[Y^n_{i+1} | x_i] + f(t_i, x_i, Y^{n-1}_i, Z^{n-1}_i) dt.
    Остановка, когда sup_i ||Y^n_i - Y^{n-1}_i||_2 <= tol * max(1, ||Y^n||).
    """
    if spec.regime is not Regime.LIPSCHITZ:
        raise RegimeError("итерации Пикара реализованы только для липшицева режима")
    if isinstance(n_iter, bool) or not isinstance(n_iter, int) or n_iter < 0:
        raise ValidationError("n_iter должен быть неотрицательным целым числом")
    basis = basis or RegressionBasis()
    grid = view.grid
    n, N, dt = view.n_paths, grid.n_steps, grid.dt

    Y_prev = np.zeros((n, N + 1))
    Z_prev = np.zeros((n, N, spec.d))
    diagnostics: dict[str, Any] = {
        "picard_increments": [],
        "picard_ratios": [],
        "converged_at": None,
        "iterations": 0,
    }
    if n_iter == 0:
        return BackwardSolution(
            spec=spec,
            view=view,
            basis=basis,
            Y=Y_prev,
            Z=Z_prev,
            conditional=None,
            y_sweep=None,
            fits=(None,) * N,
            method="picard",
            diagnostics=diagnostics,
        )

    _check_lipschitz_step(spec, dt)
    states = _states(spec, view)
    terminal = as_path_values(spec.terminal(view), n)
    projectors: list[Projector] = []
    for i in range(N):
        projector, _ = basis.prepare(states[:, i, :], step=i)
        projectors.append(projector)

    fits: list[StepFit | None] = [None] * N
    increments: list[float] = diagnostics["picard_increments"]
    ratios: list[float] = diagnostics["picard_ratios"]
    for iteration in range(1, n_iter + 1):
        Y = np.empty((n, N + 1))
        Z = np.empty((n, N, spec.d))
        Y[:, N] = terminal
        for i in reversed(range(N)):
            t, x = float(grid.times[i]), states[:, i, :]
            projector = projectors[i]
            design = projector.transform.design(x)
            y_next = Y[:, i + 1]
            cond, cond_fit = projector.project(design, y_next)
            z_targets = (y_next - cond)[:, None] * view.increments[:, i, :] / dt[i]
            z, z_fit = projector.project(design, z_targets)
            frozen = as_path_values(spec.driver(t, x, Y_prev[:, i], Z_prev[:, i, :]), n)
            Y[:, i] = cond + frozen * dt[i]
            Z[:, i, :] = z
            fits[i] = StepFit(projector=projector, cond_fit=cond_fit, z_fit=z_fit)
        if not np.all(np.isfinite(Y)):
            raise BlowUpError(step=iteration, module="bsde_solver")

        increment = _sup_l2(Y - Y_prev)
        if increments:
            ratios.append(increment / increments[-1] if increments[-1] > 0 else 0.0)
        increments.append(increment)
        Y_prev, Z_prev = Y, Z
        diagnostics["iterations"] = iteration

        if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
            raise DivergenceError(ratios[-3:])
        if iteration > 1 and increment <= tol * max(1.0, _sup_l2(Y)):
            diagnostics["converged_at"] = iteration - 1
            break

    logger.info(
        "Picard %s: iterations=%d converged_at=%s",
        spec.name,
        diagnostics["iterations"],
        diagnostics["converged_at"],
    )
    return BackwardSolution(
        spec=spec,
        view=view,
        basis=basis,
        Y=Y_prev,
        Z=Z_prev,
        conditional=None,
        y_sweep=None,
        fits=tuple(fits),
        method="picard",
        diagnostics=diagnostics,
    )


# Эталонное решение: значения и стандартные ошибки по узлам
@dataclass(frozen=True, slots=True, eq=False)
class OracleSolution:
    Y: np.ndarray
    stderr: np.ndarray
    method: str


def _node_rng(seed: int, node: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(_ORACLE_STREAM, node))
    return np.random.Generator(np.random.Philox(sequence))


def _check_budget(cost: float) -> None:
    budget = float(SettingsLoader().get_int("NESTED_MC_BUDGET"))
    if cost > budget:
        raise NestedBudgetError(required=cost, budget=budget)


def _coef(value: Coefficient, t: float, w: np.ndarray) -> np.ndarray:
    if callable(value):
        return np.broadcast_to(np.asarray(value(t, w), dtype=float), w.shape)
    return np.full(w.shape, float(value))


def _require_terminal(xi: PathFunctional) -> BrownianTerminal:
    if not isinstance(xi, BrownianTerminal):
        raise ValidationError("Эталон поддерживает терминальные условия вида g(W_T)")
    return xi


@log_action("affine_oracle", fields=("n_inner", "seed"))
def affine_oracle(
    alpha: Coefficient,
    beta: Coefficient,
    gamma: Coefficient | Sequence[float],
    xi: PathFunctional,
    view: PathView,
    n_inner: int = 2000,
    seed: int | None = None,
) -> OracleSolution:
    """
    Эталон для f = alpha + beta y + gamma . z:
    Y_t = E[M_{t,T} xi + int_t^T M_{t,s} alpha_s ds | F_t],
    M_{t,s} = exp(int gamma dW - 1/2 int |gamma|^2 + int beta).

    Постоянные коэффициенты: аналитически под сдвинутым гауссовским законом,
    если у xi есть gaussian_mean, иначе вложенное моделирование конца
    траектории. Коэффициенты-функции (t, W_t): вложенное моделирование
    по шагам сетки.
    """
    terminal = _require_terminal(xi)
    c = terminal.component
    if not callable(gamma):
        gamma_arr = np.atleast_1d(np.asarray(gamma, dtype=float))
        gamma = float(gamma_arr[c] if gamma_arr.shape[0] > 1 else gamma_arr[0])

    seed = view.seed if seed is None else seed
    grid = view.grid
    w_paths = view.paths[:, :, c]
    constants = not any(callable(v) for v in (alpha, beta, gamma))

    if constants:
        a, b, g = float(alpha), float(beta), float(gamma)  # type: ignore[arg-type]
        if terminal.gaussian_mean is not None:
            return _affine_analytic(a, b, g, terminal, view)
        return _affine_endpoint(a, b, g, terminal, view, n_inner, seed)

    n_inner = validate_positive_int(n_inner, "n_inner")
    n, N = view.n_paths, grid.n_steps
    _check_budget(float(n) * n_inner * N * (N + 1) / 2.0)

    Y = np.empty((n, N + 1))
    stderr = np.zeros((n, N + 1))
    Y[:, N] = terminal(view)
    for i in range(N):
        rng = _node_rng(seed, i)
        for start in range(0, n, _CHUNK_PATHS):
            stop = min(start + _CHUNK_PATHS, n)
            w = np.repeat(w_paths[start:stop, i][:, None], n_inner, axis=1)
            log_m = np.zeros_like(w)
            integral = np.zeros_like(w)
            for j in range(i, N):
                t_j, dt_j = float(grid.times[j]), float(grid.dt[j])
                integral += np.exp(log_m) * _coef(alpha, t_j, w) * dt_j
                g_j = _coef(gamma, t_j, w)  # type: ignore[arg-type]
                dw = math.sqrt(dt_j) * rng.standard_normal(w.shape)
                log_m += g_j * dw - 0.5 * g_j**2 * dt_j + _coef(beta, t_j, w) * dt_j
                w = w + dw
            sample = np.exp(log_m) * terminal.values(w) + integral
            Y[start:stop, i] = sample.mean(axis=1)
            stderr[start:stop, i] = sample.std(axis=1, ddof=1) / math.sqrt(n_inner)
    return OracleSolution(Y=Y, stderr=stderr, method="nested-stepped")


def _alpha_part(alpha: float, beta: float, tau: float) -> float:
    if beta == 0.0:
        return alpha * tau
    return alpha * math.expm1(beta * tau) / beta


def _affine_analytic(
    alpha: float, beta: float, gamma: float, xi: BrownianTerminal, view: PathView
) -> OracleSolution:
    assert xi.gaussian_mean is not None
    grid = view.grid
    w_paths = view.paths[:, :, xi.component]
    Y = np.empty((view.n_paths, grid.n_steps + 1))
    Y[:, -1] = xi(view)
    for i in range(grid.n_steps):
        tau = grid.horizon - float(grid.times[i])
        mean = np.asarray(xi.gaussian_mean(w_paths[:, i] + gamma * tau, tau))
        Y[:, i] = math.exp(beta * tau) * mean + _alpha_part(alpha, beta, tau)
    return OracleSolution(Y=Y, stderr=np.zeros_like(Y), method="analytic")


def _affine_endpoint(
    alpha: float,
    beta: float,
    gamma: float,
    xi: BrownianTerminal,
    view: PathView,
    n_inner: int,
    seed: int,
) -> OracleSolution:
    n_inner = validate_positive_int(n_inner, "n_inner")
    grid = view.grid
    n, N = view.n_paths, grid.n_steps
    _check_budget(float(n) * (N + 1) * n_inner)

    w_paths = view.paths[:, :, xi.component]
    Y = np.empty((n, N + 1))
    stderr = np.zeros((n, N + 1))
    Y[:, N] = xi(view)
    for i in range(N):
        tau = grid.horizon - float(grid.times[i])
        normals = _node_rng(seed, i).standard_normal(n_inner)
        growth = math.exp(beta * tau)
        for start in range(0, n, _CHUNK_PATHS):
            stop = min(start + _CHUNK_PATHS, n)
            w_end = (
                w_paths[start:stop, i][:, None]
                + gamma * tau
                + math.sqrt(tau) * normals[None, :]
            )
            sample = growth * xi.values(w_end)
            Y[start:stop, i] = sample.mean(axis=1) + _alpha_part(alpha, beta, tau)
            stderr[start:stop, i] = sample.std(axis=1, ddof=1) / math.sqrt(n_inner)
    return OracleSolution(Y=Y, stderr=stderr, method="nested-endpoint")


@log_action("quadratic_oracle", fields=("c", "n_inner", "seed"))
def quadratic_oracle(
    c: float,
    xi: PathFunctional,
    view: PathView,
    n_inner: int = 2000,
    seed: int | None = None,
) -> OracleSolution:
    """
    Эталон для f = (c/2)|z|^2 через экспоненциальную замену:
    Y_t = (1/c) log E[exp(c xi) | F_t].

    Если у xi есть gaussian_log_mgf, формула аналитическая; иначе вложенное
    моделирование с logsumexp и дельта-методом для стандартной ошибки.
    """
    c = validate_nonzero(c, "c")
    terminal = _require_terminal(xi)
    grid = view.grid
    n, N = view.n_paths, grid.n_steps
    w_paths = view.paths[:, :, terminal.component]

    Y = np.empty((n, N + 1))
    stderr = np.zeros((n, N + 1))
    Y[:, N] = terminal(view)

    if terminal.gaussian_log_mgf is not None:
        for i in range(N):
            tau = grid.horizon - float(grid.times[i])
            Y[:, i] = np.asarray(terminal.gaussian_log_mgf(c, w_paths[:, i], tau)) / c
        return OracleSolution(Y=Y, stderr=stderr, method="analytic")

    n_inner = validate_positive_int(n_inner, "n_inner")
    _check_budget(float(n) * (N + 1) * n_inner)
    seed = view.seed if seed is None else seed
    for i in range(N):
        tau = grid.horizon - float(grid.times[i])
        normals = _node_rng(seed, i).standard_normal(n_inner)
        for start in range(0, n, _CHUNK_PATHS):
            stop = min(start + _CHUNK_PATHS, n)
            w_end = w_paths[start:stop, i][:, None] + math.sqrt(tau) * normals[None, :]
            exponent = c * terminal.values(w_end)
            worst = float(np.abs(exponent).max())
            if worst > _EXP_LIMIT:
                raise ExponentOverflowError(worst)
            log_mean = logsumexp(exponent, axis=1) - math.log(n_inner)
            weights = np.exp(exponent - log_mean[:, None])
            Y[start:stop, i] = log_mean / c
            stderr[start:stop, i] = (
                weights.std(axis=1, ddof=1) / math.sqrt(n_inner) / abs(c)
            )
    return OracleSolution(Y=Y, stderr=stderr, method="nested-endpoint")
