from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from wienerlab.core.exceptions import BlowUpError, ValidationError
from wienerlab.core.pathspace import Direction, PathView, shift
from wienerlab.core.utils import (
    lq_norm_and_stderr,
    validate_positive,
    validate_schedule,
)
from wienerlab.core.wiener_calculus import ConvergenceReport, assemble_report
from wienerlab.decorators import log_action

logger = logging.getLogger("wienerlab.forward")

Coefficient = Callable[[float, np.ndarray], Any]

_FD_STEP = 1e-5
_FD_RTOL = 1e-5
_SAMPLE_TIMES = (0.0, 0.3, 0.7, 1.0)
_SAMPLE_STATES = np.linspace(-2.0, 2.0, 9)


def _apply(fn: Coefficient, t: float, x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape)


# Спецификация скалярного SDE dX = b(t, X) dt + sigma(t, X) dW
@dataclass(frozen=True, slots=True)
class SdeSpec:
    x0: float
    b: Coefficient
    sigma: Coefficient
    b_x: Coefficient
    sigma_x: Coefficient
    k_b: float | None = None
    k_sigma: float | None = None
    name: str = "sde"

    def __post_init__(self) -> None:
        if not np.isfinite(self.x0):
            raise ValidationError("X0 должен быть конечным числом")
        for bound, label in ((self.k_b, "k_b"), (self.k_sigma, "k_sigma")):
            if bound is not None:
                validate_positive(bound, label)
        self.check()

    # Сверка производных b_x, sigma_x с разностями и с заявленными границами
    def check(self) -> None:
        x = _SAMPLE_STATES
        pairs = (
            (self.b, self.b_x, self.k_b, "b"),
            (self.sigma, self.sigma_x, self.k_sigma, "sigma"),
        )
        for t in _SAMPLE_TIMES:
            for fn, partial, bound, label in pairs:
                numeric = (
                    _apply(fn, t, x + _FD_STEP) - _apply(fn, t, x - _FD_STEP)
                ) / (2.0 * _FD_STEP)
                analytic = _apply(partial, t, x)
                rel = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))
                if float(rel.max()) > _FD_RTOL:
                    raise ValidationError(
                        f"Производная {label}_x в {self.name} не согласована с {label}"
                    )
                if bound is not None and float(np.abs(analytic).max()) > bound:
                    raise ValidationError(
                        f"|{label}_x| превышает заявленную границу {bound:g}"
                    )

    @staticmethod
    def geometric(mu: float, nu: float, x0: float = 1.0) -> SdeSpec:
        return SdeSpec(
            x0=x0,
            b=lambda t, x: mu * x,
            sigma=lambda t, x: nu * x,
            b_x=lambda t, x: mu,
            sigma_x=lambda t, x: nu,
            k_b=abs(mu) or None,
            k_sigma=abs(nu) or None,
            name=f"geometric(mu={mu:g}, nu={nu:g})",
        )

    @staticmethod
    def additive(sigma: float = 1.0, drift: float = 0.0, x0: float = 0.0) -> SdeSpec:
        return SdeSpec(
            x0=x0,
            b=lambda t, x: drift,
            sigma=lambda t, x: sigma,
            b_x=lambda t, x: 0.0,
            sigma_x=lambda t, x: 0.0,
            name=f"additive(sigma={sigma:g})",
        )

    @staticmethod
    def ornstein_uhlenbeck(
        kappa: float, theta: float, sigma: float, x0: float = 0.0
    ) -> SdeSpec:
        return SdeSpec(
            x0=x0,
            b=lambda t, x: kappa * (theta - x),
            sigma=lambda t, x: sigma,
            b_x=lambda t, x: -kappa,
            sigma_x=lambda t, x: 0.0,
            k_b=abs(kappa) or None,
            name=f"ou(kappa={kappa:g}, theta={theta:g})",
        )


# Решение SDE на ансамбле: значения X(t_i) во всех узлах
@dataclass(frozen=True, slots=True, eq=False)
class SdePath:
    values: np.ndarray
    spec: SdeSpec
    view: PathView
    component: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


@log_action("solve_sde", fields=("component",))
def solve_sde(spec: SdeSpec, view: PathView, component: int = 0) -> SdePath:
    """
    Явная схема Эйлера на узлах сетки ансамбля.

    Первое нечисловое значение прерывает расчет с номером шага.
    """
    if not 0 <= component < view.d:
        raise ValidationError(f"Компонента {component} вне диапазона [0, {view.d})")

    grid = view.grid
    dW = view.increments[:, :, component]
    dt = grid.dt
    values = np.empty((view.n_paths, grid.n_steps + 1))
    values[:, 0] = spec.x0

    for i in range(grid.n_steps):
        t = float(grid.times[i])
        x = values[:, i]
        nxt = x + _apply(spec.b, t, x) * dt[i] + _apply(spec.sigma, t, x) * dW[:, i]
        if not np.all(np.isfinite(nxt)):
            raise BlowUpError(step=i + 1, module="forward_sde")
        values[:, i + 1] = nxt

    values.setflags(write=False)
    return SdePath(values=values, spec=spec, view=view, component=component)


def tangent_pairing(spec: SdeSpec, X: SdePath, h: Direction) -> np.ndarray:
    """
    Касательный процесс N^h: производная схемы Эйлера вдоль сдвига h.

    N_{i+1} = N_i + N_i (b_x dt + sigma_x dW_i) + sigma h'_i dt, N_0 = 0.
    """
    view = X.view
    grid = view.grid
    if not h.grid.matches(grid):
        raise ValidationError("Направление задано на другой сетке")
    dW = view.increments[:, :, X.component]
    dt = grid.dt
    h_dot = h.density[:, X.component]

    tangent = np.zeros_like(X.values)
    for i in range(grid.n_steps):
        t = float(grid.times[i])
        x = X.values[:, i]
        n_i = tangent[:, i]
        growth = _apply(spec.b_x, t, x) * dt[i] + _apply(spec.sigma_x, t, x) * dW[:, i]
        nxt = n_i + n_i * growth + _apply(spec.sigma, t, x) * h_dot[i] * dt[i]
        if not np.all(np.isfinite(nxt)):
            raise BlowUpError(step=i + 1, module="forward_sde")
        tangent[:, i + 1] = nxt
    return tangent


@log_action("shift_remainder")
def shift_remainder(
    spec: SdeSpec,
    view: PathView,
    h: Direction,
    eps_schedule: Sequence[float],
    tolerance: float | None = None,
    component: int = 0,
) -> ConvergenceReport:
    """Норма L^1 от sup по сетке |(X(omega + eps h) - X) / eps - N^h|."""
    schedule = validate_schedule(eps_schedule)
    X = solve_sde(spec, view, component)
    tangent = tangent_pairing(spec, X, h)

    errors: list[float] = []
    stderrs: list[float] = []
    for eps in schedule:
        shifted = solve_sde(spec, shift(view, h, eps), component)
        remainder = (shifted.values - X.values) / eps - tangent
        err, se = lq_norm_and_stderr(np.abs(remainder).max(axis=1), 1.0)
        errors.append(err)
        stderrs.append(se)

    scale, _ = lq_norm_and_stderr(np.abs(tangent).max(axis=1), 1.0)
    return assemble_report(
        label=f"shift-remainder {spec.name}",
        eps_schedule=schedule,
        q=1.0,
        errors=errors,
        stderrs=stderrs,
        target_scale=scale,
        n_paths=view.n_paths,
        seed=view.seed,
        tolerance=tolerance,
    )
