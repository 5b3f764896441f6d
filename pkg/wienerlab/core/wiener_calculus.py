"""
Цилиндрические функционалы, градиент Маллявэна, оператор Скорохода и
проверки сходимости разностных отношений Гато.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np

from wienerlab.core.exceptions import GridMismatchError, ValidationError
from wienerlab.core.pathspace import (
    Direction,
    PathView,
    cm_weight,
    inner_H,
    shift,
    wiener_integral,
)
from wienerlab.core.utils import (
    lq_norm_and_stderr,
    mean_and_stderr,
    validate_exponent,
    validate_nonzero,
    validate_schedule,
)
from wienerlab.decorators import log_action
from wienerlab.infra.settings import SettingsLoader

logger = logging.getLogger("wienerlab.calculus")

PathFunctional = Callable[[PathView], np.ndarray]

_FD_STEP = 1e-5
_FD_RTOL = 1e-6
_SAMPLE_SEED = 7_340_033
_ROUNDOFF_REL = 1e-9


class GrowthTag(StrEnum):
    BOUNDED = "bounded"
    POLYNOMIAL = "polynomial"


def _as_paths(value: Any, n_paths: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (n_paths,))


# Цилиндрический функционал F = f(W(h_1), ..., W(h_n))
@dataclass(frozen=True, slots=True)
class CylindricalFunctional:
    directions: tuple[Direction, ...]
    f: Callable[..., Any]
    partials: tuple[Callable[..., Any], ...]
    growth_tag: GrowthTag = GrowthTag.POLYNOMIAL
    name: str = "F"

    def __post_init__(self) -> None:
        directions = tuple(self.directions)
        partials = tuple(self.partials)
        if not directions:
            raise ValidationError("Функционал должен зависеть хотя бы от одного W(h)")
        if len(partials) != len(directions):
            raise ValidationError(
                "Число частных производных должно совпадать с числом направлений"
            )
        first = directions[0]
        for h in directions[1:]:
            if not h.grid.matches(first.grid) or h.d != first.d:
                raise GridMismatchError("направления функционала")
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "partials", partials)
        object.__setattr__(self, "growth_tag", GrowthTag(self.growth_tag))
        self.check_partials()

    @property
    def arity(self) -> int:
        return len(self.directions)

    def arguments(self, view: PathView) -> list[np.ndarray]:
        return [wiener_integral(h, view) for h in self.directions]

    def __call__(self, view: PathView) -> np.ndarray:
        return _as_paths(self.f(*self.arguments(view)), view.n_paths)

    # Сверка частных производных с центральными разностями в случайных точках
    def check_partials(self, n_samples: int = 8) -> float:
        rng = np.random.Generator(np.random.Philox(_SAMPLE_SEED))
        samples = rng.standard_normal((self.arity, n_samples))
        worst = 0.0
        for i, partial in enumerate(self.partials):
            up = samples.copy()
            down = samples.copy()
            up[i] += _FD_STEP
            down[i] -= _FD_STEP
            numeric = (
                _as_paths(self.f(*up), n_samples) - _as_paths(self.f(*down), n_samples)
            ) / (2.0 * _FD_STEP)
            analytic = _as_paths(partial(*samples), n_samples)
            rel = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))
            worst = max(worst, float(rel.max()))
        if worst > _FD_RTOL:
            raise ValidationError(
                f"Частные производные {self.name} не согласованы с f "
                f"(относительная ошибка {worst:.2e})"
            )
        return worst

    @staticmethod
    def linear(h: Direction, scale: float = 1.0) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,),
            lambda x: scale * x,
            (lambda x: np.full_like(x, scale),),
            GrowthTag.POLYNOMIAL,
            "W(h)",
        )

    @staticmethod
    def square(h: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,), lambda x: x**2, (lambda x: 2.0 * x,), GrowthTag.POLYNOMIAL, "W(h)^2"
        )

    @staticmethod
    def sine(h: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,), np.sin, (np.cos,), GrowthTag.BOUNDED, "sin W(h)"
        )

    @staticmethod
    def cosine(h: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,), np.cos, (lambda x: -np.sin(x),), GrowthTag.BOUNDED, "cos W(h)"
        )

    @staticmethod
    def tanh(h: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,),
            np.tanh,
            (lambda x: 1.0 / np.cosh(x) ** 2,),
            GrowthTag.BOUNDED,
            "tanh W(h)",
        )

    @staticmethod
    def exponential(h: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,), np.exp, (np.exp,), GrowthTag.POLYNOMIAL, "exp W(h)"
        )

    @staticmethod
    def constant(h: Direction, value: float) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h,),
            lambda x: np.full_like(x, value),
            (np.zeros_like,),
            GrowthTag.BOUNDED,
            f"const {value:g}",
        )

    # Произведение W(h_1) * sin W(h_2): функционал от двух направлений
    @staticmethod
    def product_sine(h1: Direction, h2: Direction) -> CylindricalFunctional:
        return CylindricalFunctional(
            (h1, h2),
            lambda x, y: x * np.sin(y),
            (lambda x, y: np.sin(y), lambda x, y: x * np.cos(y)),
            GrowthTag.POLYNOMIAL,
            "W(h1) sin W(h2)",
        )


def evaluate(F: CylindricalFunctional, view: PathView) -> np.ndarray:
    return F(view)


@dataclass(frozen=True, slots=True)
class GradientPairing:
    value: np.ndarray
    direction: Direction


# <grad F, k>_H = sum_i f_{x_i}(W(h_1), ...) <h_i, k>_H
def gradient_pairing(
    F: CylindricalFunctional, k: Direction, view: PathView
) -> GradientPairing:
    args = F.arguments(view)
    total = np.zeros(view.n_paths)
    for h, partial in zip(F.directions, F.partials, strict=True):
        weight = inner_H(h, k)
        if weight != 0.0:
            total = total + weight * _as_paths(partial(*args), view.n_paths)
    return GradientPairing(value=total, direction=k)


# delta(G h) = G W(h) - <grad G, h>_H
def skorohod_product(
    G: CylindricalFunctional, h: Direction, view: PathView
) -> np.ndarray:
    return G(view) * wiener_integral(h, view) - gradient_pairing(G, h, view).value


def gateaux_quotient(
    F_eval: PathFunctional,
    view: PathView,
    h: Direction,
    epsilon: float,
    central: bool = False,
) -> np.ndarray:
    """
    Разностное отношение (F(omega + eps h) - F(omega)) / eps по траекториям.

    Обе части вычисляются на одних и тех же приращениях. При central=True
    используется симметричная разность (F(omega + eps h) - F(omega - eps h)) / 2eps.
    """
    eps = validate_nonzero(epsilon, "epsilon")
    upper = np.asarray(F_eval(shift(view, h, eps)), dtype=float)
    if central:
        lower = np.asarray(F_eval(shift(view, h, -eps)), dtype=float)
        return (upper - lower) / (2.0 * eps)
    return (upper - np.asarray(F_eval(view), dtype=float)) / eps


# Отчет о сходимости разностных отношений по расписанию eps
@dataclass(frozen=True, slots=True)
class ConvergenceReport:
    label: str
    eps_schedule: tuple[float, ...]
    q: float
    errors: tuple[float, ...]
    stderrs: tuple[float, ...]
    slope: float
    passed: bool
    tolerance: float
    n_paths: int
    seed: int
    extra: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate_schedule(self.eps_schedule)
        if len(self.errors) != len(self.eps_schedule):
            raise ValidationError("Число ошибок должно совпадать с длиной расписания")
        if any(e < 0 or math.isnan(e) for e in self.errors):
            raise ValidationError("Ошибки сходимости должны быть неотрицательными")

    @property
    def columns(self) -> list[str]:
        return ["eps", "lq_error", "stderr", *self.extra.keys()]

    def rows(self) -> list[list[float]]:
        out = []
        for i, eps in enumerate(self.eps_schedule):
            row = [eps, self.errors[i], self.stderrs[i]]
            row.extend(values[i] for values in self.extra.values())
            out.append(row)
        return out

    def to_summary(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "q": self.q,
            "slope": None if math.isnan(self.slope) else round(self.slope, 6),
            "passed": self.passed,
            "tolerance": self.tolerance,
            "final_error": self.errors[-1],
            "seed": self.seed,
            "n_paths": self.n_paths,
        }


def fit_slope(
    eps_schedule: Sequence[float], errors: Sequence[float], floor: float = 0.0
) -> float:
    """Наклон log(ошибка) от log(eps) по МНК; учитываются ошибки выше floor."""
    pairs = [
        (e, err) for e, err in zip(eps_schedule, errors, strict=True) if err > floor
    ]
    if len(pairs) < 2:
        return math.nan
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def convergence_verdict(
    errors: Sequence[float],
    stderrs: Sequence[float],
    tolerance: float,
    floor: float = 0.0,
) -> bool:
    """
    Вердикт сходимости.

    Ошибки не возрастают по расписанию (допуск: три суммарные стандартные
    ошибки соседних точек) и последняя ошибка не превышает tolerance.
    Ошибки не выше floor (уровень округления) считаются нулевыми.
    """
    for i in range(1, len(errors)):
        if errors[i] <= floor:
            continue
        slack = 3.0 * (stderrs[i - 1] + stderrs[i]) + 1e-12
        if errors[i] > errors[i - 1] + slack:
            return False
    return errors[-1] <= tolerance


# Допуск по умолчанию: 10 стандартных ошибок или доля CONVERGENCE_REL_FLOOR от масштаба
def default_tolerance(stderrs: Sequence[float], target_scale: float) -> float:
    floor = SettingsLoader().get_float("CONVERGENCE_REL_FLOOR")
    return max(10.0 * stderrs[-1], floor * abs(target_scale), 1e-12)


# Ошибки разностных отношений ниже этого уровня - шум округления
def roundoff_floor(target_scale: float) -> float:
    return _ROUNDOFF_REL * max(1.0, abs(target_scale))


def assemble_report(
    label: str,
    eps_schedule: Sequence[float],
    q: float,
    errors: Sequence[float],
    stderrs: Sequence[float],
    target_scale: float,
    n_paths: int,
    seed: int,
    tolerance: float | None = None,
    extra: dict[str, tuple[float, ...]] | None = None,
    expected_slope: float | None = None,
    slope_tolerance: float = 0.2,
) -> ConvergenceReport:
    tol = default_tolerance(stderrs, target_scale) if tolerance is None else tolerance
    floor = roundoff_floor(target_scale)
    slope = fit_slope(eps_schedule, errors, floor)
    passed = convergence_verdict(errors, stderrs, tol, floor)
    if expected_slope is not None and not math.isnan(slope):
        passed = passed and abs(slope - expected_slope) <= slope_tolerance
    report = ConvergenceReport(
        label=label,
        eps_schedule=tuple(float(e) for e in eps_schedule),
        q=float(q),
        errors=tuple(float(e) for e in errors),
        stderrs=tuple(float(s) for s in stderrs),
        slope=slope,
        passed=passed,
        tolerance=float(tol),
        n_paths=int(n_paths),
        seed=int(seed),
        extra=dict(extra or {}),
    )
    logger.info(
        "Convergence %s: final_error=%.3e slope=%.3f passed=%s",
        label,
        report.errors[-1],
        slope,
        passed,
    )
    return report


@log_action("convergence_test", fields=("q", "central", "label"))
def convergence_test(
    F_eval: PathFunctional,
    target: np.ndarray,
    view: PathView,
    h: Direction,
    eps_schedule: Sequence[float],
    q: float = 1.0,
    tolerance: float | None = None,
    central: bool = False,
    label: str = "gateaux",
    expected_slope: float | None = None,
) -> ConvergenceReport:
    """
    Оценивает E[|quotient_eps - target|^q]^{1/q} для каждого eps.

    Если tolerance не задан, берется max(10 * стандартная ошибка на
    наименьшем eps, CONVERGENCE_REL_FLOOR * ||target||_q): такой допуск
    переходит в себя при замене h -> lambda h, eps -> eps / lambda.
    """
    schedule = validate_schedule(eps_schedule)
    exponent = validate_exponent(q, "q")
    target_arr = np.asarray(target, dtype=float)

    base_value = np.asarray(F_eval(view), dtype=float)
    errors: list[float] = []
    stderrs: list[float] = []
    for eps in schedule:
        if central:
            quotient = gateaux_quotient(F_eval, view, h, eps, central=True)
        else:
            shifted = np.asarray(F_eval(shift(view, h, eps)), dtype=float)
            quotient = (shifted - base_value) / eps
        err, se = lq_norm_and_stderr(quotient - target_arr, exponent)
        errors.append(err)
        stderrs.append(se)

    scale, _ = lq_norm_and_stderr(target_arr, exponent)
    return assemble_report(
        label=label,
        eps_schedule=schedule,
        q=exponent,
        errors=errors,
        stderrs=stderrs,
        target_scale=scale,
        n_paths=view.n_paths,
        seed=view.seed,
        tolerance=tolerance,
        expected_slope=expected_slope,
    )


# Парная оценка разности двух средних на общих траекториях
@dataclass(frozen=True, slots=True)
class PairedEstimate:
    residual: float
    stderr: float
    lhs: float
    rhs: float

    def within(self, n_sigma: float = 3.0) -> bool:
        return self.residual <= n_sigma * self.stderr + 1e-12

    def to_dict(self) -> dict[str, float]:
        return {
            "residual": self.residual,
            "stderr": self.stderr,
            "lhs": self.lhs,
            "rhs": self.rhs,
        }


def _paired(left: np.ndarray, right: np.ndarray) -> PairedEstimate:
    diff_mean, diff_se = mean_and_stderr(left - right)
    return PairedEstimate(
        residual=abs(diff_mean),
        stderr=diff_se,
        lhs=float(np.mean(left)),
        rhs=float(np.mean(right)),
    )


def duality_residual(
    F: CylindricalFunctional,
    G: CylindricalFunctional,
    h: Direction,
    view: PathView,
) -> PairedEstimate:
    """|E[F delta(G h)] - E[G <grad F, h>_H]| с парной стандартной ошибкой."""
    if G.growth_tag is not GrowthTag.BOUNDED:
        raise ValidationError(
            f"Функционал {G.name} должен быть ограниченным для проверки двойственности"
        )
    left = F(view) * skorohod_product(G, h, view)
    right = G(view) * gradient_pairing(F, h, view).value
    return _paired(left, right)


def cameron_martin_gap(
    F_eval: PathFunctional, h: Direction, view: PathView
) -> PairedEstimate:
    """|E[F(omega + h)] - E[F(omega) exp(W(h) - |h|^2 / 2)]| на общих траекториях."""
    shifted = np.asarray(F_eval(shift(view, h, 1.0)), dtype=float)
    weighted = np.asarray(F_eval(view), dtype=float) * cm_weight(h, view)
    return _paired(shifted, weighted)
