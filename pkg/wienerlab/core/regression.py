"""
Условные математические ожидания методом наименьших квадратов.

Признаки стандартизуются по выборке, почти постоянные столбцы
отбрасываются, базис составляют произведения полиномов Эрмита
(вероятностная нормировка) полной степени не выше degree.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e
from scipy.linalg import cho_factor, cho_solve

from wienerlab.core.exceptions import SingularRegressionError, ValidationError
from wienerlab.core.utils import validate_non_negative, validate_positive_int
from wienerlab.infra.settings import SettingsLoader

logger = logging.getLogger("wienerlab.regression")

_CONSTANT_RTOL = 1e-10


def _exponents(n_vars: int, degree: int) -> tuple[tuple[int, ...], ...]:
    if n_vars == 0:
        return ((),)
    out = [
        alpha
        for alpha in itertools.product(range(degree + 1), repeat=n_vars)
        if sum(alpha) <= degree
    ]
    out.sort(key=lambda alpha: (sum(alpha), alpha))
    return tuple(out)


# Преобразование признаков в матрицу плана
@dataclass(frozen=True, slots=True, eq=False)
class FeatureTransform:
    mean: np.ndarray
    scale: np.ndarray
    kept: tuple[int, ...]
    exponents: tuple[tuple[int, ...], ...]
    degree: int

    @property
    def size(self) -> int:
        return len(self.exponents)

    def design(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        if not self.kept:
            return np.ones((n, 1))

        z = (x[:, list(self.kept)] - self.mean) / self.scale
        vanders = [
            hermite_e.hermevander(z[:, j], self.degree) for j in range(z.shape[1])
        ]
        design = np.empty((n, self.size))
        for col, alpha in enumerate(self.exponents):
            column = np.ones(n)
            for j, power in enumerate(alpha):
                if power:
                    column = column * vanders[j][:, power]
            design[:, col] = column
        return design


@dataclass(frozen=True, slots=True, eq=False)
class RegressionFit:
    transform: FeatureTransform
    coef: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.transform.design(features) @ self.coef


# Разложение нормальных уравнений для одного шага; переиспользуется для Y и Z
@dataclass(frozen=True, slots=True, eq=False)
class Projector:
    transform: FeatureTransform
    factor: tuple[np.ndarray, bool]
    condition: float
    n_rows: int

    def fit(self, design: np.ndarray, targets: np.ndarray) -> RegressionFit:
        rhs = design.T @ np.asarray(targets, dtype=float) / self.n_rows
        coef = cho_solve(self.factor, rhs)
        return RegressionFit(transform=self.transform, coef=coef)

    def project(
        self, design: np.ndarray, targets: np.ndarray
    ) -> tuple[np.ndarray, RegressionFit]:
        fit = self.fit(design, targets)
        return design @ fit.coef, fit


@dataclass(frozen=True, slots=True)
class RegressionBasis:
    degree: int = 3
    ridge: float = 1e-8
    cond_max: float | None = None

    def __post_init__(self) -> None:
        validate_positive_int(self.degree, "degree")
        validate_non_negative(self.ridge, "ridge")

    @property
    def condition_limit(self) -> float:
        if self.cond_max is not None:
            return float(self.cond_max)
        return SettingsLoader().get_float("REGRESSION_COND_MAX")

    def transform_for(self, features: np.ndarray) -> FeatureTransform:
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if not np.all(np.isfinite(x)):
            raise ValidationError("Признаки регрессии должны быть конечными")

        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        # почти постоянные признаки (например, W_0 = 0) не несут информации
        kept = tuple(
            j
            for j in range(x.shape[1])
            if scale[j] > _CONSTANT_RTOL * max(1.0, abs(float(mean[j])))
        )
        return FeatureTransform(
            mean=mean[list(kept)],
            scale=scale[list(kept)],
            kept=kept,
            exponents=_exponents(len(kept), self.degree),
            degree=self.degree,
        )

    def prepare(
        self, features: np.ndarray, step: int | None = None
    ) -> tuple[Projector, np.ndarray]:
        """
        Строит матрицу плана и факторизует нормальные уравнения.

        Возвращает проектор и матрицу плана; при числе обусловленности выше
        предела бросает SingularRegressionError.
        """
        transform = self.transform_for(features)
        design = transform.design(features)
        n = design.shape[0]
        gram = design.T @ design / n + self.ridge * np.eye(transform.size)
        condition = float(np.linalg.cond(gram))
        if not np.isfinite(condition) or condition > self.condition_limit:
            raise SingularRegressionError(step=step, condition=condition)
        try:
            factor = cho_factor(gram)
        except np.linalg.LinAlgError:
            raise SingularRegressionError(step=step, condition=condition) from None
        projector = Projector(
            transform=transform, factor=factor, condition=condition, n_rows=n
        )
        return projector, design
