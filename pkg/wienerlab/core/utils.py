from __future__ import annotations

import math
from collections.abc import Sequence
from typing import Final

import numpy as np

from wienerlab.core.exceptions import ValidationError

_MIN_SCHEDULE_POINTS: Final[int] = 4


# Валидация строго положительного вещественного параметра
def validate_positive(value: object, name: str) -> float:
    try:
        number = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValidationError(f"{name} должен быть числом") from None

    if not math.isfinite(number):
        raise ValidationError(f"{name} должен быть конечным числом")
    if number <= 0:
        raise ValidationError(f"{name} должен быть больше 0")
    return number


# Валидация неотрицательного вещественного параметра
def validate_non_negative(value: object, name: str) -> float:
    try:
        number = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValidationError(f"{name} должен быть числом") from None

    if not math.isfinite(number) or number < 0:
        raise ValidationError(f"{name} должен быть неотрицательным числом")
    return number


# Валидация положительного целого параметра (bool не считается целым)
def validate_positive_int(value: object, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int | np.integer):
        raise ValidationError(f"{name} должен быть целым числом")
    if value <= 0:
        raise ValidationError(f"{name} должен быть положительным целым числом")
    return int(value)


# Валидация зерна генератора (64-битное неотрицательное целое)
def validate_seed(value: object) -> int:
    if isinstance(value, bool) or not isinstance(value, int | np.integer):
        raise ValidationError("seed должен быть целым числом")
    if not 0 <= int(value) < 2**64:
        raise ValidationError("seed должен лежать в диапазоне [0, 2^64)")
    return int(value)


def validate_nonzero(value: object, name: str) -> float:
    try:
        number = float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValidationError(f"{name} должен быть числом") from None
    if not math.isfinite(number) or number == 0.0:
        raise ValidationError(f"{name} должен быть конечным и ненулевым")
    return number


# Проверка расписания eps: строго убывающие положительные значения
def validate_schedule(
    schedule: Sequence[float],
    min_points: int = _MIN_SCHEDULE_POINTS,
) -> tuple[float, ...]:
    """
    Нормализует расписание шагов eps.

    Правила:
    - не менее min_points значений;
    - все значения конечны и положительны;
    - расписание строго убывает.
    """
    try:
        values = tuple(float(e) for e in schedule)
    except (TypeError, ValueError):
        raise ValidationError("Расписание eps должно состоять из чисел") from None

    if len(values) < min_points:
        raise ValidationError(
            f"Расписание eps должно содержать не менее {min_points} значений"
        )
    for eps in values:
        if not math.isfinite(eps) or eps <= 0:
            raise ValidationError("Значения eps должны быть положительными")
    for prev, cur in zip(values, values[1:], strict=False):
        if cur >= prev:
            raise ValidationError("Расписание eps должно строго убывать")
    return values


# Диадическое расписание 2^-first ... 2^-last
def dyadic_schedule(first: int = 3, last: int = 10) -> tuple[float, ...]:
    if last < first:
        raise ValidationError("Последний показатель должен быть не меньше первого")
    return tuple(2.0 ** (-k) for k in range(first, last + 1))


# Проверка показателя нормы L^q
def validate_exponent(value: object, name: str, minimum: float = 1.0) -> float:
    number = validate_positive(value, name)
    if number < minimum:
        raise ValidationError(f"{name} должен быть не меньше {minimum}")
    return number


# Выборочное среднее и его стандартная ошибка
def mean_and_stderr(values: np.ndarray) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    n = arr.shape[0]
    mean = float(arr.mean())
    if n < 2:
        return mean, 0.0
    return mean, float(arr.std(ddof=1) / math.sqrt(n))


# Оценка нормы L^q по выборке и ее стандартная ошибка (дельта-метод)
def lq_norm_and_stderr(values: np.ndarray, q: float) -> tuple[float, float]:
    powered = np.abs(np.asarray(values, dtype=float)) ** q
    moment, moment_se = mean_and_stderr(powered)
    if moment <= 0.0:
        return 0.0, 0.0
    norm = moment ** (1.0 / q)
    return float(norm), float(norm / (q * moment) * moment_se)
