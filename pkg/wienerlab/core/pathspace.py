"""
Дискретное винеровское пространство.

Сетки по времени, ансамбли броуновских траекторий, направления
Камерона-Мартина, оператор сдвига (ленивое представление без копирования
приращений), скалярные произведения и вес Камерона-Мартина.

Плотность направления кусочно-постоянна на ячейках сетки, поэтому все
тождества сдвига и интегралов выполняются точно, а не с ошибкой O(dt).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from wienerlab.core.exceptions import (
    ContractViolationError,
    GridMismatchError,
    ValidationError,
)
from wienerlab.core.utils import (
    validate_positive,
    validate_positive_int,
    validate_seed,
)
from wienerlab.decorators import log_action
from wienerlab.infra.settings import SettingsLoader

logger = logging.getLogger("wienerlab.pathspace")


def _readonly(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out


# Временная сетка t_0 = 0 < ... < t_N = T
@dataclass(frozen=True, slots=True, eq=False)
class Grid:
    times: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.shape[0] < 2:
            raise ValidationError("Сетка должна содержать хотя бы два узла")
        if times[0] != 0.0:
            raise ValidationError("Сетка должна начинаться с t_0 = 0")
        if not np.all(np.isfinite(times)) or np.any(np.diff(times) <= 0):
            raise ValidationError("Узлы сетки должны строго возрастать")
        object.__setattr__(self, "times", _readonly(times))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return int(self.times.shape[0] - 1)

    # Шаги dt_i = t_{i+1} - t_i, массив длины N
    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def is_uniform(self) -> bool:
        dt = self.dt
        return bool(np.allclose(dt, dt[0], rtol=1e-12, atol=0.0))

    def matches(self, other: Grid) -> bool:
        if self is other:
            return True
        return self.times.shape == other.times.shape and bool(
            np.array_equal(self.times, other.times)
        )

    # Индекс ближайшего узла к моменту t
    def index_of(self, t: float) -> int:
        if not 0.0 <= t <= self.horizon:
            raise ValidationError(f"Момент {t} вне отрезка [0, {self.horizon}]")
        return int(np.argmin(np.abs(self.times - t)))

    def __repr__(self) -> str:
        return f"Grid(T={self.horizon:g}, n_steps={self.n_steps})"


def make_grid(T: float, n_steps: int) -> Grid:
    horizon = validate_positive(T, "T")
    steps = validate_positive_int(n_steps, "n_steps")
    return Grid(np.linspace(0.0, horizon, steps + 1))


def _check_grid(left: Grid, right: Grid, what: str) -> None:
    if not left.matches(right):
        raise GridMismatchError(what)


@runtime_checkable
class PathView(Protocol):
    """Общий интерфейс базового и сдвинутого ансамбля."""

    @property
    def grid(self) -> Grid: ...

    @property
    def d(self) -> int: ...

    @property
    def n_paths(self) -> int: ...

    @property
    def seed(self) -> int: ...

    @property
    def increments(self) -> np.ndarray: ...

    @property
    def paths(self) -> np.ndarray: ...


# Ансамбль дискретизированных d-мерных броуновских траекторий
@dataclass(frozen=True, slots=True, eq=False)
class WienerEnsemble:
    grid: Grid
    increments: np.ndarray
    seed: int = 0
    _paths: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 3:
            raise ValidationError("Приращения должны иметь форму (n_paths, N, d)")
        if inc.shape[0] < 1 or inc.shape[2] < 1:
            raise ValidationError("Ансамбль должен содержать хотя бы одну траекторию")
        if inc.shape[1] != self.grid.n_steps:
            raise GridMismatchError("приращения ансамбля")
        if not np.all(np.isfinite(inc)):
            raise ValidationError("Приращения должны быть конечными числами")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    # Ансамбль из готовых приращений (копия, исходный массив не меняется)
    @staticmethod
    def from_increments(
        grid: Grid, increments: np.ndarray, seed: int = 0
    ) -> WienerEnsemble:
        return WienerEnsemble(
            grid=grid,
            increments=np.array(increments, dtype=float, copy=True),
            seed=validate_seed(seed),
        )

    @property
    def n_paths(self) -> int:
        return int(self.increments.shape[0])

    @property
    def d(self) -> int:
        return int(self.increments.shape[2])

    # Значения W(t_i) во всех узлах, W(t_0) = 0; вычисляются один раз
    @property
    def paths(self) -> np.ndarray:
        if self._paths is None:
            values = np.zeros((self.n_paths, self.grid.n_steps + 1, self.d))
            np.cumsum(self.increments, axis=1, out=values[:, 1:, :])
            values.setflags(write=False)
            object.__setattr__(self, "_paths", values)
        return self._paths  # type: ignore[return-value]

    @property
    def base(self) -> WienerEnsemble:
        return self

    def subset(self, n_paths: int) -> WienerEnsemble:
        count = validate_positive_int(n_paths, "n_paths")
        return WienerEnsemble(
            grid=self.grid, increments=self.increments[:count], seed=self.seed
        )

    def __repr__(self) -> str:
        return (
            f"WienerEnsemble({self.grid!r}, d={self.d}, "
            f"n_paths={self.n_paths}, seed={self.seed})"
        )


def _sample_block(
    out: np.ndarray,
    seed: int,
    block: int,
    start: int,
    stop: int,
    scale: np.ndarray,
) -> None:
    # Philox со spawn_key по номеру блока: поток блока не зависит от расписания
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,)))
    )
    shape = (stop - start, out.shape[1], out.shape[2])
    out[start:stop] = rng.standard_normal(shape) * scale[None, :, None]


@log_action("sample_ensemble", fields=("d", "n_paths", "seed"))
def sample_ensemble(
    grid: Grid,
    d: int,
    n_paths: int,
    seed: int,
    threads: int | None = None,
) -> WienerEnsemble:
    """
    Сэмплирует ансамбль броуновских приращений.

    Траектории разбиваются на блоки по SAMPLING_BLOCK_PATHS; каждый блок
    получает собственный поток Philox, поэтому результат зависит только от
    (grid, d, n_paths, seed) и не зависит от числа потоков.
    """
    dim = validate_positive_int(d, "d")
    count = validate_positive_int(n_paths, "n_paths")
    seed = validate_seed(seed)

    settings = SettingsLoader()
    block_paths = settings.get_int("SAMPLING_BLOCK_PATHS")
    workers = threads or settings.get_int("DEFAULT_THREADS")
    workers = validate_positive_int(workers, "threads")

    increments = np.empty((count, grid.n_steps, dim))
    scale = np.sqrt(grid.dt)
    bounds = [
        (block, start, min(start + block_paths, count))
        for block, start in enumerate(range(0, count, block_paths))
    ]

    if workers == 1 or len(bounds) == 1:
        for block, start, stop in bounds:
            _sample_block(increments, seed, block, start, stop, scale)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_sample_block, increments, seed, block, start, stop, scale)
                for block, start, stop in bounds
            ]
            for future in futures:
                future.result()

    logger.debug("Sampled %d blocks of up to %d paths", len(bounds), block_paths)
    return WienerEnsemble(grid=grid, increments=increments, seed=seed)


# Направление Камерона-Мартина, заданное плотностью на ячейках сетки
@dataclass(frozen=True, slots=True, eq=False)
class Direction:
    grid: Grid
    density: np.ndarray
    support_end: float | None = None

    def __post_init__(self) -> None:
        dens = np.asarray(self.density, dtype=float)
        if dens.ndim == 1:
            dens = dens[:, None]
        if dens.ndim != 2 or dens.shape[0] != self.grid.n_steps:
            raise GridMismatchError("плотность направления")
        if not np.all(np.isfinite(dens)):
            raise ValidationError("Плотность направления должна быть конечной")
        object.__setattr__(self, "density", _readonly(dens))

        # конец носителя: левый край первой ячейки, после которой плотность 0
        nonzero = np.flatnonzero(np.any(dens != 0.0, axis=1))
        computed = float(self.grid.times[nonzero[-1] + 1]) if nonzero.size else 0.0
        if self.support_end is None:
            object.__setattr__(self, "support_end", computed)
        else:
            declared = float(self.support_end)
            if declared + 1e-12 < computed:
                raise ValidationError(
                    "Плотность направления отлична от нуля после support_end"
                )
            object.__setattr__(self, "support_end", declared)

    @property
    def d(self) -> int:
        return int(self.density.shape[1])

    # Кумулятивная функция h(t_i) = sum_{j<i} h'(t_j) dt_j, h(0) = 0
    @property
    def cumulative(self) -> np.ndarray:
        out = np.zeros((self.grid.n_steps + 1, self.d))
        np.cumsum(self.density * self.grid.dt[:, None], axis=0, out=out[1:])
        return out

    @property
    def increments(self) -> np.ndarray:
        return self.density * self.grid.dt[:, None]

    def norm_sq(self) -> float:
        return inner_H(self, self)

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    @property
    def is_zero(self) -> bool:
        return not bool(np.any(self.density))

    def scaled(self, factor: float) -> Direction:
        return Direction(self.grid, self.density * float(factor))

    # Обнуление плотности на ячейках с левым концом >= t
    def truncate(self, t: float) -> Direction:
        mask = self.grid.times[:-1] < t
        end = max(min(float(t), float(self.support_end or 0.0)), 0.0)
        return Direction(self.grid, self.density * mask[:, None], support_end=end)

    def __add__(self, other: Direction) -> Direction:
        _check_grid(self.grid, other.grid, "сумма направлений")
        if self.d != other.d:
            raise GridMismatchError("размерность направлений")
        return Direction(self.grid, self.density + other.density)

    def __neg__(self) -> Direction:
        return self.scaled(-1.0)

    def same_as(self, other: Direction) -> bool:
        if self is other:
            return True
        return (
            self.grid.matches(other.grid)
            and self.density.shape == other.density.shape
            and bool(np.array_equal(self.density, other.density))
        )

    @staticmethod
    def from_density(grid: Grid, density: np.ndarray | float, d: int = 1) -> Direction:
        dens = np.asarray(density, dtype=float)
        if dens.ndim == 0:
            dens = np.full((grid.n_steps, d), float(dens))
        return Direction(grid, dens)

    # Плотность, вычисленная в левых точках ячеек
    @staticmethod
    def from_function(
        grid: Grid,
        fn: Callable[[np.ndarray], np.ndarray | float],
        d: int = 1,
    ) -> Direction:
        left = grid.times[:-1]
        values = np.asarray(fn(left), dtype=float)
        if values.ndim == 0:
            values = np.full((grid.n_steps, d), float(values))
        elif values.ndim == 1:
            values = np.repeat(values[:, None], d, axis=1)
        return Direction(grid, values)

    @staticmethod
    def zero(grid: Grid, d: int = 1) -> Direction:
        return Direction(grid, np.zeros((grid.n_steps, d)))

    @staticmethod
    def constant(
        grid: Grid, value: float = 1.0, d: int = 1, component: int | None = None
    ) -> Direction:
        dens = np.zeros((grid.n_steps, d))
        if component is None:
            dens[:] = value
        else:
            dens[:, _component(component, d)] = value
        return Direction(grid, dens)

    # Индикатор [start, end): ячейки, левый конец которых попал в отрезок
    @staticmethod
    def indicator(
        grid: Grid,
        start: float,
        end: float,
        value: float = 1.0,
        d: int = 1,
        component: int = 0,
    ) -> Direction:
        if end <= start:
            raise ValidationError("Конец индикатора должен быть больше начала")
        left = grid.times[:-1]
        mask = (left >= start - 1e-12) & (left < end - 1e-12)
        dens = np.zeros((grid.n_steps, d))
        dens[mask, _component(component, d)] = value
        return Direction(grid, dens, support_end=min(float(end), grid.horizon))

    # Линейная плотность slope * t на [start, end)
    @staticmethod
    def ramp(
        grid: Grid,
        slope: float,
        start: float = 0.0,
        end: float | None = None,
        d: int = 1,
        component: int = 0,
    ) -> Direction:
        stop = grid.horizon if end is None else float(end)
        left = grid.times[:-1]
        mask = (left >= start - 1e-12) & (left < stop - 1e-12)
        dens = np.zeros((grid.n_steps, d))
        dens[mask, _component(component, d)] = slope * left[mask]
        return Direction(grid, dens)

    @staticmethod
    def bump(
        grid: Grid,
        end_index: int,
        width: int = 4,
        d: int = 1,
        component: int = 0,
    ) -> Direction:
        """
        Узкий нормированный импульс на ячейках перед узлом end_index.

        Масса импульса равна 1, то есть h(t_end) = 1; у левого края сетки
        импульс укорачивается до доступных ячеек.
        """
        if isinstance(width, bool) or not isinstance(width, int) or width < 1:
            raise ValidationError("Ширина импульса должна быть не меньше одной ячейки")
        if not 1 <= end_index <= grid.n_steps:
            raise ValidationError("Импульс должен заканчиваться во внутреннем узле")
        first = max(0, end_index - width)
        mass = float(grid.times[end_index] - grid.times[first])
        dens = np.zeros((grid.n_steps, d))
        dens[first:end_index, _component(component, d)] = 1.0 / mass
        return Direction(grid, dens, support_end=float(grid.times[end_index]))


def _component(component: int, d: int) -> int:
    if not 0 <= component < d:
        raise ValidationError(f"Компонента {component} вне диапазона [0, {d})")
    return component


def inner_H(h1: Direction, h2: Direction) -> float:
    _check_grid(h1.grid, h2.grid, "скалярное произведение направлений")
    if h1.d != h2.d:
        raise GridMismatchError("размерность направлений")
    return float(np.sum(h1.density * h2.density * h1.grid.dt[:, None]))


def _check_view(h: Direction, view: PathView) -> None:
    _check_grid(h.grid, view.grid, "направление и ансамбль")
    if h.d != view.d:
        raise GridMismatchError("размерность направления и ансамбля")


# Сдвинутый ансамбль omega + eps * h: ленивое представление над базой
@dataclass(frozen=True, slots=True, eq=False)
class ShiftedEnsemble:
    base: WienerEnsemble
    direction: Direction
    epsilon: float

    @property
    def grid(self) -> Grid:
        return self.base.grid

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def n_paths(self) -> int:
        return self.base.n_paths

    @property
    def seed(self) -> int:
        return self.base.seed

    @property
    def increments(self) -> np.ndarray:
        return self.base.increments + self.epsilon * self.direction.increments[None]

    @property
    def paths(self) -> np.ndarray:
        return self.base.paths + self.epsilon * self.direction.cumulative[None]

    def __repr__(self) -> str:
        return f"ShiftedEnsemble({self.base!r}, epsilon={self.epsilon:g})"


def shift(view: PathView, h: Direction, epsilon: float) -> ShiftedEnsemble:
    _check_view(h, view)
    eps = float(epsilon)
    if not math.isfinite(eps):
        raise ValidationError("epsilon должен быть конечным числом")

    if isinstance(view, ShiftedEnsemble):
        # композиция сдвигов остается одноуровневым представлением над базой
        if view.direction.same_as(h):
            return ShiftedEnsemble(view.base, view.direction, view.epsilon + eps)
        combined = view.direction.scaled(view.epsilon) + h.scaled(eps)
        return ShiftedEnsemble(view.base, combined, 1.0)
    if isinstance(view, WienerEnsemble):
        return ShiftedEnsemble(view, h, eps)
    raise ValidationError("Сдвиг определен только для ансамблей траекторий")


def wiener_integral(h: Direction, view: PathView) -> np.ndarray:
    _check_view(h, view)
    if isinstance(view, ShiftedEnsemble):
        base_value = wiener_integral(h, view.base)
        return base_value + view.epsilon * inner_H(h, view.direction)
    return np.einsum("nid,id->n", view.increments, h.density)


def cm_weight(h: Direction, view: PathView) -> np.ndarray:
    return np.exp(wiener_integral(h, view) - 0.5 * h.norm_sq())


# Интеграл Ито с левыми точками: sum_i Z_i . dW_i
def ito_integral(values: np.ndarray, view: PathView) -> np.ndarray:
    return np.einsum("nid,nid->n", values, view.increments)


# Адаптированный (или нет) ступенчатый процесс Z_i со значениями в R^d
@dataclass(frozen=True, slots=True)
class AdaptedProcess:
    name: str
    fn: Callable[[PathView], np.ndarray]
    adapted: bool = True

    def __call__(self, view: PathView) -> np.ndarray:
        values = np.asarray(self.fn(view), dtype=float)
        expected = (view.n_paths, view.grid.n_steps, view.d)
        if values.shape != expected:
            values = np.broadcast_to(values, expected)
        return values

    @staticmethod
    def constant(value: float | np.ndarray) -> AdaptedProcess:
        vec = np.atleast_1d(np.asarray(value, dtype=float))

        def fn(view: PathView) -> np.ndarray:
            shape = (view.n_paths, view.grid.n_steps, view.d)
            return np.broadcast_to(vec[None, None, :], shape)

        return AdaptedProcess("constant", fn)

    # Z_i = W(t_i): значение в левом конце ячейки
    @staticmethod
    def brownian() -> AdaptedProcess:
        return AdaptedProcess("brownian", lambda view: view.paths[:, :-1, :])

    @staticmethod
    def supported_after(t: float, inner: AdaptedProcess) -> AdaptedProcess:
        def fn(view: PathView) -> np.ndarray:
            mask = view.grid.times[:-1] >= t - 1e-12
            return inner(view) * mask[None, :, None]

        return AdaptedProcess(f"{inner.name}|t>={t:g}", fn, inner.adapted)

    # Z_i = W(T): заглядывает в будущее
    @staticmethod
    def anticipating() -> AdaptedProcess:
        def fn(view: PathView) -> np.ndarray:
            terminal = view.paths[:, -1, :]
            return np.repeat(terminal[:, None, :], view.grid.n_steps, axis=1)

        return AdaptedProcess("anticipating", fn, adapted=False)


def drift_correction(
    Z: AdaptedProcess, h: Direction, view: PathView, epsilon: float = 1.0
) -> np.ndarray:
    """Поправка sum_i Z_i(omega + eps h) . h'(t_i) dt_i для каждой траектории."""
    shifted = shift(view, h, epsilon)
    return np.einsum("nid,id->n", Z(shifted), h.increments)


def shifted_stochastic_integral_identity(
    Z: AdaptedProcess, h: Direction, view: PathView
) -> np.ndarray:
    """
    Невязка тождества для сдвинутого стохастического интеграла.

    [int Z dW](omega + h) - int Z(omega + h) dW - int Z(omega + h) h' ds.
    Для адаптированных ступенчатых процессов невязка равна нулю с машинной
    точностью на каждой траектории.
    """
    if not Z.adapted:
        raise ContractViolationError(
            f"Процесс {Z.name} не адаптирован: тождество для сдвига не применимо"
        )
    _check_view(h, view)
    shifted = shift(view, h, 1.0)
    z_shifted = Z(shifted)

    lhs = ito_integral(z_shifted, shifted)
    integral = ito_integral(z_shifted, view)
    correction = np.einsum("nid,id->n", z_shifted, h.increments)
    return lhs - integral - correction
