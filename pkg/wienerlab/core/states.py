"""Марковские состояния, на которых строятся регрессии BSDE-решателя."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from wienerlab.core.exceptions import ValidationError
from wienerlab.core.forward_sde import SdeSpec, solve_sde, tangent_pairing
from wienerlab.core.pathspace import Direction, PathView, inner_H


class MarkovState(ABC):
    """
    Конечномерное описание состояния в узлах сетки.

    trajectory(view) возвращает массив (n_paths, N + 1, m); tangent(view, h)
    возвращает производную состояния вдоль сдвига h той же формы.
    """

    name: str = "state"

    @property
    @abstractmethod
    def dimension(self) -> int:
        raise NotImplementedError

    @abstractmethod
    def trajectory(self, view: PathView) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        raise NotImplementedError


def _check_component(component: int, view: PathView) -> None:
    if not 0 <= component < view.d:
        raise ValidationError(f"Компонента {component} вне диапазона [0, {view.d})")


# Состояние (W_t) по одной компоненте или по всем сразу
@dataclass(frozen=True, slots=True)
class BrownianState(MarkovState):
    component: int | None = 0
    d: int = 1
    name: str = "W_t"

    @property
    def dimension(self) -> int:
        return 1 if self.component is not None else self.d

    def trajectory(self, view: PathView) -> np.ndarray:
        if self.component is None:
            return view.paths
        _check_component(self.component, view)
        return view.paths[:, :, self.component : self.component + 1]

    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        cumulative = h.cumulative
        if self.component is not None:
            cumulative = cumulative[:, self.component : self.component + 1]
        return np.broadcast_to(cumulative[None], (view.n_paths, *cumulative.shape))


# Частичный винеровский интеграл W_t(k) = sum_{j<i} k'_j . dW_j
@dataclass(frozen=True, slots=True, eq=False)
class WienerIntegralState(MarkovState):
    k: Direction
    name: str = "W_t(k)"

    @property
    def dimension(self) -> int:
        return 1

    def trajectory(self, view: PathView) -> np.ndarray:
        steps = np.einsum("nid,id->ni", view.increments, self.k.density)
        out = np.zeros((view.n_paths, view.grid.n_steps + 1, 1))
        np.cumsum(steps, axis=1, out=out[:, 1:, 0])
        return out

    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        pairing = np.sum(self.k.density * h.density, axis=1) * h.grid.dt
        cumulative = np.concatenate([[0.0], np.cumsum(pairing)])
        return np.broadcast_to(
            cumulative[None, :, None], (view.n_paths, cumulative.shape[0], 1)
        )

    def total_pairing(self, h: Direction) -> float:
        return inner_H(self.k, h)


# Немарковский функционал, сделанный марковским: (W_t, int_0^t W ds)
@dataclass(frozen=True, slots=True)
class TimeIntegralState(MarkovState):
    component: int = 0
    name: str = "(W_t, int W ds)"

    @property
    def dimension(self) -> int:
        return 2

    def trajectory(self, view: PathView) -> np.ndarray:
        _check_component(self.component, view)
        w = view.paths[:, :, self.component]
        return self._stack(w, view.grid.dt)

    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        w = np.broadcast_to(
            h.cumulative[None, :, self.component],
            (view.n_paths, view.grid.n_steps + 1),
        )
        return self._stack(w, view.grid.dt)

    @staticmethod
    def _stack(w: np.ndarray, dt: np.ndarray) -> np.ndarray:
        integral = np.zeros_like(w)
        np.cumsum(w[:, :-1] * dt[None, :], axis=1, out=integral[:, 1:])
        return np.stack([w, integral], axis=2)


# Состояние X_t прямого уравнения; касательная через N^h
@dataclass(frozen=True, slots=True, eq=False)
class ForwardState(MarkovState):
    sde: SdeSpec
    component: int = 0
    name: str = "X_t"

    @property
    def dimension(self) -> int:
        return 1

    def trajectory(self, view: PathView) -> np.ndarray:
        return solve_sde(self.sde, view, self.component).values[:, :, None]

    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        path = solve_sde(self.sde, view, self.component)
        return tangent_pairing(self.sde, path, h)[:, :, None]


@dataclass(frozen=True, slots=True, eq=False)
class StackedState(MarkovState):
    parts: tuple[MarkovState, ...]
    name: str = "stacked"

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValidationError("Составное состояние не может быть пустым")

    @property
    def dimension(self) -> int:
        return sum(part.dimension for part in self.parts)

    def trajectory(self, view: PathView) -> np.ndarray:
        return np.concatenate([p.trajectory(view) for p in self.parts], axis=2)

    def tangent(self, view: PathView, h: Direction) -> np.ndarray:
        return np.concatenate([p.tangent(view, h) for p in self.parts], axis=2)
