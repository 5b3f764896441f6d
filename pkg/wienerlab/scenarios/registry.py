from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

from wienerlab.core.exceptions import ScenarioNotFoundError
from wienerlab.scenarios import library
from wienerlab.scenarios.context import ScenarioContext


# Встроенный сценарий: описание, проверяемое утверждение и значения по умолчанию
@dataclass(frozen=True, slots=True)
class ScenarioEntry:
    name: str
    description: str
    anchor: str
    runner: Callable[[ScenarioContext], None]
    defaults: dict[str, Any] = field(default_factory=dict)

    def config_defaults(self) -> dict[str, Any]:
        return {"scenario": {"name": self.name}, **self.defaults}


_SCENARIO_REGISTRY: dict[str, ScenarioEntry] = {
    "shift-identities": ScenarioEntry(
        name="shift-identities",
        description="Точные тождества сдвига для стохастических интегралов",
        anchor="сдвиг стохастического интеграла Ито вдоль направления Камерона-Мартина",
        runner=library.shift_identities,
        defaults={
            "grid": {"n_steps": 64},
            "ensemble": {"n_paths": 1_000},
            "parameters": {},
        },
    ),
    "cameron-martin": ScenarioEntry(
        name="cameron-martin",
        description="Формула Камерона-Мартина на цилиндрических функционалах",
        anchor="квазиинвариантность винеровской меры относительно сдвигов",
        runner=library.cameron_martin,
        defaults={
            "grid": {"n_steps": 64},
            "ensemble": {"n_paths": 100_000},
            "parameters": {"n_sigma": 3.0},
        },
    ),
    "theorem-4.1-cylindrical": ScenarioEntry(
        name="theorem-4.1-cylindrical",
        description="Сходимость отношений Гато к градиенту в L^q",
        anchor="характеризация D^{1,p} через разностные отношения по сдвигам",
        runner=library.cylindrical,
        defaults={
            "grid": {"n_steps": 64},
            "ensemble": {"n_paths": 20_000},
            "convergence": {"q": 1.0},
            "parameters": {"slope_tolerance": 0.2},
        },
    ),
    "skorohod-duality": ScenarioEntry(
        name="skorohod-duality",
        description="Двойственность градиента и оператора Скорохода",
        anchor="интегрирование по частям на винеровском пространстве",
        runner=library.skorohod_duality,
        defaults={
            "grid": {"n_steps": 64},
            "ensemble": {"n_paths": 100_000},
            "parameters": {"n_sigma": 3.0},
        },
    ),
    "forward-tangent": ScenarioEntry(
        name="forward-tangent",
        description="Касательный процесс прямого уравнения и остаток сдвига",
        anchor="производная решения SDE вдоль сдвига (линеаризованное уравнение)",
        runner=library.forward_tangent,
        defaults={
            "grid": {"n_steps": 128},
            "ensemble": {"n_paths": 10_000},
            "parameters": {
                "mu": 0.05,
                "nu": 0.2,
                "sigma": 0.3,
                "slope_tolerance": 0.2,
            },
        },
    ),
    "affine": ScenarioEntry(
        name="affine",
        description="Аффинная BSDE против явного эталона",
        anchor="явное решение линейной BSDE через ядро стохастической экспоненты",
        runner=library.affine,
        defaults={
            "grid": {"n_steps": 50},
            "ensemble": {"n_paths": 100_000},
            "regression": {"degree": 3},
            "parameters": {
                "alpha": 0.0,
                "beta": 0.5,
                "gamma": 0.0,
                "a": 1.0,
                "tolerance": 0.03,
                "z_tolerance": 0.05,
                "nested_paths": 64,
                "n_inner": 400,
            },
        },
    ),
    "theorem-5.1-lipschitz": ScenarioEntry(
        name="theorem-5.1-lipschitz",
        description="Производная Маллявэна решения липшицевой BSDE",
        anchor="дифференцируемость решения липшицевой BSDE по сдвигам, 1 < p < 2",
        runner=library.lipschitz,
        defaults={
            "grid": {"n_steps": 32},
            "ensemble": {"n_paths": 20_000},
            "convergence": {"p": 1.5},
            "parameters": {
                "alpha": 0.2,
                "beta": 0.5,
                "gamma": 0.3,
                "mu": 0.05,
                "nu": 0.2,
                "kappa": 0.1,
            },
        },
    ),
    "theorem-7.2-quadratic": ScenarioEntry(
        name="theorem-7.2-quadratic",
        description="Производная Маллявэна решения квадратичной BSDE",
        anchor="дифференцируемость ограниченного решения квадратичной BSDE, p > 1",
        runner=library.quadratic,
        defaults={
            "grid": {"n_steps": 64},
            "ensemble": {"n_paths": 50_000},
            "convergence": {"p": 1.5},
            "parameters": {
                "c": 1.0,
                "a": 0.5,
                "p_high": 3.0,
                "tolerance": 0.05,
                "z_tolerance": 0.03,
                "nested_paths": 200,
                "n_inner": 4_000,
            },
        },
    ),
    "markovian-identity": ScenarioEntry(
        name="markovian-identity",
        description="Диагональное тождество D_t Y_t = Z_t",
        anchor="след производной Маллявэна марковского решения на диагонали",
        runner=library.markovian_identity,
        defaults={
            "grid": {"n_steps": 50},
            "ensemble": {"n_paths": 50_000},
            "parameters": {
                "beta": 0.5,
                "c": 1.0,
                "a": 0.5,
                "width": 4,
                "threshold": 0.05,
                "exact_threshold": 0.03,
            },
        },
    ),
    "picard": ScenarioEntry(
        name="picard",
        description="Итерации Пикара для липшицевой BSDE",
        anchor="построение решения как предела последовательности линейных BSDE",
        runner=library.picard,
        defaults={
            "grid": {"n_steps": 50},
            "ensemble": {"n_paths": 20_000},
            "parameters": {
                "alpha": 0.2,
                "beta": 0.5,
                "gamma": 0.3,
                "n_iter": 30,
                "tolerance": 0.01,
            },
        },
    ),
}


def get_scenario(name: str) -> ScenarioEntry:
    if not isinstance(name, str) or not name.strip():
        raise ScenarioNotFoundError(str(name))
    entry = _SCENARIO_REGISTRY.get(name.strip().lower())
    if entry is None:
        raise ScenarioNotFoundError(name)
    return entry


def list_scenarios() -> list[ScenarioEntry]:
    return sorted(_SCENARIO_REGISTRY.values(), key=lambda entry: entry.name)
