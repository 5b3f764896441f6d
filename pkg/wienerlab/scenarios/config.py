"""
Конфигурация запуска сценария.

Файл TOML с таблицами [scenario], [grid], [ensemble], [convergence],
[regression], [[directions]], [parameters] и [output]. Неизвестные таблицы
и ключи отклоняются с указанием поля, синтаксические ошибки TOML с
номером строки.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
import tomllib
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, TypeVar

from wienerlab.core.exceptions import ConfigError, ValidationError
from wienerlab.core.pathspace import Direction, Grid
from wienerlab.core.utils import (
    dyadic_schedule,
    validate_non_negative,
    validate_positive,
    validate_positive_int,
    validate_schedule,
    validate_seed,
)
from wienerlab.infra.settings import SettingsLoader

R = TypeVar("R")

DirectionKind = Literal["constant", "ramp", "indicator"]

_TABLE_KEYS: dict[str, frozenset[str]] = {
    "scenario": frozenset({"name"}),
    "grid": frozenset({"T", "n_steps"}),
    "ensemble": frozenset({"d", "n_paths", "seed", "threads", "cache"}),
    "convergence": frozenset({"eps_schedule", "p", "q"}),
    "regression": frozenset({"degree", "ridge"}),
    "output": frozenset({"dir"}),
}
_FREE_TABLES = frozenset({"directions", "parameters"})
_DIRECTION_KEYS = frozenset({"kind", "value", "start", "end", "component"})
_DIRECTION_KINDS = ("constant", "ramp", "indicator")

_LINE_PATTERN = re.compile(r"line (\d+)")


# Перевод ошибки валидации в ошибку конфигурации с именем поля
def _checked(name: str, fn: Callable[..., R], *args: Any) -> R:
    try:
        return fn(*args)
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError(str(exc), field=name) from None


def _as_float(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise ConfigError("ожидается число", field=name)
    return float(value)


def _as_bool(value: Any, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError("ожидается true или false", field=name)
    return value


def _as_text(value: Any, name: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ConfigError("ожидается непустая строка", field=name)
    return value.strip()


# Описание направления сдвига в конфигурации
@dataclass(frozen=True, slots=True)
class DirectionConfig:
    kind: DirectionKind = "constant"
    value: float = 1.0
    start: float = 0.0
    end: float | None = None
    component: int = 0

    def build(self, grid: Grid, d: int) -> Direction:
        if self.kind == "constant":
            return Direction.constant(grid, self.value, d=d, component=self.component)
        end = grid.horizon if self.end is None else self.end
        if self.kind == "indicator":
            return Direction.indicator(
                grid, self.start, end, self.value, d=d, component=self.component
            )
        return Direction.ramp(
            grid, self.value, self.start, end, d=d, component=self.component
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "value": self.value,
            "start": self.start,
            "end": self.end,
            "component": self.component,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any], index: int) -> DirectionConfig:
        prefix = f"directions[{index}]"
        if not isinstance(data, Mapping):
            raise ConfigError("ожидается таблица", field=prefix)
        for key in data:
            if key not in _DIRECTION_KEYS:
                raise ConfigError("неизвестный ключ", field=f"{prefix}.{key}")

        kind = data.get("kind", "constant")
        if kind not in _DIRECTION_KINDS:
            raise ConfigError(
                f"тип направления должен быть одним из {', '.join(_DIRECTION_KINDS)}",
                field=f"{prefix}.kind",
            )
        end = data.get("end")
        component = data.get("component", 0)
        if isinstance(component, bool) or not isinstance(component, int):
            raise ConfigError("ожидается целое число", field=f"{prefix}.component")
        if component < 0:
            raise ConfigError(
                "компонента не может быть отрицательной", field=f"{prefix}.component"
            )
        start = _as_float(data.get("start", 0.0), f"{prefix}.start")
        end_value = None if end is None else _as_float(end, f"{prefix}.end")
        if end_value is not None and end_value <= start:
            raise ConfigError("конец должен быть больше начала", field=f"{prefix}.end")
        return DirectionConfig(
            kind=kind,
            value=_as_float(data.get("value", 1.0), f"{prefix}.value"),
            start=start,
            end=end_value,
            component=component,
        )


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    name: str
    T: float = 1.0
    n_steps: int = 64
    d: int = 1
    n_paths: int = 10_000
    seed: int = 0
    threads: int | None = None
    cache: bool = False
    eps_schedule: tuple[float, ...] = field(
        default_factory=lambda: dyadic_schedule(3, 8)
    )
    p: float = 1.5
    q: float = 1.0
    degree: int = 3
    ridge: float = 1e-8
    directions: tuple[DirectionConfig, ...] = ()
    parameters: dict[str, float] = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self) -> None:
        _checked("scenario.name", _as_text, self.name, "scenario.name")
        object.__setattr__(
            self, "T", _checked("grid.T", validate_positive, self.T, "T")
        )
        object.__setattr__(
            self,
            "n_steps",
            _checked("grid.n_steps", validate_positive_int, self.n_steps, "n_steps"),
        )
        object.__setattr__(
            self, "d", _checked("ensemble.d", validate_positive_int, self.d, "d")
        )
        object.__setattr__(
            self,
            "n_paths",
            _checked(
                "ensemble.n_paths", validate_positive_int, self.n_paths, "n_paths"
            ),
        )
        if self.n_paths < 2:
            raise ConfigError(
                "нужно не меньше двух траекторий", field="ensemble.n_paths"
            )
        object.__setattr__(
            self, "seed", _checked("ensemble.seed", validate_seed, self.seed)
        )
        if self.threads is not None:
            _checked("ensemble.threads", validate_positive_int, self.threads, "threads")
        object.__setattr__(
            self,
            "eps_schedule",
            _checked("convergence.eps_schedule", validate_schedule, self.eps_schedule),
        )
        object.__setattr__(
            self, "p", _checked("convergence.p", validate_positive, self.p, "p")
        )
        object.__setattr__(
            self, "q", _checked("convergence.q", validate_positive, self.q, "q")
        )
        object.__setattr__(
            self,
            "degree",
            _checked("regression.degree", validate_positive_int, self.degree, "degree"),
        )
        object.__setattr__(
            self,
            "ridge",
            _checked("regression.ridge", validate_non_negative, self.ridge, "ridge"),
        )
        for index, direction in enumerate(self.directions):
            if direction.component >= self.d:
                raise ConfigError(
                    f"компонента вне диапазона [0, {self.d})",
                    field=f"directions[{index}].component",
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": {"name": self.name},
            "grid": {"T": self.T, "n_steps": self.n_steps},
            "ensemble": {
                "d": self.d,
                "n_paths": self.n_paths,
                "seed": self.seed,
                "threads": self.threads,
                "cache": self.cache,
            },
            "convergence": {
                "eps_schedule": list(self.eps_schedule),
                "p": self.p,
                "q": self.q,
            },
            "regression": {"degree": self.degree, "ridge": self.ridge},
            "directions": [direction.to_dict() for direction in self.directions],
            "parameters": dict(sorted(self.parameters.items())),
            "output": {"dir": self.output_dir},
        }

    # Отпечаток: SHA-256 канонического JSON без полей, не влияющих на результат
    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output")
        payload["ensemble"].pop("threads")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(
        self,
        seed: int | None = None,
        n_paths: int | None = None,
        threads: int | None = None,
        output_dir: str | None = None,
    ) -> ScenarioConfig:
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if n_paths is not None:
            changes["n_paths"] = n_paths
        if threads is not None:
            changes["threads"] = threads
        if output_dir is not None:
            changes["output_dir"] = output_dir
        return dataclasses.replace(self, **changes) if changes else self

    def grid_directions(self, grid: Grid) -> list[Direction]:
        return [
            _checked(f"directions[{i}]", direction.build, grid, self.d)
            for i, direction in enumerate(self.directions)
        ]

    @staticmethod
    def from_dict(
        data: Mapping[str, Any],
        defaults: Mapping[str, Any] | None = None,
    ) -> ScenarioConfig:
        """
        Собирает конфигурацию из вложенного словаря таблиц.

        defaults задает значения сценария по умолчанию в той же форме; если
        в defaults есть таблица parameters, ключи параметров вне нее
        отклоняются.
        """
        if not isinstance(data, Mapping):
            raise ConfigError("конфигурация должна быть таблицей")
        merged = _merge(defaults or {}, data)

        for table, content in merged.items():
            if table in _FREE_TABLES:
                continue
            allowed = _TABLE_KEYS.get(table)
            if allowed is None:
                raise ConfigError("неизвестная таблица", field=table)
            if not isinstance(content, Mapping):
                raise ConfigError("ожидается таблица", field=table)
            for key in content:
                if key not in allowed:
                    raise ConfigError("неизвестный ключ", field=f"{table}.{key}")

        scenario = merged.get("scenario", {})
        if "name" not in scenario:
            raise ConfigError("не указано имя сценария", field="scenario.name")
        grid = merged.get("grid", {})
        ensemble = merged.get("ensemble", {})
        convergence = merged.get("convergence", {})
        regression = merged.get("regression", {})
        output = merged.get("output", {})

        raw_directions = merged.get("directions", [])
        if not isinstance(raw_directions, list):
            raise ConfigError(
                "ожидается массив таблиц [[directions]]", field="directions"
            )
        directions = tuple(
            DirectionConfig.from_dict(item, i) for i, item in enumerate(raw_directions)
        )

        parameters = _parameters(
            merged.get("parameters", {}),
            (defaults or {}).get("parameters"),
        )

        kwargs: dict[str, Any] = {
            "name": scenario["name"],
            "directions": directions,
            "parameters": parameters,
        }
        if "T" in grid:
            kwargs["T"] = _as_float(grid["T"], "grid.T")
        if "n_steps" in grid:
            kwargs["n_steps"] = grid["n_steps"]
        for key in ("d", "n_paths", "threads"):
            if key in ensemble:
                kwargs[key] = ensemble[key]
        kwargs["seed"] = ensemble.get("seed", SettingsLoader().get_int("DEFAULT_SEED"))
        if "cache" in ensemble:
            kwargs["cache"] = _as_bool(ensemble["cache"], "ensemble.cache")
        if "eps_schedule" in convergence:
            schedule = convergence["eps_schedule"]
            if not isinstance(schedule, list | tuple):
                raise ConfigError(
                    "ожидается массив чисел", field="convergence.eps_schedule"
                )
            kwargs["eps_schedule"] = tuple(
                _as_float(e, "convergence.eps_schedule") for e in schedule
            )
        for key in ("p", "q"):
            if key in convergence:
                kwargs[key] = _as_float(convergence[key], f"convergence.{key}")
        if "degree" in regression:
            kwargs["degree"] = regression["degree"]
        if "ridge" in regression:
            kwargs["ridge"] = _as_float(regression["ridge"], "regression.ridge")
        if output.get("dir") is not None:
            kwargs["output_dir"] = _as_text(output["dir"], "output.dir")
        return ScenarioConfig(**kwargs)


def _merge(defaults: Mapping[str, Any], data: Mapping[str, Any]) -> dict[str, Any]:
    merged: dict[str, Any] = copy.deepcopy(dict(defaults))
    for table, content in data.items():
        current = merged.get(table)
        if isinstance(current, dict) and isinstance(content, Mapping):
            current.update(content)
        else:
            merged[table] = copy.deepcopy(content)
    return merged


def _parameters(raw: Any, allowed: Mapping[str, Any] | None) -> dict[str, float]:
    if not isinstance(raw, Mapping):
        raise ConfigError("ожидается таблица", field="parameters")
    out: dict[str, float] = {}
    for key, value in raw.items():
        if allowed is not None and key not in allowed:
            raise ConfigError(
                "неизвестный параметр сценария", field=f"parameters.{key}"
            )
        out[key] = _as_float(value, f"parameters.{key}")
    return dict(sorted(out.items()))


def _error_line(exc: tomllib.TOMLDecodeError) -> int | None:
    line = getattr(exc, "lineno", None)
    if isinstance(line, int):
        return line
    match = _LINE_PATTERN.search(str(exc))
    return int(match.group(1)) if match else None


# Чтение файла TOML в словарь таблиц
def read_config_file(path: Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"не удалось прочитать файл конфигурации {path}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(
            f"синтаксическая ошибка TOML: {exc}", line=_error_line(exc)
        ) from None
