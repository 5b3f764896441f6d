from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

from wienerlab.core.bsde_solver import BackwardSolution
from wienerlab.core.exceptions import ConfigError
from wienerlab.core.pathspace import (
    Direction,
    Grid,
    WienerEnsemble,
    make_grid,
    sample_ensemble,
)
from wienerlab.core.regression import RegressionBasis
from wienerlab.core.wiener_calculus import ConvergenceReport
from wienerlab.infra.storage import ArtifactStore, EnsembleCache
from wienerlab.scenarios.config import DirectionConfig, ScenarioConfig

logger = logging.getLogger("wienerlab.runner")

_SLUG_PATTERN = re.compile(r"[^a-z0-9]+")

QUANTILE_LEVELS = (0.05, 0.5, 0.95)


def slugify(text: str) -> str:
    slug = _SLUG_PATTERN.sub("-", text.lower()).strip("-")
    return slug or "item"


# Результат одной проверки сценария
@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


class ScenarioContext:
    """
    Состояние одного запуска: конфигурация, ансамбли, проверки и артефакты.

    Функции сценариев получают контекст, добавляют проверки через add_check
    и пишут таблицы сходимости через record_report.
    """

    def __init__(self, config: ScenarioConfig, store: ArtifactStore) -> None:
        self.config = config
        self.store = store
        self.checks: list[CheckResult] = []
        self.summaries: dict[str, Any] = {}
        self._grid: Grid | None = None
        self._ensembles: dict[tuple[int, int, int], WienerEnsemble] = {}

    @property
    def grid(self) -> Grid:
        if self._grid is None:
            self._grid = make_grid(self.config.T, self.config.n_steps)
        return self._grid

    @property
    def basis(self) -> RegressionBasis:
        return RegressionBasis(degree=self.config.degree, ridge=self.config.ridge)

    def ensemble(
        self, n_paths: int | None = None, d: int | None = None
    ) -> WienerEnsemble:
        config = self.config
        n = config.n_paths if n_paths is None else n_paths
        dim = config.d if d is None else d
        key = (n, dim, config.n_steps)
        if key not in self._ensembles:
            if config.cache:
                cache = EnsembleCache()
                ensemble = cache.get_or_sample(
                    self.grid, dim, n, config.seed, threads=config.threads
                )
            else:
                ensemble = sample_ensemble(
                    self.grid, dim, n, config.seed, threads=config.threads
                )
            self._ensembles[key] = ensemble
        return self._ensembles[key]

    # Направления из конфигурации или набор сценария по умолчанию, с метками
    def directions(
        self, defaults: Sequence[DirectionConfig]
    ) -> list[tuple[str, Direction]]:
        configs = self.config.directions or tuple(defaults)
        built = (
            self.config.grid_directions(self.grid)
            if self.config.directions
            else [direction.build(self.grid, self.config.d) for direction in configs]
        )
        return [
            (f"{config.kind}{i}", direction)
            for i, (config, direction) in enumerate(zip(configs, built, strict=True))
        ]

    def param(self, name: str) -> float:
        try:
            return self.config.parameters[name]
        except KeyError:
            raise ConfigError("параметр не задан", field=f"parameters.{name}") from None

    def param_int(self, name: str) -> int:
        value = self.param(name)
        if value != int(value) or value < 0:
            raise ConfigError(
                "ожидается неотрицательное целое число", field=f"parameters.{name}"
            )
        return int(value)

    def add_check(
        self,
        name: str,
        passed: bool,
        value: float,
        threshold: float,
        detail: str = "",
    ) -> CheckResult:
        check = CheckResult(
            name=name,
            passed=bool(passed),
            value=float(value),
            threshold=float(threshold),
            detail=detail,
        )
        self.checks.append(check)
        logger.info(
            "Check %s: %s value=%.4g threshold=%.4g",
            name,
            check.verdict,
            check.value,
            check.threshold,
        )
        return check

    # CSV и .dat таблицы сходимости плюс сводка в summary.json
    def record_report(self, name: str, report: ConvergenceReport) -> str:
        slug = slugify(name)
        self.store.write_csv(f"{slug}.csv", report.columns, report.rows())
        self.store.write_dat(f"{slug}.dat", report.columns, report.rows())
        self.summaries[slug] = report.to_summary()
        return slug

    def record_solution(self, name: str, solution: BackwardSolution) -> str:
        slug = slugify(name)
        y_rows, z_rows = solution.quantile_rows(QUANTILE_LEVELS)
        quantiles = [f"q{round(level * 100):02d}" for level in QUANTILE_LEVELS]
        self.store.write_csv(f"{slug}_y.csv", ["node", "t", "mean", *quantiles], y_rows)
        self.store.write_csv(f"{slug}_z.csv", ["step", "t", "mean", *quantiles], z_rows)
        if solution.diagnostics:
            self.summaries[f"{slug}_diagnostics"] = _plain(solution.diagnostics)
        return slug

    def record(self, name: str, data: dict[str, Any]) -> None:
        self.summaries[slugify(name)] = _plain(data)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(v) for v in value]
    if hasattr(value, "item"):
        return value.item()
    return value
