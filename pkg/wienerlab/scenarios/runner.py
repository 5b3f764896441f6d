"""Запуск сценария: конфигурация -> проверки -> артефакты -> RunReport."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from wienerlab.core.exceptions import ConfigError, ValidationError
from wienerlab.decorators import log_action
from wienerlab.infra.settings import SettingsLoader
from wienerlab.infra.storage import ArtifactStore
from wienerlab.scenarios.config import ScenarioConfig, read_config_file
from wienerlab.scenarios.context import CheckResult, ScenarioContext
from wienerlab.scenarios.registry import get_scenario

logger = logging.getLogger("wienerlab.runner")

SCHEMA_VERSION = 1

CHECK_COLUMNS = ["check", "verdict", "value", "threshold", "detail"]


# Итог запуска: вердикты проверок и пути артефактов
@dataclass(frozen=True, slots=True)
class RunReport:
    scenario: str
    anchor: str
    config_hash: str
    wall_time: float
    checks: tuple[CheckResult, ...]
    artifacts: tuple[str, ...]
    output_dir: str

    def __post_init__(self) -> None:
        if not self.checks:
            raise ValidationError("Отчет должен содержать хотя бы одну проверку")

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failed(self) -> list[CheckResult]:
        return [check for check in self.checks if not check.passed]

    # Время выполнения не пишется в файл: артефакты побайтно воспроизводимы
    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "anchor": self.anchor,
            "config_hash": self.config_hash,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
            "artifacts": list(self.artifacts),
        }


def resolve_config(
    source: str,
    seed: int | None = None,
    n_paths: int | None = None,
    threads: int | None = None,
    output_dir: str | None = None,
) -> ScenarioConfig:
    """
    Конфигурация из файла TOML или по имени встроенного сценария.

    Значения сценария по умолчанию подставляются под значения файла, флаги
    командной строки применяются последними.
    """
    path = Path(source)
    if path.suffix == ".toml" or path.is_file():
        raw = read_config_file(path)
        scenario = raw.get("scenario")
        if not isinstance(scenario, dict) or "name" not in scenario:
            raise ConfigError("не указано имя сценария", field="scenario.name")
        entry = get_scenario(str(scenario["name"]))
    else:
        raw = {}
        entry = get_scenario(source)

    config = ScenarioConfig.from_dict(raw, defaults=entry.config_defaults())
    try:
        return config.with_overrides(
            seed=seed, n_paths=n_paths, threads=threads, output_dir=output_dir
        )
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def _output_dir(config: ScenarioConfig) -> Path:
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Path(SettingsLoader().get("OUTPUT_DIR")) / config.name


@log_action("run_scenario")
def run(config: ScenarioConfig) -> RunReport:
    entry = get_scenario(config.name)
    store = ArtifactStore(_output_dir(config))
    ctx = ScenarioContext(config, store)
    logger.info(
        "Scenario %s started: n_paths=%d n_steps=%d seed=%d",
        entry.name,
        config.n_paths,
        config.n_steps,
        config.seed,
    )

    started = time.perf_counter()
    entry.runner(ctx)
    wall_time = time.perf_counter() - started
    if not ctx.checks:
        raise ValidationError(f"Сценарий {entry.name} не выполнил ни одной проверки")

    config_hash = config.config_hash()
    store.write_csv(
        "checks.csv",
        CHECK_COLUMNS,
        [[c.name, c.verdict, c.value, c.threshold, c.detail] for c in ctx.checks],
    )
    store.write_json("config.json", config.to_dict())
    store.write_json(
        "summary.json",
        {
            "schema_version": SCHEMA_VERSION,
            "scenario": entry.name,
            "anchor": entry.anchor,
            "config_hash": config_hash,
            "passed": all(c.passed for c in ctx.checks),
            "reports": ctx.summaries,
        },
    )

    report = RunReport(
        scenario=entry.name,
        anchor=entry.anchor,
        config_hash=config_hash,
        wall_time=wall_time,
        checks=tuple(ctx.checks),
        artifacts=(*store.written, "report.json"),
        output_dir=str(store.root),
    )
    store.write_json("report.json", report.to_dict())
    logger.info(
        "Scenario %s finished: passed=%s checks=%d wall_time=%.2fs",
        entry.name,
        report.passed,
        len(report.checks),
        wall_time,
    )
    return report
