from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence

from prettytable import PrettyTable

from wienerlab import __version__
from wienerlab.core.exceptions import (
    ConfigError,
    ContractViolationError,
    NumericalError,
    ScenarioNotFoundError,
    ValidationError,
)
from wienerlab.scenarios.registry import list_scenarios
from wienerlab.scenarios.runner import RunReport, resolve_config, run

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_INTERNAL = 4


# Приведение ошибок лаборатории к сообщениям и кодам выхода
def _handle_error(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        print(f"Ошибка конфигурации: {exc}")
        return EXIT_USAGE

    if isinstance(exc, ScenarioNotFoundError):
        print(f"{exc}. Список сценариев: wienerlab list")
        return EXIT_USAGE

    if isinstance(exc, ValidationError | ContractViolationError):
        print(str(exc))
        return EXIT_USAGE

    if isinstance(exc, NumericalError):
        print(f"Численная ошибка в модуле {exc}")
        return EXIT_NUMERICAL

    print(f"Неожиданная ошибка: {exc.__class__.__name__}: {exc}")
    return EXIT_INTERNAL


def _format_number(value: float) -> str:
    return f"{value:.4g}"


# Заголовок, таблица проверок и итог запуска
def _print_report(report: RunReport) -> None:
    print(f"Сценарий: {report.scenario}")
    print(f"Проверяется: {report.anchor}")
    print(f"config_hash: {report.config_hash}")

    table = PrettyTable(["Check", "Verdict", "Value", "Threshold", "Detail"])
    table.align["Check"] = "l"
    table.align["Detail"] = "l"
    for check in report.checks:
        table.add_row(
            [
                check.name,
                check.verdict,
                _format_number(check.value),
                _format_number(check.threshold),
                check.detail,
            ]
        )
    print(table)

    passed = len(report.checks) - len(report.failed)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"Итог: {verdict} ({passed}/{len(report.checks)} проверок)")
    print(f"Время: {report.wall_time:.2f} с, артефакты: {report.output_dir}")


def _print_catalog() -> None:
    table = PrettyTable(["Scenario", "Description", "Anchor"])
    table.align = "l"
    for entry in list_scenarios():
        table.add_row([entry.name, entry.description, entry.anchor])
    print(table)


# Сборка argparse-парсера: команды run и list
def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wienerlab",
        description="Численная лаборатория винеровского пространства и BSDE",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Запуск сценария")
    p_run.add_argument(
        "config", help="Файл конфигурации TOML или имя встроенного сценария"
    )
    p_run.add_argument("--seed", type=int, help="Зерно генератора")
    p_run.add_argument("--paths", type=int, help="Число траекторий")
    p_run.add_argument("--threads", type=int, help="Предел числа потоков")
    p_run.add_argument("--out", help="Каталог артефактов")

    sub.add_parser("list", help="Список встроенных сценариев")
    return parser


# Точка входа CLI: разбор аргументов, запуск и код выхода
def main_cli(argv: Sequence[str] | None = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "list":
            _print_catalog()
            return

        if args.command == "run":
            config = resolve_config(
                args.config,
                seed=args.seed,
                n_paths=args.paths,
                threads=args.threads,
                output_dir=args.out,
            )
            report = run(config)
            _print_report(report)
            if not report.passed:
                sys.exit(EXIT_CHECK_FAILED)
            return

        raise ValidationError("Неизвестная команда")

    except Exception as exc:  # noqa: BLE001
        code = _handle_error(exc)
        sys.exit(code)
