from __future__ import annotations


class WienerLabError(Exception):
    pass


class ValidationError(WienerLabError):
    pass


class GridMismatchError(ValidationError):
    def __init__(self, what: str) -> None:
        self.what = what
        super().__init__(f"Несовпадение сеток или размерностей: {what}")


class ConfigError(ValidationError):
    def __init__(
        self,
        message: str,
        field: str | None = None,
        line: int | None = None,
    ) -> None:
        self.field = field
        self.line = line

        prefix = ""
        if field is not None:
            prefix = f"[{field}] "
        elif line is not None:
            prefix = f"[строка {line}] "
        super().__init__(f"{prefix}{message}")


class ContractViolationError(WienerLabError):
    pass


class ScenarioNotFoundError(WienerLabError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"Неизвестный сценарий '{name}'")


class NumericalError(WienerLabError):
    module: str = "core"

    def __init__(self, message: str, module: str | None = None) -> None:
        if module is not None:
            self.module = module
        super().__init__(f"{self.module}: {message}")


class BlowUpError(NumericalError):
    def __init__(self, step: int, module: str) -> None:
        self.step = step
        super().__init__(f"нечисловое значение на шаге {step}", module=module)


class SingularRegressionError(NumericalError):
    def __init__(self, step: int | None, condition: float) -> None:
        self.step = step
        self.condition = condition
        where = "" if step is None else f" на шаге {step}"
        super().__init__(
            f"вырожденная регрессия{where} (число обусловленности {condition:.3e})",
            module="regression",
        )


class RegimeError(NumericalError):
    def __init__(self, reason: str, step: int | None = None) -> None:
        self.step = step
        where = "" if step is None else f" (шаг {step})"
        super().__init__(f"{reason}{where}", module="bsde_solver")


class DivergenceError(NumericalError):
    def __init__(self, ratios: list[float]) -> None:
        self.ratios = ratios
        shown = ", ".join(f"{r:.3f}" for r in ratios)
        super().__init__(
            f"итерации Пикара не сжимаются: отношения [{shown}]",
            module="bsde_solver",
        )


class NestedBudgetError(NumericalError):
    def __init__(self, required: float, budget: float) -> None:
        self.required = required
        self.budget = budget
        super().__init__(
            f"вложенное моделирование требует {required:.3e} операций, "
            f"лимит {budget:.3e}",
            module="bsde_solver",
        )


class ExponentOverflowError(NumericalError):
    def __init__(self, exponent: float) -> None:
        self.exponent = exponent
        super().__init__(
            f"показатель экспоненты {exponent:.1f} вне допустимого диапазона",
            module="bsde_solver",
        )
