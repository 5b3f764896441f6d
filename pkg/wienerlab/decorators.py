from __future__ import annotations

import functools
import inspect
import logging
import time
from collections.abc import Callable, Sequence
from datetime import UTC, datetime
from typing import Any, TypeVar

T = TypeVar("T")

logger = logging.getLogger("wienerlab.actions")


def _iso_utc_now() -> str:
    return datetime.now(UTC).replace(microsecond=0).isoformat()


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list | tuple) and len(value) > 6:
        return f"[{len(value)} items]"
    return str(value)


def log_action(
    action: str,
    fields: Sequence[str] = (),
) -> Callable[[Callable[..., T]], Callable[..., T]]:
    """
    Журналирует вызов операции строкой key=value.

    fields перечисляет имена аргументов, значения которых попадают в строку
    (seed, n_paths, eps и т.п.). Исключение логируется и пробрасывается дальше.
    """

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        signature = inspect.signature(func)

        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> T:
            # фиксация момента начала операции
            ts = _iso_utc_now()
            started = time.perf_counter()

            # извлечение интересующих параметров операции
            try:
                bound = signature.bind_partial(*args, **kwargs)
                arguments = bound.arguments
            except TypeError:
                arguments = dict(kwargs)

            params = [
                f"{name}={_format_value(arguments[name])}"
                for name in fields
                if arguments.get(name) is not None
            ]

            try:
                result = func(*args, **kwargs)
            except Exception as exc:
                duration_ms = (time.perf_counter() - started) * 1000.0
                msg_parts = [
                    f"ts={ts}",
                    f"action={action}",
                    *params,
                    f"duration_ms={duration_ms:.1f}",
                    "result=ERROR",
                    f"error_type={type(exc).__name__}",
                    f"error_message={exc}",
                ]
                logger.error(" ".join(msg_parts))
                raise

            duration_ms = (time.perf_counter() - started) * 1000.0
            msg_parts = [
                f"ts={ts}",
                f"action={action}",
                *params,
                f"duration_ms={duration_ms:.1f}",
                "result=OK",
            ]
            logger.info(" ".join(msg_parts))
            return result

        return wrapper

    return decorator
