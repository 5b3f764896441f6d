from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from wienerlab.core.exceptions import ValidationError
from wienerlab.core.pathspace import Grid, WienerEnsemble, make_grid, sample_ensemble
from wienerlab.infra.settings import SettingsLoader

logger = logging.getLogger("wienerlab.storage")

# заголовок кэша ансамбля: T, N, d, n_paths, seed (little-endian)
_HEADER = struct.Struct("<dqqqQ")


def _format_cell(value: Any) -> str:
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return str(value)


# Запись файла через временный файл и os.replace для атомарности
def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")

    try:
        tmp_path.write_bytes(payload)
        os.replace(tmp_path, path)
    except OSError as exc:
        raise ValidationError(f"Ошибка записи данных в файл: {path}") from exc
    finally:
        if tmp_path.exists():
            try:
                tmp_path.unlink()
            except OSError:
                pass


# Каталог артефактов одного запуска сценария
class ArtifactStore:
    def __init__(self, root: Path) -> None:
        self._root = Path(root)
        self._written: list[str] = []

    @property
    def root(self) -> Path:
        return self._root

    @property
    def written(self) -> list[str]:
        return list(self._written)

    def _target(self, name: str) -> Path:
        if not name or Path(name).is_absolute() or ".." in Path(name).parts:
            raise ValidationError(f"Некорректное имя артефакта: {name}")
        return self._root / name

    def _record(self, name: str, payload: bytes) -> Path:
        path = self._target(name)
        _write_atomic(path, payload)
        if name not in self._written:
            self._written.append(name)
        logger.debug("Artifact written: %s", path)
        return path

    def write_json(self, name: str, data: Any) -> Path:
        text = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)
        return self._record(name, (text + "\n").encode("utf-8"))

    def write_csv(
        self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]
    ) -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])
        return self._record(name, buffer.getvalue().encode("utf-8"))

    # Колонки через пробел с заголовком-комментарием (читается gnuplot)
    def write_dat(
        self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]
    ) -> Path:
        lines = ["# " + " ".join(header)]
        lines.extend(" ".join(_format_cell(cell) for cell in row) for row in rows)
        return self._record(name, ("\n".join(lines) + "\n").encode("utf-8"))

    def read_json(self, name: str) -> Any:
        path = self._target(name)
        if not path.exists():
            raise ValidationError(f"Файл данных не найден: {path}")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"Ошибка чтения JSON-файла: {path}") from exc


def save_ensemble(ensemble: WienerEnsemble, path: Path) -> None:
    grid = ensemble.grid
    if not grid.is_uniform:
        raise ValidationError("В кэш сохраняются только ансамбли на равномерной сетке")
    header = _HEADER.pack(
        grid.horizon, grid.n_steps, ensemble.d, ensemble.n_paths, ensemble.seed
    )
    body = np.ascontiguousarray(ensemble.increments, dtype="<f8").tobytes()
    _write_atomic(Path(path), header + body)


def load_ensemble(path: Path) -> WienerEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"Поврежденный файл ансамбля: {path}")
    horizon, n_steps, d, n_paths, seed = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * n_steps * d * n_paths
    if len(raw) != expected:
        raise ValidationError(
            f"Размер файла ансамбля не совпадает с заголовком: {path}"
        )
    increments = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    increments = increments.reshape(n_paths, n_steps, d).astype(float)
    return WienerEnsemble(make_grid(horizon, n_steps), increments, seed=seed)


# Кэш ансамблей в CACHE_DIR по ключу (T, N, d, n_paths, seed, блок)
class EnsembleCache:
    def __init__(self, root: Path | None = None) -> None:
        settings = SettingsLoader()
        self._root = Path(root or settings.get("CACHE_DIR"))
        self._block = settings.get_int("SAMPLING_BLOCK_PATHS")

    def path_for(self, grid: Grid, d: int, n_paths: int, seed: int) -> Path:
        name = (
            f"ensemble_T{grid.horizon:g}_N{grid.n_steps}_d{d}"
            f"_n{n_paths}_s{seed}_b{self._block}.bin"
        )
        return self._root / name

    def get_or_sample(
        self,
        grid: Grid,
        d: int,
        n_paths: int,
        seed: int,
        threads: int | None = None,
    ) -> WienerEnsemble:
        path = self.path_for(grid, d, n_paths, seed)
        if path.exists():
            cached = load_ensemble(path)
            if cached.grid.matches(grid):
                logger.info("Ensemble loaded from cache: %s", path.name)
                return cached
        ensemble = sample_ensemble(grid, d, n_paths, seed, threads=threads)
        if grid.is_uniform:
            save_ensemble(ensemble, path)
            logger.info("Ensemble cached: %s", path.name)
        return ensemble
