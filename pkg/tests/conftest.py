from __future__ import annotations

import logging

import pytest

from wienerlab.core.pathspace import Grid, WienerEnsemble, make_grid, sample_ensemble
from wienerlab.infra.settings import SettingsLoader


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Каталоги запусков, кэша и логов внутри tmp_path."""
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("LOG_FILE", str(tmp_path / "logs" / "wienerlab.log"))
    settings = SettingsLoader()
    settings.reload()
    yield settings
    monkeypatch.undo()
    settings.reload()
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def grid() -> Grid:
    return make_grid(1.0, 16)


@pytest.fixture
def ensemble(grid) -> WienerEnsemble:
    return sample_ensemble(grid, d=1, n_paths=2000, seed=11)


@pytest.fixture
def ensemble_2d(grid) -> WienerEnsemble:
    return sample_ensemble(grid, d=2, n_paths=500, seed=5)
