from __future__ import annotations

import numpy as np
import pytest

from wienerlab.core.exceptions import ValidationError
from wienerlab.core.pathspace import Grid, sample_ensemble
from wienerlab.infra.storage import (
    ArtifactStore,
    EnsembleCache,
    load_ensemble,
    save_ensemble,
)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "run")


class TestArtifactStore:
    def test_json_is_sorted_and_readable(self, store):
        path = store.write_json("summary.json", {"b": 1, "a": [0.5, "x"]})
        text = path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("\n")
        assert store.read_json("summary.json") == {"a": [0.5, "x"], "b": 1}

    def test_csv_keeps_float_precision(self, store):
        path = store.write_csv("table.csv", ["eps", "err"], [[0.125, 1 / 3]])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "eps,err"
        assert lines[1] == f"0.125,{1 / 3!r}"

    def test_dat_has_comment_header(self, store):
        path = store.write_dat("table.dat", ["eps", "err"], [[0.5, 2], [0.25, 1]])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ["# eps err", "0.5 2", "0.25 1"]

    def test_no_temporary_files_left(self, store):
        store.write_json("report.json", {"passed": True})
        assert sorted(p.name for p in store.root.iterdir()) == ["report.json"]

    def test_written_names_in_order(self, store):
        store.write_json("b.json", {})
        store.write_json("a.json", {})
        store.write_json("b.json", {"again": True})
        assert store.written == ["b.json", "a.json"]

    @pytest.mark.parametrize("name", ["", "../escape.json", "/abs/path.json"])
    def test_rejects_unsafe_names(self, store, name):
        with pytest.raises(ValidationError):
            store.write_json(name, {})

    def test_read_missing_file(self, store):
        with pytest.raises(ValidationError):
            store.read_json("missing.json")

    def test_read_broken_json(self, store):
        store.root.mkdir(parents=True)
        (store.root / "broken.json").write_text("{", encoding="utf-8")
        with pytest.raises(ValidationError):
            store.read_json("broken.json")


class TestEnsembleFiles:
    def test_save_and_load(self, grid, tmp_path):
        ensemble = sample_ensemble(grid, d=2, n_paths=50, seed=8)
        path = tmp_path / "ensemble.bin"
        save_ensemble(ensemble, path)
        loaded = load_ensemble(path)
        assert loaded.seed == 8
        assert loaded.grid.matches(grid)
        assert np.array_equal(loaded.increments, ensemble.increments)

    def test_non_uniform_grid_is_not_cached(self, tmp_path):
        grid = Grid(np.array([0.0, 0.1, 0.5, 1.0]))
        ensemble = sample_ensemble(grid, d=1, n_paths=10, seed=1)
        with pytest.raises(ValidationError):
            save_ensemble(ensemble, tmp_path / "ensemble.bin")

    def test_truncated_file(self, grid, tmp_path):
        path = tmp_path / "ensemble.bin"
        save_ensemble(sample_ensemble(grid, d=1, n_paths=10, seed=1), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValidationError):
            load_ensemble(path)


class TestEnsembleCache:
    def test_path_encodes_key(self, grid, tmp_path):
        cache = EnsembleCache(tmp_path)
        path = cache.path_for(grid, 1, 100, 7)
        assert path.parent == tmp_path
        assert "N16" in path.name and "n100" in path.name and "s7" in path.name

    def test_second_call_reads_cache(self, grid, tmp_path):
        cache = EnsembleCache(tmp_path)
        first = cache.get_or_sample(grid, 1, 100, 7)
        assert cache.path_for(grid, 1, 100, 7).exists()
        second = cache.get_or_sample(grid, 1, 100, 7)
        assert np.array_equal(first.increments, second.increments)

    def test_default_root_from_settings(self, isolated_settings, grid):
        cache = EnsembleCache()
        path = cache.path_for(grid, 1, 10, 0)
        assert str(path.parent) == isolated_settings.get("CACHE_DIR")

