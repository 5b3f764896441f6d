from __future__ import annotations

import pytest

from wienerlab.core.exceptions import ScenarioNotFoundError
from wienerlab.scenarios.config import ScenarioConfig
from wienerlab.scenarios.registry import get_scenario, list_scenarios

EXPECTED = {
    "affine",
    "cameron-martin",
    "forward-tangent",
    "markovian-identity",
    "picard",
    "shift-identities",
    "skorohod-duality",
    "theorem-4.1-cylindrical",
    "theorem-5.1-lipschitz",
    "theorem-7.2-quadratic",
}


class TestRegistry:
    def test_catalog(self):
        names = [entry.name for entry in list_scenarios()]
        assert set(names) == EXPECTED
        assert names == sorted(names)

    def test_lookup_ignores_case_and_spaces(self):
        assert get_scenario("  Affine ").name == "affine"

    @pytest.mark.parametrize("name", ["", "theorem-9", None])
    def test_unknown_scenario(self, name):
        with pytest.raises(ScenarioNotFoundError):
            get_scenario(name)

    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_defaults_build_valid_config(self, name):
        entry = get_scenario(name)
        config = ScenarioConfig.from_dict({}, defaults=entry.config_defaults())
        assert config.name == name
        assert entry.description and entry.anchor
