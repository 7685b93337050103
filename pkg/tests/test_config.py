"""Run configuration parsing, validation and random streams."""
import json

import numpy as np
import pytest

from stosa.config import SEARCH_RANGES, ConfigError, RunConfig


class TestRunConfig:
    def test_defaults_in_range(self):
        RunConfig().check_ranges()

    def test_odd_d(self):
        with pytest.raises(ConfigError):
            RunConfig(d=63)

    def test_out_of_range_needs_flag(self):
        cfg = RunConfig(d=32, lr=1e-2)
        with pytest.raises(ConfigError, match="d=32"):
            cfg.check_ranges()
        cfg.replace(allow_deviation=True).check_ranges()

    @pytest.mark.parametrize("field", sorted(SEARCH_RANGES))
    def test_every_searched_value_accepted(self, field):
        for v in SEARCH_RANGES[field]:
            RunConfig(**{field: v}).check_ranges()

    def test_structural_errors(self):
        with pytest.raises(ConfigError):
            RunConfig(variant="bert")
        with pytest.raises(ConfigError):
            RunConfig(d=64, n_heads=3)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig(variant="dot", d=128, eval_ns=[1, 10], lam=0.5, seed=7)
        (tmp_path / "c.json").write_text(cfg.dumps())
        assert RunConfig.load(tmp_path / "c.json") == cfg
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.json").write_text('{"d": 64, "depth": 3}')
        with pytest.raises(ConfigError, match="depth"):
            RunConfig.load(tmp_path / "c.json")

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("d = 64")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "c.json")
        (tmp_path / "c.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "c.json")

    def test_streams_independent_and_stable(self):
        cfg = RunConfig(seed=3)
        a = cfg.rng("init").random(4)
        np.testing.assert_array_equal(a, RunConfig(seed=3).rng("init").random(4))
        assert not np.array_equal(a, cfg.rng("negatives").random(4))
        assert not np.array_equal(a, RunConfig(seed=4).rng("init").random(4))
