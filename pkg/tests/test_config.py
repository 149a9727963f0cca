import json

import pytest

from core.config import build_chain_config, default_run_config, load_run_config
from core.errors import ConfigError


def _write(tmp_path, data):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestLoadRunConfig:
    def test_defaults_without_file(self):
        cfg = load_run_config()
        assert cfg["model"] == "bart"
        assert cfg["bart"]["tau"] == 0.95 and cfg["bart"]["gamma"] == 2.0
        assert cfg["summary"]["p"] == "auto"

    def test_partial_block_keeps_defaults(self, tmp_path):
        cfg = load_run_config(_write(tmp_path, {"bart": {"n_trees": 7}}))
        assert cfg["bart"]["n_trees"] == 7
        assert cfg["bart"]["w"] == default_run_config()["bart"]["w"]

    def test_overrides_applied_last(self, tmp_path):
        cfg = load_run_config(_write(tmp_path, {"chain": {"seed": 1}}), {"chain": {"seed": 2}})
        assert cfg["chain"]["seed"] == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "absent.json"))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    @pytest.mark.parametrize("patch, field", [
        ({"model": "forest"}, "model"),
        ({"chains": 0}, "chains"),
        ({"cv": {"folds": 1}}, "cv.folds"),
        ({"summary": {"p": 1.5}}, "summary.p"),
        ({"summary": {"d_mode": "median"}}, "summary.d_mode"),
        ({"summary": {"band_draws": 0}}, "summary.band_draws"),
        ({"bart": {"overrides": {"q": {}}}}, "bart.overrides"),
        ({"data": {"covariates": {"age": "ordinal"}}}, "data.covariates.age"),
        ({"unknown_block": {}}, "config"),
    ])
    def test_invalid_field_named(self, tmp_path, patch, field):
        with pytest.raises(ConfigError) as exc:
            load_run_config(_write(tmp_path, patch))
        assert field in str(exc.value)

    def test_burn_in_not_below_n_iter(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(_write(tmp_path, {"chain": {"n_iter": 10, "burn_in": 10}}))

    def test_move_probs_must_sum_to_one(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(_write(tmp_path, {"bart": {"move_probs": [0.5, 0.5, 0.5]}}))


class TestBuildChainConfig:
    def test_per_forest_overrides(self):
        cfg = default_run_config()
        cfg["bart"]["overrides"] = {"z": {"n_trees": 11}}
        chain = build_chain_config(cfg)
        assert chain.bart_for("z").n_trees == 11
        assert chain.bart_for("111").n_trees == cfg["bart"]["n_trees"]
        assert chain.bart_for("z").w == chain.bart.w

    def test_covariate_subsets(self):
        cfg = default_run_config()
        cfg["linear"]["covariate_subsets"] = {"z": [0, 2]}
        assert build_chain_config(cfg).linear.covariate_subsets == {"z": (0, 2)}

    def test_retained_count(self):
        cfg = default_run_config()
        cfg["chain"].update(n_iter=100, burn_in=40, thin=7)
        assert build_chain_config(cfg).n_retained == 60 // 7
