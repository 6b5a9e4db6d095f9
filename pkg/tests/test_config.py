from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from ctrlora.config import ConfigError, RunConfig, dump_config, from_mapping, load_config, reference_markdown
from ctrlora.experiment import build_run

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))


def test_defaults_are_valid():
    cfg = from_mapping({})
    assert cfg.to_dict() == RunConfig().to_dict()


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_load_and_round_trip(path):
    cfg = load_config(path)
    again = from_mapping(yaml.safe_load(dump_config(cfg)))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.train.seed == cfg.seed


@pytest.mark.parametrize("raw, match", [
    ({"sed": 1}, "unknown top-level"),
    ({"train": {"step": 10}}, "unknown key"),
    ({"train": {"seed": 3}}, "unknown key"),
    ({"arch": {"layers": 3}}, "unknown key"),
    ({"seed": -1}, "seed"),
    ({"seed": "one"}, "seed"),
    ({"train": []}, "mapping"),
])
def test_unknown_or_malformed_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        from_mapping(raw)


@pytest.mark.parametrize("raw, match", [
    ({"arch": {"dims": [8, 16, 4]}, "task": {"ranks": {1: 5}, "scales": {1: 1.0}}}, "planted rank"),
    ({"arch": {"dims": [8, 16, 4]}, "task": {"ranks": {3: 1}, "scales": {3: 1.0}}}, "not adapter-eligible"),
    ({"task": {"ranks": {1: 1}, "scales": {0: 1.0, 1: 1.0}}}, "without a rank"),
    ({"task": {"n_samples": 100}, "train": {"calibration_size": 90}}, "calibration_size"),
    ({"task": {"n_samples": 100}, "train": {"batch_size": 90, "calibration_size": 10}}, "batch_size"),
    ({"train": {"lambda_start": 0.0, "lambda_end": 0.5}}, "lambda"),
    ({"arch": {"activation": "tanh"}}, "activation"),
    ({"task": {"eval_fraction": 1.0}}, "eval_fraction"),
])
def test_impossible_settings_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        from_mapping(raw)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_with_seed_sets_both():
    cfg = from_mapping({"seed": 1}).with_seed(7)
    assert cfg.seed == 7 and cfg.train.seed == 7


def test_reference_lists_every_key():
    text = reference_markdown()
    cfg = RunConfig().to_dict()
    for section in ("arch", "task", "train"):
        for key in cfg[section]:
            assert f"| {section} | {key} |" in text
    assert "| train | seed |" not in text


def test_build_run_is_seeded():
    cfg = from_mapping({"task": {"n_samples": 200}, "train": {"calibration_size": 32}})
    net_a, ds_a = build_run(cfg)
    net_b, ds_b = build_run(cfg)
    _, ds_c = build_run(cfg.with_seed(1))
    assert (net_a.layers[0].weight == net_b.layers[0].weight).all()
    assert (ds_a.targets == ds_b.targets).all() and (ds_a.eval_idx == ds_b.eval_idx).all()
    assert not (ds_a.inputs == ds_c.inputs).all()
