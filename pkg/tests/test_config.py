import json

import pytest

from sare_kit.config import PRESETS, SEED_ENV, RunConfig, derive_seed, load_config
from sare_kit.errors import ConfigError


def test_defaults_follow_reference_settings():
    c = RunConfig()
    assert (c.train.lambda_F, c.train.lambda_A, c.train.lr) == (0.01, 0.01, 1e-4)
    assert c.sample.steps == 50 and c.refine.alpha == 0.5 and c.model.attach_layer == 4
    assert load_config(preset="full").query.M == 5120


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides=["model.bogus=1"], env={})
    bad = tmp_path / "c.toml"
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad, env={})


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 4\n[model]\ndepth = 3\nattach_layer = 3\n[train]\nepochs = 7\n")
    c = load_config(path, overrides=["train.epochs=9", 'refine.mode="freeze"'], env={})
    assert (c.seed, c.model.depth, c.train.epochs, c.refine.mode) == (4, 3, 9, "freeze")
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"dataset": {"n_train": 3}}))
    assert load_config(j, env={}).dataset.n_train == 3


def test_env_seed_override():
    assert load_config(overrides=["seed=3"], env={SEED_ENV: "11"}).seed == 11
    with pytest.raises(ConfigError):
        load_config(env={SEED_ENV: "abc"})


@pytest.mark.parametrize("override", ["dataset.k_min=1", "dataset.k_max=51", "dataset.k_min=5",
                                      "model.attach_layer=9", "refine.alpha=2", "dataset.shapes=[\"torus\"]"])
def test_invalid_values(override):
    extra = ["dataset.k_max=4"] if override == "dataset.k_min=5" else []
    with pytest.raises(ConfigError):
        load_config(overrides=[override] + extra, env={})


def test_missing_file_and_bad_preset(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        load_config(preset="huge")


def test_hash_ignores_paths_only():
    a = load_config(preset="smoke", env={})
    b = load_config(preset="smoke", overrides=['paths.root="/elsewhere"'], env={})
    c = load_config(preset="smoke", overrides=["seed=1"], env={})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert set(PRESETS) >= {"desk", "full", "smoke"}


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "object", "train", 3) == derive_seed(0, "object", "train", 3)
    seeds = {derive_seed(0, "object", "train", i) for i in range(200)}
    assert len(seeds) == 200
    assert derive_seed(1, "object", "train", 0) != derive_seed(0, "object", "train", 0)


def test_overrides_do_not_leak_into_presets():
    load_config(preset="smoke", overrides=["dataset.k_max=2", "query.M=64"], env={})
    assert load_config(preset="smoke", env={}).dataset.k_max == 3
    assert load_config(preset="smoke", env={}).query.M == 96
