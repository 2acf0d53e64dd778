import pytest

from advfoolgen.config import default_config, parse_override, resolve_config, stage_seed
from advfoolgen.errors import ConfigError


class TestDefaults:
    def test_documented_defaults_present(self):
        cfg = resolve_config(None, [])
        assert cfg["attack"]["mgn"] == 0.1
        assert cfg["attack"]["d_steps_per_g"] == 5
        assert cfg["attack"]["weights"] == {"alpha": 0.1, "beta": 0.3, "gamma": 0.3,
                                            "lambda": 0.3}
        assert cfg["baseline"]["epsilon"] == 0.07
        assert cfg["defense"]["quality"] == 75
        assert cfg["defense"]["bits"] in (3, 8)

    def test_empty_config_file_keeps_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert resolve_config(path, []) == resolve_config(None, [])

    def test_default_tree_is_fresh_copy(self):
        a = default_config()
        a["attack"]["mgn"] = 0.9
        assert default_config()["attack"]["mgn"] == 0.1


class TestOverrides:
    def test_override_wins_over_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("classifier:\n  epochs: 3\n")
        cfg = resolve_config(path, ["classifier.epochs=9"])
        assert cfg["classifier"]["epochs"] == 9

    def test_override_types_parsed(self):
        cfg = resolve_config(None, ["attack.mgn=0.2", "classifier.epochs=7",
                                    "baseline.random_start=true",
                                    "data.train_subset=null"])
        assert cfg["attack"]["mgn"] == 0.2
        assert cfg["classifier"]["epochs"] == 7
        assert cfg["baseline"]["random_start"] is True
        assert cfg["data"]["train_subset"] is None

    def test_unknown_key_names_offender(self):
        with pytest.raises(ConfigError, match="attack.mgnitude"):
            resolve_config(None, ["attack.mgnitude=0.3"])

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("attack:\n  warmup: 5\n")
        with pytest.raises(ConfigError, match="attack.warmup"):
            resolve_config(path, [])

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_override("attack.mgn:0.3")


class TestConstraints:
    def test_unbalanced_weights_rejected(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            resolve_config(None, ["attack.weights.alpha=0.5"])

    def test_rebalanced_weights_accepted(self):
        cfg = resolve_config(None, ["attack.weights.alpha=0.5",
                                    "attack.weights.beta=0.1",
                                    "attack.weights.gamma=0.1",
                                    "attack.weights.lambda=0.3"])
        assert cfg["attack"]["weights"]["alpha"] == 0.5

    @pytest.mark.parametrize("override,pattern", [
        ("attack.mgn=0", "mgn"),
        ("attack.mgn=1.2", "mgn"),
        ("attack.d_steps_per_g=0", "d_steps_per_g"),
        ("defense.bits=9", "bits"),
        ("defense.quality=0", "quality"),
        ("baseline.epsilon=-0.1", "epsilon"),
        ("attack.gan_mode=hinge", "gan_mode"),
        ("analysis.folds=1", "folds"),
        ("baseline.name=deepfool", "baseline.name"),
    ])
    def test_constraint_violations(self, override, pattern):
        with pytest.raises(ConfigError, match=pattern):
            resolve_config(None, [override])

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            resolve_config(tmp_path / "nope.yaml", [])


class TestStageSeeds:
    def test_stages_get_distinct_streams(self):
        cfg = resolve_config(None, [])
        seeds = {stage_seed(cfg, s) for s in
                 ("train-classifier", "train-attack", "generate", "defend")}
        assert len(seeds) == 4

    def test_root_seed_changes_streams(self):
        a = stage_seed(resolve_config(None, ["seed=1"]), "train-attack")
        b = stage_seed(resolve_config(None, ["seed=2"]), "train-attack")
        assert a != b

    def test_same_inputs_same_seed(self):
        cfg = resolve_config(None, [])
        assert stage_seed(cfg, "generate") == stage_seed(cfg, "generate")
