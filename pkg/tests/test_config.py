import pytest

from cbodd.config import (
    RunConfig,
    VARIANT_IDS,
    desk_profile,
    paper_profile,
    variant_spec,
)
from cbodd.errors import ConfigError


class TestDefaults:
    def test_desk_profile_dimensions(self):
        cfg = desk_profile()
        assert cfg.embed_dim == 64
        assert cfg.shared_dim == 8
        assert cfg.disentangled_dim == 16
        assert cfg.frame_size == 32
        assert cfg.frames_per_clip == 8
        assert cfg.epochs <= 30

    def test_loss_weights_defaults(self):
        cfg = desk_profile()
        assert cfg.lambda_branch == 0.4
        assert cfg.lambda_cross == 0.25

    def test_paper_profile_values(self):
        cfg = paper_profile()
        assert cfg.embed_dim == 2048
        assert cfg.shared_dim == 128
        assert cfg.disentangled_dim == 512
        assert cfg.epochs == 100
        assert cfg.learning_rate == 1e-2
        assert cfg.weight_decay == 1e-4
        assert cfg.step_size == 5

    def test_every_field_has_a_default(self):
        RunConfig().validate()


class TestSerialization:
    def test_round_trip(self):
        cfg = desk_profile(seed=9, lambda_cross=0.5, variant="CBO-wo-LS")
        again = RunConfig.from_text(cfg.to_text())
        assert again == cfg

    def test_digest_ignores_formatting(self):
        cfg = desk_profile()
        text = cfg.to_text()
        shuffled = "\n".join(reversed(text.strip().split("\n\n"))) + "\n"
        assert RunConfig.from_text(shuffled).digest == cfg.digest

    def test_digest_changes_with_values(self):
        assert desk_profile().digest != desk_profile(lambda_cross=0.26).digest

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.from_text("[run]\nbogus = 1\n")

    def test_partial_file_keeps_defaults(self):
        cfg = RunConfig.from_text("[loss]\nlambda_branch = 0.9\n")
        assert cfg.lambda_branch == 0.9
        assert cfg.lambda_cross == 0.25

    def test_branch_tuples_parse(self):
        cfg = RunConfig.from_text("[branch.ls]\nchannels = 4,8,12\nstrides = 2,2,1\n")
        assert cfg.ls.channels == (4, 8, 12)
        assert cfg.ls.strides == (2, 2, 1)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "nope.cfg")


class TestValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"variant": "NOT-A-VARIANT"},
            {"embed_dim": 30, "attention_heads": 4},
            {"head_sharing": "sometimes"},
            {"tie_rule": "coin-flip"},
            {"lambda_branch": -0.1},
            {"frame_size": 8},
            {"train_fraction": 1.5},
        ],
    )
    def test_bad_values_rejected(self, overrides):
        from dataclasses import replace

        cfg = replace(RunConfig(), **overrides)
        with pytest.raises(ConfigError):
            cfg.validate()


class TestVariants:
    def test_all_ids_resolve(self):
        for vid in VARIANT_IDS:
            spec = variant_spec(vid)
            assert spec.branches

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            variant_spec("FULL-EXTRA")

    def test_single_branch_variants_disable_cross(self):
        assert variant_spec("BO-wo-MG-CE").branches == ("LS",)
        assert not variant_spec("BO-wo-MG-CE").cross_penalty
        assert variant_spec("BO-wo-LS-CE").branches == ("MG",)
        assert variant_spec("BO-wo-LS-MG").branches == ("CE",)

    def test_no_penalty_variant_keeps_all_branches(self):
        spec = variant_spec("MB-wo-BO-CBO")
        assert spec.branches == ("LS", "MG", "CE")
        assert not spec.branch_penalty
        assert not spec.cross_penalty

    def test_full_keeps_everything(self):
        spec = variant_spec("FULL")
        assert spec.branches == ("LS", "MG", "CE")
        assert spec.branch_penalty and spec.cross_penalty
