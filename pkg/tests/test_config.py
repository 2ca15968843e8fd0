"""Run-config parsing tests: defaults, typed values, derived seeds, and
strict rejection of unknown or malformed keys.
"""

import pytest

from framefill.config import (
    default_run_config,
    load_run_config,
    parse_run_config,
)
from framefill.errors import ContractError


class TestDefaults:
    def test_empty_text_yields_desk_defaults(self):
        cfg = parse_run_config("")
        assert cfg.seed == 0
        assert cfg.data.n_clips == 20 and cfg.data.height == 32
        assert cfg.tokenizer.color_size == 64
        assert cfg.model.n_frames == 8 and cfg.model.color_vocab == 64
        assert cfg.model.embed_dim == 64 and cfg.model.blocks == 4
        assert cfg.train.steps == 2000
        assert cfg.decode.steps == 32 and cfg.decode.temperature == 4.5
        assert cfg.decode.anchors == (0, 7)

    def test_default_anchors_follow_the_model(self):
        cfg = parse_run_config(
            "model.n_frames = 4\nmodel.grid_h = 4\nmodel.grid_w = 4\n"
            "model.window_h = 2\nmodel.window_w = 2"
        )
        assert cfg.decode.anchors == (0, 3)


class TestParsing:
    def test_sections_types_and_comments(self):
        cfg = parse_run_config(
            """
            # a comment line
            seed = 11
            data.n_clips = 3          # trailing comment
            train.learning_rate = 3e-3
            train.structure_dropout = none
            decode.anchors = 0,2,7
            decode.temperature = 0
            """
        )
        assert cfg.seed == 11
        assert cfg.data.n_clips == 3
        assert cfg.train.learning_rate == 3e-3
        assert cfg.train.structure_dropout is None
        assert cfg.decode.anchors == (0, 2, 7)
        assert cfg.decode.temperature == 0.0

    def test_optional_dropout_accepts_a_number(self):
        cfg = parse_run_config("train.structure_dropout = 0.25")
        assert cfg.train.structure_dropout == 0.25

    def test_seed_override_beats_file_seed(self):
        cfg = parse_run_config("seed = 11", seed_override=99)
        assert cfg.seed == 99

    def test_derived_seeds_are_stable_and_distinct(self):
        a = default_run_config(7)
        b = default_run_config(7)
        c = default_run_config(8)
        assert a.train.seed == b.train.seed
        assert a.decode.seed == b.decode.seed
        assert a.train.seed != a.decode.seed
        assert a.train.seed != a.seed
        assert a.train.seed != c.train.seed

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 3\ndata.n_clips = 2\n")
        cfg = load_run_config(path)
        assert cfg.seed == 3 and cfg.data.n_clips == 2


class TestRejection:
    def test_unknown_keys(self):
        with pytest.raises(ContractError, match="unknown key"):
            parse_run_config("model.bogus = 1")
        with pytest.raises(ContractError, match="unknown key"):
            parse_run_config("flavor = vanilla")
        with pytest.raises(ContractError, match="unknown key"):
            parse_run_config("bogus.steps = 1")

    def test_derived_seed_keys_are_not_settable(self):
        with pytest.raises(ContractError, match="unknown key"):
            parse_run_config("train.seed = 1")
        with pytest.raises(ContractError, match="unknown key"):
            parse_run_config("decode.seed = 1")

    def test_duplicate_key(self):
        with pytest.raises(ContractError, match="duplicate"):
            parse_run_config("seed = 1\nseed = 2")

    def test_malformed_line(self):
        with pytest.raises(ContractError, match="key = value"):
            parse_run_config("just some words")

    def test_type_errors(self):
        with pytest.raises(ContractError, match="cannot parse"):
            parse_run_config("train.steps = 3.5")
        with pytest.raises(ContractError, match="cannot parse"):
            parse_run_config("decode.anchors = 0,last")

    def test_module_invariants_run_at_parse_time(self):
        with pytest.raises(ContractError):  # embed_dim not divisible by heads
            parse_run_config("model.embed_dim = 66")
        with pytest.raises(ContractError):  # data sampler bounds
            parse_run_config("data.min_shapes = 5")
        with pytest.raises(ContractError):  # decode schedule name
            parse_run_config("decode.mask_schedule = step")
