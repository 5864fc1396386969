"""Strict experiment-file parsing."""

import pytest

from bamforge.config import ExperimentFile, load_experiment, parse_experiment
from bamforge.errors import ConfigError

GOOD = """
[model]
d_model=32
d_ff=64
n_heads=2
n_layers=2
vocab=256
n_ctx=64
tie_embeddings=true

[domains]
names=general,arith,bracket
corpus_tokens=50000

[schedules]
peak_lr=0.002
warmup_steps=50

[budgets]
batch_sequences=4
pretrain_tokens=100000
cpt_tokens=40000
mixture_tokens=40000
match=CM

[recipe]
target_archs=btx,bam_shared_kv
ffn_topk=1
attn_routing=top2

[eval]
eval_tokens=4096
"""


class TestParsing:
    def test_good_file(self):
        exp = parse_experiment(GOOD)
        assert exp.model.d_model == 32
        assert exp.domain_names == ["general", "arith", "bracket"]
        assert exp.expert_domains == ["arith", "bracket"]
        assert exp.match == "CM"
        assert exp.target_archs == ["btx", "bam_shared_kv"]
        assert exp.attn_routing == "topk" and exp.attn_topk == 2
        assert exp.peak_lr == pytest.approx(0.002)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_experiment("[model]\nd_model=32\nwingspan=7\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_experiment("[tuning]\nx=1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_experiment("[model]\nd_model=32\nd_model=64\n")

    def test_key_outside_section_rejected(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_experiment("d_model=32\n")

    def test_bad_match_mode(self):
        with pytest.raises(ConfigError):
            parse_experiment("[budgets]\nmatch=XY\n")

    def test_must_include_general(self):
        with pytest.raises(ConfigError, match="general"):
            parse_experiment("[domains]\nnames=arith,sorted\n")

    def test_comments_and_blank_lines(self):
        exp = parse_experiment("# header\n[model]\n# note\nd_model=64  # inline\n\n")
        assert exp.model.d_model == 64

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment(tmp_path / "none.cfg")

    def test_render_round_trips(self):
        exp = parse_experiment(GOOD)
        again = parse_experiment(exp.render())
        assert again == exp

    def test_defaults_round_trip(self):
        exp = ExperimentFile()
        assert parse_experiment(exp.render()) == exp
