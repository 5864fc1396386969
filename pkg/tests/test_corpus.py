"""Synthetic domain generators and the mixture sampler statistics."""

import numpy as np
import pytest

from bamforge.corpus import (MixtureSpec, mixture_sampler, substream,
                             synth_corpus)
from bamforge.errors import ConfigError


def units(stream: np.ndarray, sep: str) -> set[str]:
    text = stream.tobytes().decode("ascii")
    return {u for u in text.split(sep) if u}


class TestSynthCorpus:
    def test_deterministic_given_rng(self):
        a = synth_corpus("arith", 50_000, np.random.default_rng(7))
        b = synth_corpus("arith", 50_000, np.random.default_rng(7))
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.eval, b.eval)

    def test_arith_equations_all_true(self):
        c = synth_corpus("arith", 80_000, np.random.default_rng(3))
        for split in (c.train, c.eval):
            for eq in units(split, ";"):
                lhs, rhs = eq.split("=")
                a, b = lhs.split("+")
                assert int(a) + int(b) == int(rhs)

    def test_sorted_pairs_are_sorted(self):
        c = synth_corpus("sorted", 50_000, np.random.default_rng(4))
        for unit in units(c.train, ";"):
            lhs, rhs = unit.split("->")
            vals = [int(v) for v in lhs.split(",")]
            assert [int(v) for v in rhs.split(",")] == sorted(vals)

    def test_brackets_balanced(self):
        pairs = {")": "(", "]": "[", "}": "{", ">": "<"}
        c = synth_corpus("bracket", 50_000, np.random.default_rng(5))
        for word in units(c.train, " "):
            stack = []
            for ch in word:
                if ch in "([{<":
                    stack.append(ch)
                elif ch in ")]}>":
                    assert stack and stack.pop() == pairs[ch]
            assert not stack

    def test_general_is_ascii_words(self):
        c = synth_corpus("general", 50_000, np.random.default_rng(6))
        text = c.train.tobytes().decode("ascii")
        assert set(text) <= set("abcdefghijklmnopqrstuvwxyz. ")

    def test_splits_share_no_unit(self):
        for kind, sep in (("arith", ";"), ("sorted", ";"), ("general", ". ")):
            c = synth_corpus(kind, 60_000, np.random.default_rng(8))
            assert units(c.train, sep).isdisjoint(units(c.eval, sep))

    def test_split_digests_differ(self):
        c = synth_corpus("arith", 50_000, np.random.default_rng(9))
        assert c.train.tobytes() != c.eval.tobytes()
        assert c.eval.size > 0

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            synth_corpus("arith", 512, np.random.default_rng(0))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            synth_corpus("poetry", 10_000, np.random.default_rng(0))


class TestMixtureSpec:
    def test_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            MixtureSpec({"a": 0.5, "b": 0.6})

    def test_no_negatives(self):
        with pytest.raises(ConfigError):
            MixtureSpec({"a": 1.5, "b": -0.5})


class TestMixtureSampler:
    def _corpora(self):
        names = ("general", "arith", "bracket", "sorted")
        return {n: synth_corpus(n, 60_000, substream(0, "corpus", n)) for n in names}

    def test_single_domain(self):
        corpora = self._corpora()
        spec = MixtureSpec({"arith": 1.0})
        it = mixture_sampler(corpora, spec, substream(0, "s"), 32, 4)
        for _ in range(5):
            _, domains = next(it)
            assert set(domains) == {"arith"}

    def test_ninety_ten_within_binomial_bound(self):
        corpora = self._corpora()
        spec = MixtureSpec({"arith": 0.9, "general": 0.1})
        it = mixture_sampler(corpora, spec, substream(1, "s"), 32, 10)
        n_arith = 0
        for _ in range(1000):  # 10k sequences
            _, domains = next(it)
            n_arith += sum(d == "arith" for d in domains)
        frac = n_arith / 10_000
        assert 0.885 <= frac <= 0.915

    def test_four_way_quarter_within_one_percent(self):
        corpora = self._corpora()
        spec = MixtureSpec({n: 0.25 for n in corpora})
        it = mixture_sampler(corpora, spec, substream(2, "s"), 32, 10)
        counts = {n: 0 for n in corpora}
        for _ in range(2000):  # 20k draws puts the 1% bound past 3 sigma
            _, domains = next(it)
            for d in domains:
                counts[d] += 1
        for n, c in counts.items():
            assert abs(c / 20_000 - 0.25) < 0.01, (n, c)

    def test_unknown_domain_rejected(self):
        corpora = self._corpora()
        spec = MixtureSpec({"law": 1.0})
        with pytest.raises(ConfigError):
            next(mixture_sampler(corpora, spec, substream(0, "s"), 32, 2))

    def test_windows_come_from_the_right_stream(self):
        corpora = self._corpora()
        spec = MixtureSpec({"arith": 1.0})
        batch, domains = next(mixture_sampler(corpora, spec, substream(3, "s"), 32, 4))
        text = batch.astype(np.uint8).tobytes().decode("ascii")
        assert set(text) <= set("0123456789+=;")

    def test_deterministic_stream(self):
        corpora = self._corpora()
        spec = MixtureSpec({n: 0.25 for n in corpora})
        a, _ = next(mixture_sampler(corpora, spec, substream(4, "s"), 32, 4))
        b, _ = next(mixture_sampler(corpora, spec, substream(4, "s"), 32, 4))
        np.testing.assert_array_equal(a, b)


class TestSubstream:
    def test_named_streams_independent(self):
        a = substream(0, "x").integers(0, 1 << 30, size=4)
        b = substream(0, "y").integers(0, 1 << 30, size=4)
        assert not np.array_equal(a, b)

    def test_reproducible(self):
        a = substream(5, "corpus", "arith").integers(0, 1 << 30, size=4)
        b = substream(5, "corpus", "arith").integers(0, 1 << 30, size=4)
        np.testing.assert_array_equal(a, b)
