"""Synthetic byte-level domain corpora and the mixture batch sampler.

Each domain emits short self-contained units (sentences, equations, bracket
words, sort pairs). Units are routed to the train or eval split by a content
hash, so the two splits can never share a unit, even when a generator
repeats itself.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError

KINDS = ("general", "arith", "bracket", "sorted")
EVAL_BUCKETS = 10  # ~10% of units land in the eval split

_SYLLABLES = ("ba", "be", "bo", "da", "de", "du", "ka", "ke", "ki", "lo",
              "ma", "mi", "mu", "na", "ne", "no", "pa", "po", "ra", "re",
              "ri", "sa", "se", "so", "ta", "ti", "tu", "va", "vo", "za")
_BRACKETS = (("(", ")"), ("[", "]"), ("{", "}"), ("<", ">"))


@dataclass
class DomainCorpus:
    name: str
    train: np.ndarray  # uint8 byte ids
    eval: np.ndarray

    def split(self, which: str) -> np.ndarray:
        if which not in ("train", "eval"):
            raise ConfigError(f"unknown split {which!r}")
        return self.train if which == "train" else self.eval


def _general_unit(rng: np.random.Generator, words: list[str]) -> str:
    n = int(rng.integers(4, 11))
    picks = [words[int(rng.integers(0, len(words)))] for _ in range(n)]
    return " ".join(picks) + ". "


def _arith_unit(rng: np.random.Generator, words=None) -> str:
    a = int(rng.integers(0, 100))
    b = int(rng.integers(0, 100))
    return f"{a}+{b}={a + b};"


def _bracket_unit(rng: np.random.Generator, words=None) -> str:
    def nest(depth: int) -> str:
        if depth == 0 or rng.random() < 0.3:
            n = int(rng.integers(1, 4))
            return "".join(chr(ord("a") + int(rng.integers(0, 26))) for _ in range(n))
        op, cl = _BRACKETS[int(rng.integers(0, len(_BRACKETS)))]
        inner = "".join(nest(depth - 1) for _ in range(int(rng.integers(1, 3))))
        return op + inner + cl

    return nest(int(rng.integers(2, 5))) + " "


def _sorted_unit(rng: np.random.Generator, words=None) -> str:
    n = int(rng.integers(3, 9))
    vals = [int(rng.integers(0, 10)) for _ in range(n)]
    lhs = ",".join(str(v) for v in vals)
    rhs = ",".join(str(v) for v in sorted(vals))
    return f"{lhs}->{rhs};"


def _word_bank(rng: np.random.Generator, n_words: int = 150) -> list[str]:
    words = []
    for _ in range(n_words):
        k = int(rng.integers(1, 4))
        words.append("".join(_SYLLABLES[int(rng.integers(0, len(_SYLLABLES)))]
                             for _ in range(k)))
    return words


def synth_corpus(kind: str, n_tokens: int, rng: np.random.Generator) -> DomainCorpus:
    """Generate ~n_tokens bytes of one domain, pre-split into train/eval.

    Deterministic given the generator state. Every arithmetic unit is a true
    equation; every sorted unit maps a list to its sorted form.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown corpus kind {kind!r}; choose from {KINDS}")
    if n_tokens < 1024:
        raise ConfigError(f"corpus needs >= 1024 tokens, got {n_tokens}")
    make = {"general": _general_unit, "arith": _arith_unit,
            "bracket": _bracket_unit, "sorted": _sorted_unit}[kind]
    words = _word_bank(rng) if kind == "general" else None
    train_parts: list[bytes] = []
    eval_parts: list[bytes] = []
    total = 0
    while total < n_tokens:
        unit = make(rng, words).encode("ascii")
        total += len(unit)
        if zlib.crc32(unit) % EVAL_BUCKETS == 0:
            eval_parts.append(unit)
        else:
            train_parts.append(unit)
    train = np.frombuffer(b"".join(train_parts), dtype=np.uint8).copy()
    evl = np.frombuffer(b"".join(eval_parts), dtype=np.uint8).copy()
    return DomainCorpus(name=kind, train=train, eval=evl)


@dataclass
class MixtureSpec:
    """Domain -> sampling fraction; fractions must be a probability vector."""

    weights: dict[str, float]

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError(f"negative mixture weight in {self.weights}")
        s = sum(self.weights.values())
        if abs(s - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {s}, expected 1")

    def names(self) -> list[str]:
        return sorted(self.weights)


def mixture_sampler(corpora: dict[str, DomainCorpus], spec: MixtureSpec,
                    rng: np.random.Generator, seq_len: int,
                    batch_size: int) -> Iterator[tuple[np.ndarray, list[str]]]:
    """Endless stream of (batch, domains): each row is a (seq_len+1)-token
    window drawn from domain d with probability spec.weights[d]."""
    names = spec.names()
    for name in names:
        if name not in corpora:
            raise ConfigError(f"mixture references unknown domain {name!r}")
        if corpora[name].train.size < seq_len + 1:
            raise ConfigError(f"domain {name!r} train split shorter than one window")
    probs = np.array([spec.weights[n] for n in names])
    while True:
        batch = np.empty((batch_size, seq_len + 1), dtype=np.int64)
        domains = []
        for i in range(batch_size):
            d = names[int(rng.choice(len(names), p=probs))]
            stream = corpora[d].train
            start = int(rng.integers(0, stream.size - seq_len))
            batch[i] = stream[start:start + seq_len + 1]
            domains.append(d)
        yield batch, domains


def substream(master_seed: int, *names) -> np.random.Generator:
    """Named, independent RNG stream derived from one experiment seed."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence([master_seed] + keys))
