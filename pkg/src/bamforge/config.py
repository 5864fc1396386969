"""Experiment-file parsing: INI-style sections of key=value pairs.

Parsing is strict: unknown sections or keys are an error, so a recorded
experiment file always means what it says. Every run writes the resolved
config back into its output directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .upcycle import parse_attn_routing

SECTIONS = ("model", "domains", "schedules", "budgets", "recipe", "eval")

_KEYS = {
    "model": {"d_model", "d_ff", "n_heads", "n_layers", "vocab", "n_ctx",
              "tie_embeddings"},
    "domains": {"names", "corpus_tokens"},
    "schedules": {"peak_lr", "warmup_steps", "floor_fraction", "cpt_lr_scale",
                  "mix_lr_scale", "alpha", "beta", "weight_decay", "clip",
                  "beta1", "beta2", "adam_eps"},
    "budgets": {"batch_sequences", "pretrain_tokens", "cpt_tokens",
                "mixture_tokens", "match"},
    "recipe": {"target_archs", "ffn_topk", "attn_routing",
               "extra_seed_ffn_copies"},
    "eval": {"eval_tokens"},
}

_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


@dataclass
class ExperimentFile:
    """Parsed and validated experiment description."""

    model: ModelConfig = field(default_factory=ModelConfig)
    domain_names: list[str] = field(default_factory=lambda: ["general", "arith", "bracket", "sorted"])
    corpus_tokens: int = 400_000
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    floor_fraction: float = 0.1
    cpt_lr_scale: float = 0.5
    mix_lr_scale: float = 0.5
    alpha: float = 0.01
    beta: float = 0.001
    weight_decay: float = 0.1
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_sequences: int = 16
    pretrain_tokens: int = 2_000_000
    cpt_tokens: int = 1_000_000
    mixture_tokens: int = 1_000_000
    match: str = "DM"
    target_archs: list[str] = field(default_factory=lambda: ["btx", "bam_expert_kv"])
    ffn_topk: int = 1
    attn_routing: str = "soft"
    attn_topk: int = 1
    extra_seed_ffn_copies: int = 0
    eval_tokens: int = 32768

    def validate(self) -> None:
        if self.match not in ("DM", "CM"):
            raise ConfigError(f"match must be DM or CM, got {self.match!r}")
        if "general" not in self.domain_names:
            raise ConfigError("domains must include 'general' (the pretraining domain)")
        for arch in self.target_archs:
            if arch not in ("btx", "bam_expert_kv", "bam_shared_kv"):
                raise ConfigError(f"unknown target arch {arch!r}")
        if self.batch_sequences < 1:
            raise ConfigError("batch_sequences must be >= 1")

    @property
    def expert_domains(self) -> list[str]:
        return [d for d in self.domain_names if d != "general"]

    def batch_tokens(self) -> int:
        return self.batch_sequences * self.model.n_ctx

    def render(self) -> str:
        """Canonical serialized form (embedded in every run directory)."""
        m = self.model
        lines = [
            "[model]",
            f"d_model={m.d_model}", f"d_ff={m.d_ff}", f"n_heads={m.n_heads}",
            f"n_layers={m.n_layers}", f"vocab={m.vocab}", f"n_ctx={m.n_ctx}",
            f"tie_embeddings={str(m.tie_embeddings).lower()}",
            "",
            "[domains]",
            f"names={','.join(self.domain_names)}",
            f"corpus_tokens={self.corpus_tokens}",
            "",
            "[schedules]",
            f"peak_lr={self.peak_lr!r}", f"warmup_steps={self.warmup_steps}",
            f"floor_fraction={self.floor_fraction!r}",
            f"cpt_lr_scale={self.cpt_lr_scale!r}", f"mix_lr_scale={self.mix_lr_scale!r}",
            f"alpha={self.alpha!r}", f"beta={self.beta!r}",
            f"weight_decay={self.weight_decay!r}", f"clip={self.clip!r}",
            f"beta1={self.beta1!r}", f"beta2={self.beta2!r}", f"adam_eps={self.adam_eps!r}",
            "",
            "[budgets]",
            f"batch_sequences={self.batch_sequences}",
            f"pretrain_tokens={self.pretrain_tokens}",
            f"cpt_tokens={self.cpt_tokens}",
            f"mixture_tokens={self.mixture_tokens}",
            f"match={self.match}",
            "",
            "[recipe]",
            f"target_archs={','.join(self.target_archs)}",
            f"ffn_topk={self.ffn_topk}",
            f"attn_routing={'soft' if self.attn_routing == 'soft' else 'top' + str(self.attn_topk)}",
            f"extra_seed_ffn_copies={self.extra_seed_ffn_copies}",
            "",
            "[eval]",
            f"eval_tokens={self.eval_tokens}",
        ]
        return "\n".join(lines) + "\n"


def _parse_sections(text: str, origin: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise ConfigError(f"{origin}:{ln}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{ln}: expected key=value, got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{ln}: key outside any [section]")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS[current]:
            raise ConfigError(f"{origin}:{ln}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"{origin}:{ln}: duplicate key {key!r}")
        sections[current][key] = val
    return sections


def _to_bool(val: str, origin: str) -> bool:
    try:
        return _BOOL[val.lower()]
    except KeyError:
        raise ConfigError(f"{origin}: cannot parse boolean {val!r}") from None


def parse_experiment(text: str, origin: str = "<config>") -> ExperimentFile:
    sections = _parse_sections(text, origin)
    exp = ExperimentFile()

    m = sections.get("model", {})
    model_kwargs = {}
    for key, val in m.items():
        model_kwargs[key] = _to_bool(val, origin) if key == "tie_embeddings" else int(val)
    exp.model = ModelConfig(**model_kwargs)

    d = sections.get("domains", {})
    if "names" in d:
        exp.domain_names = [s.strip() for s in d["names"].split(",") if s.strip()]
    if "corpus_tokens" in d:
        exp.corpus_tokens = int(d["corpus_tokens"])

    s = sections.get("schedules", {})
    for key in ("peak_lr", "floor_fraction", "cpt_lr_scale", "mix_lr_scale", "alpha",
                "beta", "weight_decay", "clip", "beta1", "beta2", "adam_eps"):
        if key in s:
            setattr(exp, key, float(s[key]))
    if "warmup_steps" in s:
        exp.warmup_steps = int(s["warmup_steps"])

    b = sections.get("budgets", {})
    for key in ("batch_sequences", "pretrain_tokens", "cpt_tokens", "mixture_tokens"):
        if key in b:
            setattr(exp, key, int(float(b[key])))
    if "match" in b:
        exp.match = b["match"].upper()

    r = sections.get("recipe", {})
    if "target_archs" in r:
        exp.target_archs = [s2.strip() for s2 in r["target_archs"].split(",") if s2.strip()]
    if "ffn_topk" in r:
        exp.ffn_topk = int(r["ffn_topk"])
    if "attn_routing" in r:
        exp.attn_routing, exp.attn_topk = parse_attn_routing(r["attn_routing"])
    if "extra_seed_ffn_copies" in r:
        exp.extra_seed_ffn_copies = int(r["extra_seed_ffn_copies"])

    e = sections.get("eval", {})
    if "eval_tokens" in e:
        exp.eval_tokens = int(float(e["eval_tokens"]))

    exp.validate()
    return exp


def load_experiment(path: str | Path) -> ExperimentFile:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_experiment(p.read_text(), origin=str(p))
