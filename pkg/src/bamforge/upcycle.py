"""Checkpoint surgery: branching a seed, merging branches, and installing
dense experts into mixture architectures (BTX and both BAM variants).

Expert-owned weights are inherited verbatim from their source checkpoints;
everything shared (norms, embeddings, and, for BTX, the attention stack) is
the uniform average over the distinct sources; routers start random.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, SurgeryError
from .model import Checkpoint, CheckpointMeta, ModelConfig, param_role, param_shapes
from .tensor import Tensor

ROUTER_INIT_STD = 0.02  # keeps initial gates near 1/N, so identity upcycling is exact-ish
MERGE_ROLES = ("norm", "embedding_in", "embedding_out")
ATTN_ROLES = ("attn_q", "attn_k", "attn_v", "attn_o")
FFN_ROLES = ("ffn_gate", "ffn_up", "ffn_down")


@dataclass
class UpcycleRecipe:
    seed: Checkpoint
    experts: list[Checkpoint]
    target_arch: str = "btx"
    extra_seed_ffn_copies: int = 0
    ffn_topk: int = 1
    attn_routing: str = "soft"
    attn_topk: int = 1
    router_init_seed: int = 0

    def sources(self) -> list[Checkpoint]:
        """Distinct dense sources, seed first (FFN bank order, before extras)."""
        return [self.seed] + list(self.experts)

    def n_ffn_experts(self) -> int:
        return len(self.experts) + 1 + self.extra_seed_ffn_copies

    def validate(self) -> None:
        if self.target_arch not in ("btx", "bam_expert_kv", "bam_shared_kv"):
            raise ConfigError(f"unknown target arch {self.target_arch!r}")
        if self.extra_seed_ffn_copies < 0:
            raise ConfigError("extra_seed_ffn_copies must be >= 0")
        core = self.seed.config.to_dict()
        for k in ("arch", "n_experts", "ffn_topk", "attn_routing", "attn_topk"):
            core.pop(k)
        for i, e in enumerate(self.experts):
            other = e.config.to_dict()
            for k in ("arch", "n_experts", "ffn_topk", "attn_routing", "attn_topk"):
                other.pop(k)
            if other != core:
                raise SurgeryError(f"expert {i} core dims differ from seed: {other} vs {core}")
            if e.config.arch != "dense" or self.seed.config.arch != "dense":
                raise SurgeryError("upcycling sources must be dense checkpoints")


def branch(seed: Checkpoint, n: int, domain_tags: list[str] | None = None,
           rng_seeds: list[int] | None = None) -> list[Checkpoint]:
    """n bitwise-identical copies of the seed, each tagged for its own domain."""
    if n < 1:
        raise ConfigError(f"branch: n must be >= 1, got {n}")
    if domain_tags is None:
        domain_tags = [f"domain{i}" for i in range(n)]
    if rng_seeds is None:
        rng_seeds = [seed.meta.rng_seed + 1 + i for i in range(n)]
    if len(domain_tags) != n or len(rng_seeds) != n:
        raise ConfigError("branch: need one domain tag and one rng seed per copy")
    out = []
    for tag, rs in zip(domain_tags, rng_seeds):
        copy = seed.clone()
        copy.meta = replace(seed.meta, domain_tag=tag, rng_seed=rs)
        out.append(copy)
    return out


def average_merge(sources: list[Checkpoint], roles: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Elementwise mean, per parameter, of every source param whose role is listed."""
    if not sources:
        raise SurgeryError("average_merge: no sources")
    names = [n for n, _ in param_shapes(sources[0].config) if param_role(n) in roles]
    merged: dict[str, np.ndarray] = {}
    for name in names:
        shape = sources[0].params[name].data.shape
        acc = np.zeros(shape)
        for s in sources:
            if name not in s.params:
                raise SurgeryError(f"average_merge: {name} missing from a source")
            if s.params[name].data.shape != shape:
                raise SurgeryError(f"average_merge: {name} shape mismatch")
            acc += s.params[name].data
        merged[name] = acc / len(sources)
    return merged


def init_router(d_model: int, n_experts: int, rng: np.random.Generator) -> np.ndarray:
    """Random router weights, normal(0, 0.02); deterministic given the generator state."""
    return rng.normal(0.0, ROUTER_INIT_STD, size=(d_model, n_experts))


def _router_rng(recipe: UpcycleRecipe, kind: str, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([recipe.router_init_seed, hash_stream(kind), block])
    return np.random.default_rng(ss)


def hash_stream(name: str) -> int:
    """Stable small integer for a named RNG substream."""
    import zlib

    return zlib.crc32(name.encode())


def _mixture_config(recipe: UpcycleRecipe) -> ModelConfig:
    base = recipe.seed.config
    return ModelConfig(
        d_model=base.d_model, d_ff=base.d_ff, n_heads=base.n_heads,
        n_layers=base.n_layers, vocab=base.vocab, n_ctx=base.n_ctx,
        arch=recipe.target_arch, n_experts=recipe.n_ffn_experts(),
        ffn_topk=recipe.ffn_topk, attn_routing=recipe.attn_routing,
        attn_topk=recipe.attn_topk, tie_embeddings=base.tie_embeddings,
    )


def _install_ffn_bank(params: dict[str, Tensor], recipe: UpcycleRecipe, block: int) -> None:
    sources = recipe.sources()
    bank = sources + [recipe.seed] * recipe.extra_seed_ffn_copies
    for e, src in enumerate(bank):
        for role in FFN_ROLES:
            src_t = src.params[f"blocks.{block}.{role}.0"]
            params[f"blocks.{block}.{role}.{e}"] = Tensor(src_t.data.copy(), requires_grad=True)


def build_btx(recipe: UpcycleRecipe) -> Checkpoint:
    """BTX: per-source FFN experts, averaged attention, random FFN router."""
    recipe.validate()
    if recipe.target_arch != "btx":
        raise ConfigError(f"build_btx got target_arch={recipe.target_arch!r}")
    cfg = _mixture_config(recipe)
    sources = recipe.sources()
    merged = average_merge(sources, MERGE_ROLES + ATTN_ROLES)
    params: dict[str, Tensor] = {}
    for name, val in merged.items():
        params[name] = Tensor(val, requires_grad=True)
    for b in range(cfg.n_layers):
        _install_ffn_bank(params, recipe, b)
        router = init_router(cfg.d_model, cfg.n_experts, _router_rng(recipe, "router_ffn", b))
        params[f"blocks.{b}.router_ffn"] = Tensor(router, requires_grad=True)
    meta = CheckpointMeta(phase="mixture", domain_tag="btx",
                          tokens_trained=recipe.seed.meta.tokens_trained,
                          rng_seed=recipe.router_init_seed)
    out = Checkpoint(cfg, params, meta)
    out.validate()
    return out


def build_bam(recipe: UpcycleRecipe) -> Checkpoint:
    """BAM: per-source FFN *and* attention experts, two random routers per block."""
    recipe.validate()
    if recipe.target_arch not in ("bam_expert_kv", "bam_shared_kv"):
        raise ConfigError(f"build_bam got target_arch={recipe.target_arch!r}")
    if recipe.extra_seed_ffn_copies:
        raise SurgeryError("extra seed FFN copies are a BTX parameter-matching device; "
                           "BAM keeps one FFN expert per attention expert")
    cfg = _mixture_config(recipe)
    sources = recipe.sources()
    merged = average_merge(sources, MERGE_ROLES)
    params: dict[str, Tensor] = {}
    for name, val in merged.items():
        params[name] = Tensor(val, requires_grad=True)
    shared = recipe.target_arch == "bam_shared_kv"
    for b in range(cfg.n_layers):
        for e, src in enumerate(sources):
            for role in ("attn_q", "attn_o"):
                t = src.params[f"blocks.{b}.{role}.0"]
                params[f"blocks.{b}.{role}.{e}"] = Tensor(t.data.copy(), requires_grad=True)
            if not shared:
                for role in ("attn_k", "attn_v"):
                    t = src.params[f"blocks.{b}.{role}.0"]
                    params[f"blocks.{b}.{role}.{e}"] = Tensor(t.data.copy(), requires_grad=True)
        if shared:
            for role in ("attn_k", "attn_v"):
                acc = sum(s.params[f"blocks.{b}.{role}.0"].data for s in sources)
                params[f"blocks.{b}.{role}.shared"] = Tensor(acc / len(sources), requires_grad=True)
        _install_ffn_bank(params, recipe, b)
        for kind in ("router_ffn", "router_attn"):
            router = init_router(cfg.d_model, cfg.n_experts, _router_rng(recipe, kind, b))
            params[f"blocks.{b}.{kind}"] = Tensor(router, requires_grad=True)
    meta = CheckpointMeta(phase="mixture", domain_tag=recipe.target_arch,
                          tokens_trained=recipe.seed.meta.tokens_trained,
                          rng_seed=recipe.router_init_seed)
    out = Checkpoint(cfg, params, meta)
    out.validate()
    return out


def build_mixture(recipe: UpcycleRecipe) -> Checkpoint:
    if recipe.target_arch == "btx":
        return build_btx(recipe)
    return build_bam(recipe)


# -- recipe files ---------------------------------------------------------------


@dataclass
class RecipeFile:
    """Parsed form of the plain-text recipe consumed by the `mix` command."""

    seed_path: str
    expert_paths: list[str] = field(default_factory=list)
    target_arch: str = "btx"
    extra_seed_ffn_copies: int = 0
    ffn_topk: int = 1
    attn_routing: str = "soft"
    attn_topk: int = 1
    router_init_seed: int = 0

    KEYS = ("seed", "expert", "target_arch", "extra_seed_ffn_copies",
            "ffn_topk", "attn_routing", "router_init_seed")

    @classmethod
    def parse(cls, path: str | Path) -> "RecipeFile":
        seed_path = None
        experts: dict[int, str] = {}
        fields: dict[str, str] = {}
        for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "seed":
                seed_path = val
            elif key.startswith("expert."):
                experts[int(key.split(".", 1)[1])] = val
            elif key in cls.KEYS:
                fields[key] = val
            else:
                raise ConfigError(f"{path}:{ln}: unknown recipe key {key!r}")
        if seed_path is None:
            raise ConfigError(f"{path}: recipe missing seed=")
        routing, topk = parse_attn_routing(fields.get("attn_routing", "soft"))
        return cls(
            seed_path=seed_path,
            expert_paths=[experts[i] for i in sorted(experts)],
            target_arch=fields.get("target_arch", "btx"),
            extra_seed_ffn_copies=int(fields.get("extra_seed_ffn_copies", "0")),
            ffn_topk=int(fields.get("ffn_topk", "1")),
            attn_routing=routing,
            attn_topk=topk,
            router_init_seed=int(fields.get("router_init_seed", "0")),
        )

    def load(self, base_dir: str | Path = ".") -> UpcycleRecipe:
        from .checkpoint import load_checkpoint

        base = Path(base_dir)

        def resolve(p: str) -> Path:
            pp = Path(p)
            return pp if pp.is_absolute() else base / pp

        return UpcycleRecipe(
            seed=load_checkpoint(resolve(self.seed_path)),
            experts=[load_checkpoint(resolve(p)) for p in self.expert_paths],
            target_arch=self.target_arch,
            extra_seed_ffn_copies=self.extra_seed_ffn_copies,
            ffn_topk=self.ffn_topk,
            attn_routing=self.attn_routing,
            attn_topk=self.attn_topk,
            router_init_seed=self.router_init_seed,
        )


def parse_attn_routing(spec: str) -> tuple[str, int]:
    """'soft' -> ('soft', 1); 'top1'/'top2'/'topk:3' -> ('topk', k)."""
    s = spec.strip().lower()
    if s == "soft":
        return "soft", 1
    if s.startswith("topk:"):
        return "topk", int(s.split(":", 1)[1])
    if s.startswith("top") and s[3:].isdigit():
        return "topk", int(s[3:])
    raise ConfigError(f"cannot parse attention routing {spec!r}")
