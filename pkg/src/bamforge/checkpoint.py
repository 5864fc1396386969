"""Checkpoint directory format.

Layout:
    <dir>/manifest.txt      key=value lines: config.*, meta.*, param.<name>=<file>
    <dir>/<name>.bin        per-parameter binary: int64 LE rank, int64 LE extents,
                            then float64 LE values in row-major order.

Round trips are bit-exact: values are stored as raw doubles and the manifest
carries no timestamps or environment-dependent fields.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Checkpoint, CheckpointMeta, ModelConfig, param_shapes
from .tensor import Tensor

MANIFEST = "manifest.txt"
PHASES = ("seed", "specialized", "mixture")


def _write_param(path: Path, data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_param(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        (rank,) = struct.unpack("<q", fh.read(8))
        shape = struct.unpack(f"<{rank}q", fh.read(8 * rank))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{path.name}: payload {data.size} values, header says {shape}")
    return data.reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    ckpt.validate()
    if ckpt.meta.phase not in PHASES:
        raise ConfigError(f"unknown checkpoint phase {ckpt.meta.phase!r}")
    out = Path(path)
    manifest = out / MANIFEST
    if manifest.exists():
        prior = _read_manifest(manifest)
        prior_tokens = int(prior.get("meta.tokens_trained", "0"))
        if ckpt.meta.tokens_trained < prior_tokens:
            raise ConfigError(
                f"tokens_trained may not decrease across saves "
                f"({prior_tokens} -> {ckpt.meta.tokens_trained})")
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, val in sorted(ckpt.config.to_dict().items()):
        lines.append(f"config.{key}={val}")
    for key, val in sorted(ckpt.meta.to_dict().items()):
        lines.append(f"meta.{key}={val}")
    for name, _ in param_shapes(ckpt.config):
        fname = f"{name}.bin"
        _write_param(out / fname, ckpt.params[name].data)
        lines.append(f"param.{name}={fname}")
    manifest.write_text("\n".join(lines) + "\n")
    return out


def _read_manifest(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        entries[key.strip()] = val.strip()
    return entries


def _parse_config(entries: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for key, val in entries.items():
        if not key.startswith("config."):
            continue
        field = key[len("config."):]
        if field == "tie_embeddings":
            kwargs[field] = val == "True"
        elif field in ("arch", "attn_routing"):
            kwargs[field] = val
        else:
            kwargs[field] = int(val)
    return ModelConfig(**kwargs)


def load_checkpoint(path: str | Path) -> Checkpoint:
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise ConfigError(f"no checkpoint manifest at {manifest}")
    entries = _read_manifest(manifest)
    config = _parse_config(entries)
    meta = CheckpointMeta(
        phase=entries.get("meta.phase", "seed"),
        domain_tag=entries.get("meta.domain_tag", ""),
        tokens_trained=int(entries.get("meta.tokens_trained", "0")),
        rng_seed=int(entries.get("meta.rng_seed", "0")),
    )
    params: dict[str, Tensor] = {}
    for key, fname in entries.items():
        if key.startswith("param."):
            name = key[len("param."):]
            params[name] = Tensor(_read_param(root / fname), requires_grad=True)
    ckpt = Checkpoint(config, params, meta)
    ckpt.validate()  # shapes must match what the config implies
    return ckpt


def param_digest(ckpt: Checkpoint, name: str | None = None) -> str:
    """SHA-256 over raw parameter bytes (all params in canonical order, or one)."""
    h = hashlib.sha256()
    if name is not None:
        h.update(np.ascontiguousarray(ckpt.params[name].data, dtype="<f8").tobytes())
    else:
        for pname, _ in param_shapes(ckpt.config):
            h.update(np.ascontiguousarray(ckpt.params[pname].data, dtype="<f8").tobytes())
    return h.hexdigest()
