"""Declarative run configuration: TOML or JSON, with command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .unigram import DEFAULT_UNK_PENALTY
from .vocab import ModelDims, SelectionParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "load_config",
    "config_from_dict",
    "read_document",
    "check_document",
    "OVERRIDE_KEYS",
]


class ConfigError(ValueError):
    """The configuration is unreadable, incomplete or points at missing files."""


# Layout of the config document: section -> key -> expected type.
_SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "paths": {
        "tokenizer": str,
        "checkpoint": str,
        "target_corpus": str,
        "secondary_corpus": str,
        "sample": str,
        "output_dir": str,
    },
    "selection": {
        "n_total": int,
        "n_top_original": int,
        "n_secondary": int,
        "specials": list,
        "top_original": str,
        "extra_ids": int,
    },
    "model": {
        "vocab_tensor_names": list,
        "vocab_axis": int,
        "dims": dict,
    },
    "tokenizer": {"unk_penalty": (int, float)},
    "run": {"workers": int},
}
_DIM_KEYS = ("v_old", "d_model", "n_vocab_matrices", "total_params_old", "bytes_per_param")
_PATH_KEYS = ("tokenizer", "checkpoint", "target_corpus", "secondary_corpus", "sample")

# Command-line flag (argparse dest) -> dotted config key.
OVERRIDE_KEYS: dict[str, str] = {
    "tokenizer": "paths.tokenizer",
    "checkpoint": "paths.checkpoint",
    "target_corpus": "paths.target_corpus",
    "secondary_corpus": "paths.secondary_corpus",
    "sample": "paths.sample",
    "output_dir": "paths.output_dir",
    "n_total": "selection.n_total",
    "n_top_original": "selection.n_top_original",
    "n_secondary": "selection.n_secondary",
    "specials": "selection.specials",
    "top_original": "selection.top_original",
    "extra_ids": "selection.extra_ids",
    "vocab_tensor_names": "model.vocab_tensor_names",
    "vocab_axis": "model.vocab_axis",
    "unk_penalty": "tokenizer.unk_penalty",
    "workers": "run.workers",
}


@dataclass(frozen=True)
class PipelineConfig:
    tokenizer: Path
    target_corpus: Path
    output_dir: Path
    checkpoint: Path | None = None
    secondary_corpus: Path | None = None
    sample: Path | None = None
    selection: SelectionParams = field(default_factory=SelectionParams)
    vocab_tensor_names: tuple[str, ...] = ("shared.weight", "lm_head.weight")
    vocab_axis: int = 0
    dims: Mapping[str, int] = field(default_factory=dict)
    unk_penalty: float = DEFAULT_UNK_PENALTY
    workers: int = 1

    @property
    def sample_path(self) -> Path:
        return self.sample or self.target_corpus

    def input_paths(self) -> dict[str, Path]:
        return {k: getattr(self, k) for k in _PATH_KEYS if getattr(self, k) is not None}

    def settings(self) -> dict[str, Any]:
        """Every setting that can change an artifact, without any file location."""
        s = self.selection
        return {
            "selection": {
                "n_total": s.n_total,
                "n_top_original": s.n_top_original,
                "n_secondary": s.n_secondary,
                "specials": list(s.specials),
                "top_original": s.top_original,
                "extra_ids": s.extra_ids,
            },
            "model": {
                "vocab_tensor_names": list(self.vocab_tensor_names),
                "vocab_axis": self.vocab_axis,
                "dims": dict(sorted(self.dims.items())),
            },
            "tokenizer": {"unk_penalty": self.unk_penalty},
            "inputs": sorted(self.input_paths()),
        }

    def full_dims(self) -> ModelDims | None:
        """Dims taken wholly from the config, when every field is given."""
        if all(k in self.dims for k in _DIM_KEYS[:4]):
            return ModelDims(**{k: self.dims[k] for k in _DIM_KEYS if k in self.dims})
        return None

    def digest(self, file_digests: Mapping[str, str]) -> str:
        """Location-independent fingerprint: settings plus input contents."""
        doc = {"settings": self.settings(), "inputs": dict(sorted(file_digests.items()))}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def read_document(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw.decode("utf-8"))
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return doc


def check_document(doc: Mapping[str, Any]) -> None:
    for section, body in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            want = _SCHEMA[section][key]
            if isinstance(value, bool) or not isinstance(value, want):
                raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})")
    for key, value in doc.get("model", {}).get("dims", {}).items():
        if key not in _DIM_KEYS:
            raise ConfigError(f"unknown config key model.dims.{key}")
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"model.dims.{key} must be an integer")


def _resolve(value: str | Path, base: Path) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def config_from_dict(doc: Mapping[str, Any], base: Path, check_paths: bool = True) -> PipelineConfig:
    """Build and validate a config; relative paths resolve against ``base``."""
    check_document(doc)
    paths = doc.get("paths", {})
    for required in ("tokenizer", "target_corpus", "output_dir"):
        if not paths.get(required):
            raise ConfigError(f"paths.{required} is required")
    resolved = {k: _resolve(v, base) for k, v in paths.items() if v}

    try:
        selection = SelectionParams(**doc.get("selection", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[selection]: {exc}") from exc
    model = doc.get("model", {})
    run = doc.get("run", {})
    cfg = PipelineConfig(
        tokenizer=resolved["tokenizer"],
        target_corpus=resolved["target_corpus"],
        output_dir=resolved["output_dir"],
        checkpoint=resolved.get("checkpoint"),
        secondary_corpus=resolved.get("secondary_corpus"),
        sample=resolved.get("sample"),
        selection=selection,
        vocab_tensor_names=tuple(model.get("vocab_tensor_names", PipelineConfig.vocab_tensor_names)),
        vocab_axis=model.get("vocab_axis", 0),
        dims=dict(model.get("dims", {})),
        unk_penalty=float(doc.get("tokenizer", {}).get("unk_penalty", DEFAULT_UNK_PENALTY)),
        workers=run.get("workers", 1),
    )
    if cfg.workers < 1:
        raise ConfigError("run.workers must be at least 1")
    if cfg.vocab_axis < 0:
        raise ConfigError("model.vocab_axis must be non-negative")
    if cfg.unk_penalty < 0:
        raise ConfigError("tokenizer.unk_penalty must be non-negative")
    if not all(isinstance(n, str) for n in cfg.vocab_tensor_names):
        raise ConfigError("model.vocab_tensor_names must be strings")
    if not all(isinstance(s, str) for s in cfg.selection.specials):
        raise ConfigError("selection.specials must be strings")
    if any(v <= 0 for v in cfg.dims.values()):
        raise ConfigError("model.dims values must be positive")
    if check_paths:
        validate_paths(cfg)
    return cfg


def validate_paths(cfg: PipelineConfig) -> None:
    for key, path in cfg.input_paths().items():
        if not path.is_file():
            raise ConfigError(f"paths.{key}: no such file {path}")
    out = cfg.output_dir
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"paths.output_dir: {out} is not a directory")
        if not os.access(out, os.W_OK | os.X_OK):
            raise ConfigError(f"paths.output_dir: {out} is not writable")
    else:
        parent = next((p for p in out.parents if p.exists()), None)
        if parent is None or not os.access(parent, os.W_OK | os.X_OK):
            raise ConfigError(f"paths.output_dir: cannot create {out}")


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    section, key = dotted.split(".", 1)
    doc.setdefault(section, {})[key] = value


def load_config(
    path: str | Path | None,
    overrides: Mapping[str, Any] | None = None,
    check_paths: bool = True,
) -> PipelineConfig:
    """Read ``path`` (if any) and apply flag overrides keyed by ``OVERRIDE_KEYS``.

    Paths inside the file resolve against the file's directory; paths given
    as overrides resolve against the working directory.
    """
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        doc = read_document(path)
        check_document(doc)
        base = path.resolve().parent
        doc = {s: dict(body) for s, body in doc.items()}
        doc["paths"] = {k: str(_resolve(v, base)) for k, v in doc.get("paths", {}).items()}
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        dotted = OVERRIDE_KEYS[name]
        if dotted.startswith("paths."):
            value = str(_resolve(value, Path.cwd()))
        elif isinstance(value, tuple):
            value = list(value)
        _set_dotted(doc, dotted, value)
    return config_from_dict(doc, base, check_paths=check_paths)
