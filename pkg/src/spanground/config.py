"""Pipeline configuration: one JSON document with per-stage sections.

CLI flags mirror the fields with dotted names (``--head.lr 0.5``) and
override file values.  Numeric ranges are validated up front so stage
commands fail before touching data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class PathsConfig:
    documents: str = "documents.json"
    dialogs: str = "dialogs.json"
    workdir: str = "."


@dataclass
class WindowingConfig:
    max_len: int = 512
    stride: int = 128


@dataclass
class FeaturizerConfig:
    feature_dim: int = 16
    seed: int = 0


@dataclass
class HeadConfig:
    kind: str = "independent"
    restricted: bool = True
    lr: float = 0.5
    epochs: int = 40
    batch_size: int = 8
    seed: int = 13
    clip_norm: float = 1.0
    momentum: float = 0.0


@dataclass
class DecodeConfig:
    n_best: int = 20


@dataclass
class EnsembleSection:
    members: list[dict] = field(default_factory=list)  # [{"model_id", "f1"}]
    n: int = 20


@dataclass
class GenerationConfig:
    mode: str = "predicted_span"
    beam: int = 4
    rep_penalty: float = 1.0
    marginalize_k: int = 1
    max_len: int = 32
    max_input_tokens: int | None = None


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    windowing: WindowingConfig = field(default_factory=WindowingConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    toy_model: str | None = None

    def validate(self) -> None:
        w = self.windowing
        if w.max_len < 5:
            raise ConfigurationError(f"windowing.max_len must be >= 5, got {w.max_len}")
        if w.stride < 1 or w.stride > w.max_len:
            raise ConfigurationError(f"windowing.stride must be in [1, max_len], got {w.stride}")
        if self.featurizer.feature_dim < 4:
            raise ConfigurationError("featurizer.feature_dim must be >= 4")
        h = self.head
        if h.kind not in ("independent", "biaffine"):
            raise ConfigurationError(f"head.kind must be 'independent' or 'biaffine', got {h.kind!r}")
        if h.lr < 0 or h.epochs < 0 or h.batch_size < 1:
            raise ConfigurationError("head.lr/epochs must be >= 0 and head.batch_size >= 1")
        if not (0.0 <= h.momentum < 1.0):
            raise ConfigurationError(f"head.momentum must be in [0, 1), got {h.momentum}")
        if self.decode.n_best < 1:
            raise ConfigurationError(f"decode.n_best must be >= 1, got {self.decode.n_best}")
        if self.ensemble.n < 1:
            raise ConfigurationError(f"ensemble.n must be >= 1, got {self.ensemble.n}")
        g = self.generation
        if g.mode not in ("reference_span", "predicted_span", "full_document"):
            raise ConfigurationError(f"generation.mode invalid: {g.mode!r}")
        if g.beam < 1:
            raise ConfigurationError(f"generation.beam must be >= 1, got {g.beam}")
        if g.rep_penalty < 1.0:
            raise ConfigurationError(f"generation.rep_penalty must be >= 1, got {g.rep_penalty}")
        if g.marginalize_k < 1:
            raise ConfigurationError(f"generation.marginalize_k must be >= 1, got {g.marginalize_k}")
        if g.max_len < 1:
            raise ConfigurationError(f"generation.max_len must be >= 1, got {g.max_len}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolve(self, relative: str) -> Path:
        """Resolve a path relative to the configured working directory."""
        p = Path(relative)
        return p if p.is_absolute() else Path(self.paths.workdir) / p


_SECTIONS = {
    "paths": PathsConfig,
    "windowing": WindowingConfig,
    "featurizer": FeaturizerConfig,
    "head": HeadConfig,
    "decode": DecodeConfig,
    "ensemble": EnsembleSection,
    "generation": GenerationConfig,
}


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for section, cls in _SECTIONS.items():
        if section not in data:
            continue
        values = data[section]
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"config section {section!r}: unknown keys {sorted(unknown)}")
        setattr(cfg, section, cls(**values))
    if "toy_model" in data:
        cfg.toy_model = data["toy_model"]
    unknown_sections = set(data) - set(_SECTIONS) - {"toy_model"}
    if unknown_sections:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown_sections)}")
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
        cfg = config_from_dict(data)
        if cfg.paths.workdir == ".":
            cfg.paths.workdir = str(Path(path).parent)
    return cfg


# --- dotted CLI flags --------------------------------------------------------

def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


_FLAG_TYPES = {
    "windowing.max_len": int,
    "windowing.stride": int,
    "featurizer.feature_dim": int,
    "featurizer.seed": int,
    "head.kind": str,
    "head.restricted": _parse_bool,
    "head.lr": float,
    "head.epochs": int,
    "head.batch_size": int,
    "head.seed": int,
    "head.clip_norm": float,
    "head.momentum": float,
    "decode.n_best": int,
    "ensemble.n": int,
    "generation.mode": str,
    "generation.beam": int,
    "generation.rep_penalty": float,
    "generation.marginalize_k": int,
    "generation.max_len": int,
    "generation.max_input_tokens": int,
}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    for dotted, typ in _FLAG_TYPES.items():
        parser.add_argument(f"--{dotted}", dest=dotted, type=typ, default=argparse.SUPPRESS, metavar="V")


def apply_flag_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    for dotted in _FLAG_TYPES:
        if hasattr(args, dotted):
            section, name = dotted.split(".", 1)
            setattr(getattr(cfg, section), name, getattr(args, dotted))
    return cfg
