"""Run configuration: one JSON document with a schema version.

Defaults carry the published training setup (Adam, batch 256, learning rate
1e-4, global-norm clip 5, L2 0.01, two transformer layers with two heads, one
R-GCN layer with Z = 1, sequence length 50, mask 0.4, hidden size 32).  Epoch
counts are sized for the default synthetic corpus.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

SCHEMA_VERSION = 1


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    weight_decay: float = 0.01
    clip_norm: float = 5.0


@dataclass
class ConvConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    mask_prob: float = 0.4
    dropout: float = 0.1
    order: str = "ffn_first"
    n_epochs: int = 250


@dataclass
class GraphConfig:
    hidden_dim: int = 32
    n_layers: int = 1
    norm_const: float = 1.0
    inverse_edges: bool = True
    init_std: float = 0.02
    n_epochs: int = 150


@dataclass
class ReviewConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_tokens: int = 32
    max_sentences: int = 16
    dropout: float = 0.1
    n_epochs: int = 40


@dataclass
class GateConfig:
    n_epochs: int = 100
    joint_finetune: bool = False


@dataclass
class DecoderConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_context: int = 128
    max_response: int = 20
    dropout: float = 0.1
    bias_strength: float = 0.0
    n_epochs: int = 20


@dataclass
class PathsConfig:
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    output: str = "out"


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    split_ratios: tuple = (8, 1, 1)
    paths: PathsConfig = field(default_factory=PathsConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    conv: ConvConfig = field(default_factory=ConvConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    review: ReviewConfig = field(default_factory=ReviewConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_hidden_dim(self, dim: int) -> "RunConfig":
        """Same config with every module's width set to ``dim``."""
        return replace(
            self,
            conv=replace(self.conv, hidden_dim=dim),
            graph=replace(self.graph, hidden_dim=dim),
            review=replace(self.review, hidden_dim=dim),
            decoder=replace(self.decoder, hidden_dim=dim),
        )

    def with_overrides(self, **sections) -> "RunConfig":
        """``with_overrides(conv={"mask_prob": 0.2})`` and similar."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key].update(val)
            else:
                d[key] = val
        return RunConfig.from_dict(d)

    def fingerprint(self, corpus_hash: str = "", sections=None) -> str:
        """Short hash of the corpus plus the config.

        With ``sections`` only those module sections (and the shared seed,
        split and optimizer settings) contribute, so changing the decoder
        does not invalidate an expert checkpoint.
        """
        d = self.to_dict()
        del d["paths"]
        if sections is not None:
            keep = {"schema_version", "seed", "split_ratios", "optimizer", *sections}
            d = {k: v for k, v in d.items() if k in keep}
        h = hashlib.sha256()
        h.update(json.dumps(d, sort_keys=True).encode())
        h.update(corpus_hash.encode())
        return h.hexdigest()[:16]


def _build(cls, d: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in d:
            continue
        default = getattr(defaults, name)
        if is_dataclass(default):
            if not isinstance(d[name], dict):
                raise ValueError(f"{where}.{name}: expected an object")
            kwargs[name] = _build(type(default), d[name], f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(d[name])
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)
