"""Run configuration: one YAML file with one section per pipeline stage.

Every key is validated; unknown keys are rejected by name. The only seed is
the top-level `seed`, which drives data synthesis, initialization and
training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .attribution import AttributionConfig
from .errors import ConfigError
from .flow_data import SchemaConfig, SynthConfig, synthetic_schema
from .sequencing import SequencerConfig
from .training import TrainConfig

PROTOCOLS = ("chrono", "zero_day", "robustness", "drift")


@dataclass(frozen=True)
class PathsSection:
    input_csv: Optional[str] = None
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class PreprocessSection:
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"preprocess.epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class SplitSection:
    t_tr: Optional[float] = None
    t_va: Optional[float] = None
    train_frac: float = 0.6
    val_frac: float = 0.2
    ood_families: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ood_families", tuple(self.ood_families))
        if (self.t_tr is None) != (self.t_va is None):
            raise ConfigError("split.t_tr and split.t_va must be given together")


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.1
    cat_embed_dims: tuple[int, ...] = ()
    pooling: str = "mean"


@dataclass(frozen=True)
class EvalSection:
    protocols: tuple[str, ...] = PROTOCOLS
    fpr_cap: float = 0.01
    tpr_floor: float = 0.95
    epsilons: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    attack_steps: int = 10
    attack_step_ratio: float = 0.25
    n_blocks: int = 4
    latency_batch_size: int = 64
    latency_batches: int = 20
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "protocols", tuple(self.protocols))
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"eval.protocols: unknown protocol {bad[0]!r}")
        if not 0 < self.fpr_cap < 1 or not 0 < self.tpr_floor <= 1:
            raise ConfigError("eval.fpr_cap must lie in (0, 1) and eval.tpr_floor in (0, 1]")
        eps = self.epsilons
        if not eps or eps[0] != 0 or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eval.epsilons must start at 0 and be strictly increasing")
        if self.n_blocks < 1 or self.attack_steps < 0 or self.latency_batches < 1:
            raise ConfigError("eval.n_blocks and eval.latency_batches must be >= 1, eval.attack_steps >= 0")


@dataclass(frozen=True)
class AttributeSection:
    m_steps: int = 64
    baseline: str = "mean"
    select: tuple[str, ...] = ("test:alert", "test:benign")
    top_k: int = 10
    formats: tuple[str, ...] = ("csv", "json")

    def __post_init__(self):
        object.__setattr__(self, "select", tuple(self.select))
        object.__setattr__(self, "formats", tuple(self.formats))
        AttributionConfig(baseline=self.baseline, m_steps=self.m_steps)
        bad = [f for f in self.formats if f not in ("csv", "json")]
        if bad:
            raise ConfigError(f"attribute.formats: unknown format {bad[0]!r}")
        if self.top_k < 0:
            raise ConfigError("attribute.top_k must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    synth: Optional[dict] = None
    schema: Optional[SchemaConfig] = None
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    split: SplitSection = field(default_factory=SplitSection)
    sequencer: SequencerConfig = field(default_factory=SequencerConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)
    attribute: AttributeSection = field(default_factory=AttributeSection)

    def synth_config(self) -> SynthConfig:
        if self.synth is None:
            raise ConfigError("config has no synth section")
        return SynthConfig(**self.synth, seed=self.seed)

    def schema_config(self) -> SchemaConfig:
        if self.schema is not None:
            return self.schema
        if self.synth is not None:
            return synthetic_schema(self.synth_config().d)
        raise ConfigError("config needs a schema section (or a synth section implying one)")

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed if seed is None else seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))

    def with_out_dir(self, out_dir: str) -> "RunConfig":
        return replace(self, paths=replace(self.paths, out_dir=str(out_dir)))

    def resolved(self) -> dict:
        doc = _plain(asdict(self))
        doc["schema"] = self.schema_config().to_dict() if (self.schema or self.synth) else None
        doc["train"] = _plain(asdict(self.train_config()))
        if self.synth is not None:
            doc["synth"] = _plain(asdict(self.synth_config()))
        return doc

    def config_hash(self) -> str:
        """Hash of the resolved config without `paths`, so outputs can be relocated."""
        doc = self.resolved()
        doc.pop("paths")
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(doc: Any) -> str:
    return json.dumps(_plain(doc), sort_keys=True, separators=(",", ":"))


def _section(cls, raw, name: str, forbid: tuple[str, ...] = ()):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    allowed = {f.name for f in fields(cls)} - set(forbid)
    for key in raw:
        if key not in allowed:
            hint = " (use the top-level seed)" if key == "seed" else ""
            raise ConfigError(f"unknown config key {name}.{key}{hint}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    synth = None
    if doc.get("synth") is not None:
        _section(SynthConfig, doc["synth"], "synth", forbid=("seed",))
        synth = {k: tuple(v) if isinstance(v, list) else v for k, v in doc["synth"].items()}
    schema = None
    if doc.get("schema") is not None:
        schema = _section(SchemaConfig, doc["schema"], "schema")
    train = dict(doc.get("train") or {})
    _section(TrainConfig, train, "train", forbid=("seed",))

    return RunConfig(
        seed=seed,
        paths=_section(PathsSection, doc.get("paths"), "paths"),
        synth=synth,
        schema=schema,
        preprocess=_section(PreprocessSection, doc.get("preprocess"), "preprocess"),
        split=_section(SplitSection, doc.get("split"), "split"),
        sequencer=_section(SequencerConfig, doc.get("sequencer"), "sequencer"),
        model=_section(ModelSection, doc.get("model"), "model"),
        train=train,
        eval=_section(EvalSection, doc.get("eval"), "eval"),
        attribute=_section(AttributeSection, doc.get("attribute"), "attribute"),
    )


def load_config(path, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    cfg = from_dict(doc)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out_dir is not None:
        cfg = cfg.with_out_dir(out_dir)
    return cfg
