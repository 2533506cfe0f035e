"""Flow-record parsing and synthetic flow-stream generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, RowError, SchemaError

MISSING_TOKENS = frozenset({"", "nan", "NaN", "NAN"})
GROUP_KEY_SEP = "|"


@dataclass(frozen=True)
class SchemaConfig:
    numeric_columns: tuple[str, ...]
    timestamp_column: str
    label_column: str
    group_key_columns: tuple[str, ...]
    categorical_columns: tuple[str, ...] = ()
    category_column: Optional[str] = None
    label_map: dict = field(default_factory=lambda: {"0": 0, "1": 1})

    def __post_init__(self):
        object.__setattr__(self, "numeric_columns", tuple(self.numeric_columns))
        object.__setattr__(self, "categorical_columns", tuple(self.categorical_columns))
        object.__setattr__(self, "group_key_columns", tuple(self.group_key_columns))
        if not self.numeric_columns:
            raise ConfigError("schema.numeric_columns must be nonempty")
        if not self.group_key_columns:
            raise ConfigError("schema.group_key_columns must be nonempty")
        groups = {
            "numeric_columns": self.numeric_columns,
            "categorical_columns": self.categorical_columns,
            "timestamp_column": (self.timestamp_column,),
            "label_column": (self.label_column,),
            "category_column": (self.category_column,) if self.category_column else (),
            "group_key_columns": self.group_key_columns,
        }
        seen: dict[str, str] = {}
        for group, names in groups.items():
            for name in names:
                if name in seen:
                    raise ConfigError(f"schema column {name!r} appears in both {seen[name]} and {group}")
                seen[name] = group
        label_map = {str(k): int(v) for k, v in dict(self.label_map).items()}
        bad = {k: v for k, v in label_map.items() if v not in (0, 1)}
        if bad:
            raise ConfigError(f"schema.label_map values must be 0 or 1, got {bad}")
        object.__setattr__(self, "label_map", label_map)

    @property
    def d(self) -> int:
        return len(self.numeric_columns)

    def columns(self) -> list[str]:
        cols = [*self.group_key_columns, self.timestamp_column, *self.numeric_columns,
                *self.categorical_columns, self.label_column]
        if self.category_column:
            cols.append(self.category_column)
        return cols

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


@dataclass(frozen=True)
class FlowRecord:
    features: tuple[Optional[float], ...]
    categories: tuple[str, ...]
    label: int
    attack_category: Optional[str]
    timestamp: float
    group_key: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.label == 0 and self.attack_category is not None:
            raise ValueError("benign record cannot carry an attack category")


@dataclass(frozen=True)
class SynthConfig:
    n_groups: int = 4
    events_per_group: int = 2000
    d: int = 8
    attack_families: tuple[str, ...] = ("dos", "scan")
    attack_rate: float = 0.1
    burst_length: int = 10
    mean_shift: Union[float, tuple[float, ...]] = 3.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attack_families", tuple(self.attack_families))
        if isinstance(self.mean_shift, (list, tuple)):
            object.__setattr__(self, "mean_shift", tuple(float(s) for s in self.mean_shift))
        if self.d < 2:
            raise ConfigError(f"synth.d must be >= 2, got {self.d}")
        if not 0.0 <= self.attack_rate <= 1.0:
            raise ConfigError(f"synth.attack_rate must lie in [0, 1], got {self.attack_rate}")
        if self.burst_length < 1:
            raise ConfigError(f"synth.burst_length must be >= 1, got {self.burst_length}")
        if self.n_groups < 1 or self.events_per_group < 1:
            raise ConfigError("synth.n_groups and synth.events_per_group must be >= 1")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"synth.missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.attack_rate > 0 and not self.attack_families:
            raise ConfigError("synth.attack_families must be nonempty when attack_rate > 0")
        if isinstance(self.mean_shift, tuple) and len(self.mean_shift) != len(self.attack_families):
            raise ConfigError("synth.mean_shift needs one value per attack family")

    def shift_for(self, family_index: int) -> float:
        if isinstance(self.mean_shift, tuple):
            return self.mean_shift[family_index]
        return float(self.mean_shift)


def synthetic_schema(d: int) -> SchemaConfig:
    """Schema matching the CSV layout produced by `write_flows` for synthetic data."""
    return SchemaConfig(
        numeric_columns=tuple(f"f{j}" for j in range(d)),
        categorical_columns=("proto",),
        timestamp_column="ts",
        label_column="label",
        category_column="attack_cat",
        group_key_columns=("device",),
        label_map={"0": 0, "1": 1},
    )


def _open_text(source) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8-sig"))
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")
    return open(source, encoding="utf-8-sig", newline="")


def _parse_float(cell: str, row: int, column: str) -> Optional[float]:
    cell = cell.strip()
    if cell in MISSING_TOKENS:
        return None
    try:
        value = float(cell)
    except ValueError:
        raise RowError(row, f"column {column!r}: cannot parse {cell!r} as a number") from None
    return None if math.isnan(value) else value


def parse_flows(source, schema: SchemaConfig) -> list[FlowRecord]:
    """Parse a headered CSV (bytes, binary/text stream or path) into records.

    Row numbers in errors are 1-based data rows (the header is not counted).
    """
    stream = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("CSV has no header row") from None
        position = {name.strip(): i for i, name in enumerate(header)}
        for column in schema.columns():
            if column not in position:
                raise SchemaError(f"CSV header is missing schema column {column!r}")

        num_idx = [position[c] for c in schema.numeric_columns]
        cat_idx = [position[c] for c in schema.categorical_columns]
        grp_idx = [position[c] for c in schema.group_key_columns]
        ts_idx = position[schema.timestamp_column]
        lab_idx = position[schema.label_column]
        fam_idx = position[schema.category_column] if schema.category_column else None

        records = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(row_no, f"expected {len(header)} fields, got {len(row)}")
            label_raw = row[lab_idx].strip()
            if label_raw not in schema.label_map:
                raise RowError(row_no, f"label value {label_raw!r} is not in the label map")
            label = schema.label_map[label_raw]
            ts = _parse_float(row[ts_idx], row_no, schema.timestamp_column)
            if ts is None or not math.isfinite(ts):
                raise RowError(row_no, f"malformed timestamp {row[ts_idx]!r}")
            family = row[fam_idx].strip() if fam_idx is not None else ""
            records.append(FlowRecord(
                features=tuple(_parse_float(row[i], row_no, schema.numeric_columns[k])
                               for k, i in enumerate(num_idx)),
                categories=tuple(row[i].strip() for i in cat_idx),
                label=label,
                attack_category=(family or None) if label == 1 else None,
                timestamp=ts,
                group_key=GROUP_KEY_SEP.join(row[i].strip() for i in grp_idx),
            ))
        return records
    finally:
        if isinstance(stream, io.TextIOWrapper) and hasattr(source, "read"):
            stream.detach()
        elif stream is not source:
            stream.close()


def _format_float(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_flows(records: Iterable[FlowRecord], schema: SchemaConfig, stream: IO[str]) -> None:
    """Write records as CSV in the layout `parse_flows` reads back."""
    inverse_labels: dict[int, str] = {}
    for raw, value in schema.label_map.items():
        inverse_labels.setdefault(value, raw)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(schema.columns())
    n_group = len(schema.group_key_columns)
    for rec in records:
        parts = rec.group_key.split(GROUP_KEY_SEP) if n_group > 1 else [rec.group_key]
        if len(parts) != n_group:
            raise SchemaError(f"group key {rec.group_key!r} does not split into {n_group} columns")
        row = [*parts, _format_float(rec.timestamp), *map(_format_float, rec.features),
               *rec.categories, inverse_labels[rec.label]]
        if schema.category_column:
            row.append(rec.attack_category or "")
        writer.writerow(row)


def family_feature_subset(family_index: int, d: int) -> list[int]:
    """Cyclic block of ceil(d/2) features shifted by one family; neighbours overlap."""
    width = math.ceil(d / 2)
    offset = family_index * max(1, d // 4)
    return [(offset + k) % d for k in range(width)]


PROTOCOLS = ("tcp", "udp", "icmp")
PROTOCOL_P = (0.7, 0.25, 0.05)
AR_COEF = 0.8


def generate_synthetic(config: SynthConfig) -> list[FlowRecord]:
    """Seeded synthetic flow log.

    Benign features per group follow an AR(1) process with coefficient 0.8 and
    unit-variance noise. Attacks arrive in bursts of `burst_length` consecutive
    events, each burst drawn from one family; a family adds its mean shift to
    its own feature block. Records are emitted interleaved in time order, as a
    collector would log them.
    """
    rng = np.random.default_rng(config.seed)
    n, d = config.events_per_group, config.d
    subsets = [family_feature_subset(k, d) for k in range(len(config.attack_families))]

    per_group = []
    for g in range(config.n_groups):
        x = np.empty((n, d))
        x[0] = rng.normal(0.0, 1.0 / math.sqrt(1 - AR_COEF ** 2), size=d)
        noise = rng.normal(size=(n, d))
        for t in range(1, n):
            x[t] = AR_COEF * x[t - 1] + noise[t]

        family = np.full(n, -1)
        n_bursts = int(round(config.attack_rate * n / config.burst_length))
        n_slots = n // config.burst_length
        n_bursts = min(n_bursts, n_slots)
        if n_bursts:
            slots = np.sort(rng.choice(n_slots, size=n_bursts, replace=False))
            fams = rng.integers(len(config.attack_families), size=n_bursts)
            for slot, f in zip(slots, fams):
                start = slot * config.burst_length
                family[start:start + config.burst_length] = f
        for f, subset in enumerate(subsets):
            hit = family == f
            x[np.ix_(hit, subset)] += config.shift_for(f)

        proto = rng.choice(len(PROTOCOLS), size=n, p=PROTOCOL_P)
        missing = rng.random((n, d)) < config.missing_rate if config.missing_rate else None
        per_group.append((x, family, proto, missing))

    records = []
    for t in range(n):
        for g, (x, family, proto, missing) in enumerate(per_group):
            f = int(family[t])
            feats = tuple(None if missing is not None and missing[t, j] else float(x[t, j])
                          for j in range(d))
            records.append(FlowRecord(
                features=feats,
                categories=(PROTOCOLS[proto[t]],),
                label=int(f >= 0),
                attack_category=config.attack_families[f] if f >= 0 else None,
                timestamp=float(t),
                group_key=f"dev{g}",
            ))
    return records


def feature_matrix(records: Sequence[FlowRecord]) -> np.ndarray:
    """Raw features as float64 with NaN for absent cells."""
    return np.array([[np.nan if v is None else v for v in r.features] for r in records],
                    dtype=np.float64).reshape(len(records), -1)
