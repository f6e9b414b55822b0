"""Feature schema, exposure-log ingestion and the embedding layer.

Three field kinds are supported:

* ``sparse_id``: one integer id per row, looked up in a ``vocab_size x dim`` table;
* ``dense_group``: a vector of ``group_width`` reals mapped through an affine
  layer ``x @ W + b`` to ``dim`` outputs;
* ``weighted_list``: ``id:weight`` pairs pooled as ``sum_k w_k E[id_k] / K``.

Each field is routed to the deep input, the wide input, or both; the per-field
vectors are concatenated in schema order.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gradcore as gc

KINDS = ("sparse_id", "dense_group", "weighted_list")
WIDENESS = ("deep", "wide", "both")
LABEL_COLUMNS = ("click", "conversion")
ORACLE_COLUMNS = ("p_true", "r_full")


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureField:
    name: str
    kind: str
    wideness: str = "deep"
    vocab_size: Optional[int] = None
    group_width: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.wideness not in WIDENESS:
            raise SchemaError(f"field {self.name!r}: unknown wideness {self.wideness!r}")
        if self.kind == "dense_group":
            if not isinstance(self.group_width, int) or self.group_width < 1:
                raise SchemaError(f"field {self.name!r}: group_width must be a positive integer")
        else:
            if not isinstance(self.vocab_size, int) or self.vocab_size < 1:
                raise SchemaError(f"field {self.name!r}: vocab_size must be a positive integer")

    @property
    def is_deep(self) -> bool:
        return self.wideness in ("deep", "both")

    @property
    def is_wide(self) -> bool:
        return self.wideness in ("wide", "both")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "dense_group":
            d["group_width"] = self.group_width
        else:
            d["vocab_size"] = self.vocab_size
        d["wideness"] = self.wideness
        return d


@dataclass(frozen=True)
class FeatureSchema:
    fields: Tuple[FeatureField, ...]
    embedding_dim: int = 32

    def __post_init__(self):
        if not isinstance(self.embedding_dim, int) or self.embedding_dim < 1:
            raise SchemaError("embedding_dim must be a positive integer")
        seen = set()
        for f in self.fields:
            if f.name in seen:
                raise SchemaError(f"duplicate field name {f.name!r}")
            if f.name in LABEL_COLUMNS + ORACLE_COLUMNS:
                raise SchemaError(f"field name {f.name!r} collides with a label column")
            seen.add(f.name)

    @property
    def deep_fields(self) -> List[FeatureField]:
        return [f for f in self.fields if f.is_deep]

    @property
    def wide_fields(self) -> List[FeatureField]:
        return [f for f in self.fields if f.is_wide]

    @property
    def deep_width(self) -> int:
        return self.embedding_dim * len(self.deep_fields)

    @property
    def wide_width(self) -> int:
        return self.embedding_dim * len(self.wide_fields)

    def field(self, name: str) -> FeatureField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def with_embedding_dim(self, dim: int) -> "FeatureSchema":
        return FeatureSchema(self.fields, dim)

    def to_dict(self) -> dict:
        return {"embedding_dim": self.embedding_dim, "fields": [f.to_dict() for f in self.fields]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def schema_from_dict(raw: dict) -> FeatureSchema:
    if not isinstance(raw, dict) or "fields" not in raw or "embedding_dim" not in raw:
        raise SchemaError("schema needs keys 'embedding_dim' and 'fields'")
    fields = []
    for i, item in enumerate(raw["fields"]):
        name = item.get("name") if isinstance(item, dict) else None
        if not name:
            raise SchemaError(f"fields[{i}]: missing name")
        unknown = set(item) - {"name", "kind", "vocab_size", "group_width", "wideness"}
        if unknown:
            raise SchemaError(f"field {name!r}: unknown keys {sorted(unknown)}")
        try:
            fields.append(FeatureField(
                name=name,
                kind=item.get("kind"),
                wideness=item.get("wideness", "deep"),
                vocab_size=item.get("vocab_size"),
                group_width=item.get("group_width"),
            ))
        except SchemaError as exc:
            raise SchemaError(f"fields[{i}]: {exc}") from None
    return FeatureSchema(tuple(fields), raw["embedding_dim"])


def load_schema(path: Union[str, Path]) -> FeatureSchema:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return schema_from_dict(raw)


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    features: Dict[str, object]
    o: int
    r: int
    p_true: Optional[float] = None
    r_full: Optional[int] = None


@dataclass(frozen=True)
class SpacePartition:
    all: np.ndarray
    clicked: np.ndarray
    nonclicked: np.ndarray

    @classmethod
    def from_clicks(cls, clicks: Sequence[int]) -> "SpacePartition":
        clicks = np.asarray(clicks, dtype=np.int64)
        idx = np.arange(len(clicks))
        return cls(idx, idx[clicks == 1], idx[clicks == 0])

    def __len__(self):
        return len(self.all)


def _parse_cell(f: FeatureField, cell: str, where: str):
    try:
        if f.kind == "sparse_id":
            value = int(cell)
            if not 0 <= value < f.vocab_size:
                raise DataError(f"{where}: id {value} out of vocab for field {f.name!r}")
            return value
        if f.kind == "dense_group":
            vec = [float(v) for v in cell.split("|")]
            if len(vec) != f.group_width:
                raise DataError(f"{where}: field {f.name!r} expects {f.group_width} values, "
                                f"got {len(vec)}")
            return vec
        pairs = []
        for part in cell.split(";"):
            if not part:
                continue
            i, w = part.split(":")
            i = int(i)
            if not 0 <= i < f.vocab_size:
                raise DataError(f"{where}: id {i} out of vocab for field {f.name!r}")
            pairs.append((i, float(w)))
        if not pairs:
            raise DataError(f"{where}: empty weighted list for field {f.name!r}")
        return pairs
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"{where}: field {f.name!r}: cannot parse {cell!r} ({exc})") from None


def _binary(cell: str, name: str, where: str) -> int:
    if cell not in ("0", "1"):
        raise DataError(f"{where}: column {name!r} must be 0 or 1, got {cell!r}")
    return int(cell)


def load_dataset(path: Union[str, Path], schema: FeatureSchema) -> Tuple[List[Sample], SpacePartition]:
    samples: List[Sample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        if tuple(header[:2]) != LABEL_COLUMNS:
            raise DataError(f"{path}: header must start with 'click,conversion'")
        missing = [f.name for f in schema.fields if f.name not in header]
        if missing:
            raise DataError(f"{path}: header lacks schema fields {missing}")
        col = {name: i for i, name in enumerate(header)}
        has_p = "p_true" in col
        has_full = "r_full" in col
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise DataError(f"{where}: expected {len(header)} cells, got {len(row)}")
            o = _binary(row[0], "click", where)
            r = _binary(row[1], "conversion", where)
            if r == 1 and o == 0:
                raise DataError(f"{where}: conversion without click")
            feats = {f.name: _parse_cell(f, row[col[f.name]], where) for f in schema.fields}
            p_true = float(row[col["p_true"]]) if has_p and row[col["p_true"]] != "" else None
            r_full = (_binary(row[col["r_full"]], "r_full", where)
                      if has_full and row[col["r_full"]] != "" else None)
            samples.append(Sample(feats, o, r, p_true, r_full))
    partition = SpacePartition.from_clicks([s.o for s in samples])
    return samples, partition


def _format_cell(f: FeatureField, value) -> str:
    if f.kind == "sparse_id":
        return str(int(value))
    if f.kind == "dense_group":
        return "|".join(repr(float(v)) for v in value)
    return ";".join(f"{int(i)}:{float(w)!r}" for i, w in value)


def write_dataset(path: Union[str, Path], samples: Sequence[Sample], schema: FeatureSchema) -> None:
    with_oracle = bool(samples) and all(s.p_true is not None and s.r_full is not None for s in samples)
    header = list(LABEL_COLUMNS) + (list(ORACLE_COLUMNS) if with_oracle else [])
    header += [f.name for f in schema.fields]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in samples:
            row = [str(s.o), str(s.r)]
            if with_oracle:
                row += [repr(float(s.p_true)), str(int(s.r_full))]
            row += [_format_cell(f, s.features[f.name]) for f in schema.fields]
            w.writerow(row)


# ---------------------------------------------------------------------------
# columnar batches


@dataclass
class Batch:
    """Columnar view of a set of samples.

    ``columns`` maps a field name to an int array (sparse), an ``(n, width)``
    float array (dense) or an ``(ids, weights, offsets)`` triple (weighted).
    """

    columns: Dict[str, object]
    o: np.ndarray
    r: np.ndarray
    p_true: Optional[np.ndarray] = None
    r_full: Optional[np.ndarray] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.o)

    def take(self, idx: np.ndarray) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {}
        for name, col in self.columns.items():
            if isinstance(col, tuple):
                ids, weights, offsets = col
                starts, ends = offsets[idx], offsets[idx + 1]
                counts = ends - starts
                sel = np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)]) \
                    if len(idx) else np.zeros(0, dtype=np.int64)
                cols[name] = (ids[sel], weights[sel], np.concatenate([[0], np.cumsum(counts)]))
            else:
                cols[name] = col[idx]
        return Batch(
            cols, self.o[idx], self.r[idx],
            None if self.p_true is None else self.p_true[idx],
            None if self.r_full is None else self.r_full[idx],
            {k: v[idx] for k, v in self.extras.items()},
        )

    def partition(self) -> SpacePartition:
        return SpacePartition.from_clicks(self.o)


def encode(samples: Sequence[Sample], schema: FeatureSchema) -> Batch:
    cols: Dict[str, object] = {}
    for f in schema.fields:
        values = [s.features[f.name] for s in samples]
        if f.kind == "sparse_id":
            cols[f.name] = np.asarray(values, dtype=np.int64).reshape(len(samples))
        elif f.kind == "dense_group":
            cols[f.name] = np.asarray(values, dtype=gc.DTYPE).reshape(len(samples), f.group_width)
        else:
            counts = [len(v) for v in values]
            ids = np.asarray([i for v in values for i, _ in v], dtype=np.int64)
            weights = np.asarray([w for v in values for _, w in v], dtype=gc.DTYPE)
            cols[f.name] = (ids, weights, np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
    o = np.asarray([s.o for s in samples], dtype=np.int64)
    r = np.asarray([s.r for s in samples], dtype=np.int64)
    p_true = None
    r_full = None
    if samples and all(s.p_true is not None for s in samples):
        p_true = np.asarray([s.p_true for s in samples], dtype=gc.DTYPE)
    if samples and all(s.r_full is not None for s in samples):
        r_full = np.asarray([s.r_full for s in samples], dtype=np.int64)
    return Batch(cols, o, r, p_true, r_full)


# ---------------------------------------------------------------------------
# embedding tables


def table_names(f: FeatureField) -> List[str]:
    if f.kind == "dense_group":
        return [f"emb/{f.name}/W", f"emb/{f.name}/b"]
    return [f"emb/{f.name}"]


def init_tables(schema: FeatureSchema, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Uniform(-1/sqrt(dim), 1/sqrt(dim)) tables; dense-group biases start at zero."""
    dim = schema.embedding_dim
    bound = 1.0 / np.sqrt(dim)
    tables = {}
    for f in schema.fields:
        if f.kind == "dense_group":
            tables[f"emb/{f.name}/W"] = rng.uniform(-bound, bound, size=(f.group_width, dim))
            tables[f"emb/{f.name}/b"] = np.zeros(dim, dtype=gc.DTYPE)
        else:
            tables[f"emb/{f.name}"] = rng.uniform(-bound, bound, size=(f.vocab_size, dim))
    return tables


def embed_batch(tape: gc.Tape, batch: Batch, schema: FeatureSchema,
                params: Dict[str, gc.Node]) -> Tuple[Optional[gc.Node], Optional[gc.Node]]:
    """Deep and wide input nodes for ``batch``; ``None`` when a side has no fields.

    ``params`` maps table names to tape nodes so every consumer of a table
    shares one leaf and gradients accumulate on it.
    """
    per_field: Dict[str, gc.Node] = {}
    for f in schema.fields:
        col = batch.columns[f.name]
        if f.kind == "sparse_id":
            per_field[f.name] = gc.take_rows(params[f"emb/{f.name}"], col)
        elif f.kind == "dense_group":
            x = tape.constant(col)
            per_field[f.name] = gc.add(gc.matmul(x, params[f"emb/{f.name}/W"]),
                                       params[f"emb/{f.name}/b"])
        else:
            ids, weights, offsets = col
            per_field[f.name] = gc.weighted_mean_rows(params[f"emb/{f.name}"], ids, weights, offsets)
    deep = [per_field[f.name] for f in schema.deep_fields]
    wide = [per_field[f.name] for f in schema.wide_fields]
    deep_node = gc.concat(deep) if deep else None
    wide_node = gc.concat(wide) if wide else None
    return deep_node, wide_node


def embed_sample(sample: Sample, schema: FeatureSchema,
                 tables: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Deep and wide vectors of one sample; an absent side is an empty vector."""
    for f in schema.fields:
        if f.kind == "weighted_list" and not sample.features[f.name]:
            raise ValueError(f"empty weighted list for field {f.name!r}")
        if f.kind == "sparse_id":
            i = sample.features[f.name]
            if not 0 <= i < f.vocab_size:
                raise IndexError(f"id {i} out of range for field {f.name!r}")
    batch = encode([sample], schema)
    tape = gc.Tape()
    leaves = {name: tape.constant(v) for name, v in tables.items()}
    deep, wide = embed_batch(tape, batch, schema, leaves)
    deep_vec = deep.value[0].copy() if deep is not None else np.zeros(0)
    wide_vec = wide.value[0].copy() if wide is not None else np.zeros(0)
    return deep_vec, wide_vec
