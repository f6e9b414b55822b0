"""CTR tower, twin CVR tower and the baseline variants built on them.

Every tower is wide & deep: a linear map over the wide input plus an MLP over
the deep input, summed into one logit. The CVR side shares its hidden trunk
between a factual head and a counterfactual head; single-head variants drop
the counterfactual head and report ``r_hat_cf = 1 - r_hat``.

Checkpoint layout (all integers little-endian)::

    DCMT-CHECKPOINT 1\\n
    <one line of JSON: variant, hidden_dims, shared_depth, schema, schema_sha256,
     tensors=[{name, shape, offset}]>\\n
    <raw float64 '<f8' data, tensors back to back in header order>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gradcore as gc
from .features import Batch, FeatureSchema, embed_batch, init_tables, schema_from_dict

VARIANTS = ("naive", "esmm", "ipw", "dr", "dcmt", "dcmt_pd", "dcmt_cf", "dcmt_hard")
TWIN_VARIANTS = ("dcmt", "dcmt_cf")
CHECKPOINT_MAGIC = b"DCMT-CHECKPOINT 1\n"


class UnknownVariant(ValueError):
    pass


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return variant


@dataclass
class PredictionBatch:
    o_hat: np.ndarray
    r_hat: np.ndarray
    r_hat_cf: np.ndarray
    t_hat: np.ndarray
    o_logit: np.ndarray
    l_f: np.ndarray
    l_cf: np.ndarray
    l_w_f: np.ndarray
    l_d_f: np.ndarray
    l_w_cf: np.ndarray
    l_d_cf: np.ndarray
    e_hat: Optional[np.ndarray] = None

    @classmethod
    def concatenate(cls, parts: Sequence["PredictionBatch"]) -> "PredictionBatch":
        out = {}
        for name in cls.__dataclass_fields__:
            vals = [getattr(p, name) for p in parts]
            out[name] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**out)


@dataclass
class Forward:
    """Tape nodes of one forward pass; vectors have shape ``(batch,)``."""

    o_hat: gc.Node
    r_hat: gc.Node
    r_hat_cf: gc.Node
    t_hat: gc.Node
    o_logit: gc.Node
    l_f: gc.Node
    l_cf: gc.Node
    l_w_f: gc.Node
    l_d_f: gc.Node
    l_w_cf: gc.Node
    l_d_cf: gc.Node
    e_hat: Optional[gc.Node] = None
    leaves: Dict[str, gc.Node] = field(default_factory=dict)

    def numpy(self) -> PredictionBatch:
        vals = {name: getattr(self, name).value.copy()
                for name in PredictionBatch.__dataclass_fields__ if name != "e_hat"}
        vals["e_hat"] = None if self.e_hat is None else self.e_hat.value.copy()
        return PredictionBatch(**vals)


# ---------------------------------------------------------------------------
# tower pieces


def _dense_init(rng, fan_in: int, fan_out: int, prefix: str) -> Dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return {f"{prefix}/W": rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            f"{prefix}/b": np.zeros(fan_out, dtype=gc.DTYPE)}


def _linear(x: gc.Node, leaves: Dict[str, gc.Node], prefix: str) -> gc.Node:
    return gc.add(gc.matmul(x, leaves[f"{prefix}/W"]), leaves[f"{prefix}/b"])


def _mlp(x: gc.Node, leaves, prefixes: Sequence[str]) -> gc.Node:
    for p in prefixes:
        x = gc.relu(_linear(x, leaves, p))
    return x


def _logit(x: gc.Node, leaves, prefix: str) -> gc.Node:
    return gc.reshape(_linear(x, leaves, prefix), (x.shape[0],))


def _zeros(tape: gc.Tape, n: int) -> gc.Node:
    return tape.constant(np.zeros(n))


@dataclass
class Model:
    """All learnable tensors of one variant plus the structure that reads them."""

    schema: FeatureSchema
    variant: str = "dcmt"
    hidden_dims: Tuple[int, ...] = (64, 64, 32)
    shared_depth: Optional[int] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_variant(self.variant)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")
        depth = len(self.hidden_dims) if self.shared_depth is None else self.shared_depth
        if not 0 <= depth <= len(self.hidden_dims):
            raise ValueError(f"shared_depth must lie in [0, {len(self.hidden_dims)}]")
        self.shared_depth = depth

    # structure -----------------------------------------------------------

    @property
    def twin(self) -> bool:
        return self.variant in TWIN_VARIANTS

    @property
    def has_wide(self) -> bool:
        return self.schema.wide_width > 0

    def _ctr_layers(self) -> List[str]:
        return [f"ctr/deep/l{i}" for i in range(len(self.hidden_dims))]

    def _trunk_layers(self) -> List[str]:
        return [f"cvr/trunk/l{i}" for i in range(self.shared_depth)]

    def _head_layers(self, head: str) -> List[str]:
        return [f"cvr/{head}/l{i}" for i in range(self.shared_depth, len(self.hidden_dims))]

    def heads(self) -> List[str]:
        return ["f", "cf"] if self.twin else ["f"]

    @classmethod
    def init(cls, schema: FeatureSchema, variant: str = "dcmt",
             hidden_dims: Sequence[int] = (64, 64, 32), shared_depth: Optional[int] = None,
             seed: int = 0) -> "Model":
        """Fresh model; every tensor drawn from one seeded stream in a fixed order."""
        model = cls(schema, variant, tuple(hidden_dims), shared_depth)
        rng = np.random.default_rng(seed)
        params = dict(init_tables(schema, rng))
        dims = [schema.deep_width] + list(model.hidden_dims)

        for i, name in enumerate(model._ctr_layers()):
            params.update(_dense_init(rng, dims[i], dims[i + 1], name))
        params.update(_dense_init(rng, dims[-1], 1, "ctr/deep/out"))
        if model.has_wide:
            params.update(_dense_init(rng, schema.wide_width, 1, "ctr/wide"))

        for i, name in enumerate(model._trunk_layers()):
            params.update(_dense_init(rng, dims[i], dims[i + 1], name))
        for head in model.heads():
            for name in model._head_layers(head):
                i = int(name.rsplit("l", 1)[1])
                params.update(_dense_init(rng, dims[i], dims[i + 1], name))
            params.update(_dense_init(rng, dims[-1], 1, f"cvr/{head}/out"))
            if model.has_wide:
                params.update(_dense_init(rng, schema.wide_width, 1, f"cvr/{head}/wide"))

        if variant == "dr":
            for i in range(len(model.hidden_dims)):
                params.update(_dense_init(rng, dims[i], dims[i + 1], f"imp/l{i}"))
            params.update(_dense_init(rng, dims[-1], 1, "imp/out"))
        model.params = {k: np.asarray(v, dtype=gc.DTYPE) for k, v in params.items()}
        return model

    # forward -------------------------------------------------------------

    def forward(self, tape: gc.Tape, batch: Batch, constant: bool = False) -> Forward:
        """Record one forward pass; ``constant`` turns parameters into plain constants."""
        if constant:
            leaves = {k: tape.constant(v) for k, v in self.params.items()}
        else:
            leaves = {k: tape.param(k, v) for k, v in self.params.items()}
        n = len(batch)
        deep, wide = embed_batch(tape, batch, self.schema, leaves)
        if deep is None:
            deep = tape.constant(np.zeros((n, 0)))

        o_logit = _logit(_mlp(deep, leaves, self._ctr_layers()), leaves, "ctr/deep/out")
        if wide is not None:
            o_logit = gc.add(o_logit, _logit(wide, leaves, "ctr/wide"))
        o_hat = gc.sigmoid(o_logit)

        trunk = _mlp(deep, leaves, self._trunk_layers())
        logits = {}
        for head in self.heads():
            h = _mlp(trunk, leaves, self._head_layers(head))
            l_d = _logit(h, leaves, f"cvr/{head}/out")
            l_w = _logit(wide, leaves, f"cvr/{head}/wide") if wide is not None else _zeros(tape, n)
            logits[head] = (l_w, l_d, gc.add(l_w, l_d))
        l_w_f, l_d_f, l_f = logits["f"]
        r_hat = gc.sigmoid(l_f)
        if self.twin:
            l_w_cf, l_d_cf, l_cf = logits["cf"]
            r_hat_cf = gc.sigmoid(l_cf)
        else:
            l_w_cf, l_d_cf, l_cf = gc.scale(l_w_f, -1.0), gc.scale(l_d_f, -1.0), gc.scale(l_f, -1.0)
            r_hat_cf = gc.rsub(1.0, r_hat)
        t_hat = ctcvr_compose(o_hat, r_hat)

        e_hat = None
        if self.variant == "dr":
            h = _mlp(deep, leaves, [f"imp/l{i}" for i in range(len(self.hidden_dims))])
            e_hat = gc.softplus(_logit(h, leaves, "imp/out"))
        return Forward(o_hat, r_hat, r_hat_cf, t_hat, o_logit, l_f, l_cf, l_w_f, l_d_f,
                       l_w_cf, l_d_cf, e_hat, leaves)

    def predict(self, batch: Batch, chunk: int = 8192) -> PredictionBatch:
        parts = []
        for start in range(0, len(batch), chunk):
            sub = batch.take(np.arange(start, min(start + chunk, len(batch))))
            parts.append(self.forward(gc.Tape(), sub, constant=True).numpy())
        if not parts:
            return self.forward(gc.Tape(), batch, constant=True).numpy()
        return PredictionBatch.concatenate(parts)

    def with_variant(self, variant: str) -> "Model":
        """Same tensors read through another variant's structure (missing heads fresh)."""
        other = Model.init(self.schema, variant, self.hidden_dims, self.shared_depth)
        for k in other.params:
            if k in self.params:
                other.params[k] = self.params[k].copy()
        return other


def touched_rows(model: Model, batch: Batch) -> Dict[str, Optional[np.ndarray]]:
    """Rows of each parameter that ``batch`` reads; ``None`` stands for the whole tensor.

    Only id tables are sparse, every other tensor counts in full.
    """
    rows: Dict[str, Optional[np.ndarray]] = {name: None for name in model.params}
    for f in model.schema.fields:
        if f.kind == "sparse_id":
            rows[f"emb/{f.name}"] = np.unique(batch.columns[f.name])
        elif f.kind == "weighted_list":
            rows[f"emb/{f.name}"] = np.unique(batch.columns[f.name][0])
    return rows


def batch_squared_norm(model: Model, batch: Batch) -> float:
    """Squared L2 norm of the parameters a batch touches, summed in name order."""
    rows = touched_rows(model, batch)
    total = 0.0
    for name in sorted(model.params):
        p = model.params[name] if rows[name] is None else model.params[name][rows[name]]
        total += float(np.cumsum((p * p).ravel())[-1]) if p.size else 0.0
    return total


def ctcvr_compose(o_hat, r_hat):
    """Click-and-convert probability as the product of CTR and CVR predictions."""
    if isinstance(o_hat, gc.Node) or isinstance(r_hat, gc.Node):
        return gc.mul(o_hat, r_hat)
    return np.asarray(o_hat, dtype=gc.DTYPE) * np.asarray(r_hat, dtype=gc.DTYPE)


def _as_rows(v) -> np.ndarray:
    v = np.asarray(v, dtype=gc.DTYPE)
    return v.reshape(1, -1) if v.ndim == 1 else v


def ctr_forward(deep_vec, wide_vec, model: Model) -> np.ndarray:
    """CTR probability from precomputed deep/wide input vectors (one row or a matrix)."""
    tape = gc.Tape()
    leaves = {k: tape.constant(v) for k, v in model.params.items()}
    deep = tape.constant(_as_rows(deep_vec))
    if deep.shape[1] != model.schema.deep_width:
        raise gc.ShapeError(f"deep input width {deep.shape[1]} != {model.schema.deep_width}")
    logit = _logit(_mlp(deep, leaves, model._ctr_layers()), leaves, "ctr/deep/out")
    if model.has_wide:
        wide = tape.constant(_as_rows(wide_vec))
        if wide.shape[1] != model.schema.wide_width:
            raise gc.ShapeError(f"wide input width {wide.shape[1]} != {model.schema.wide_width}")
        logit = gc.add(logit, _logit(wide, leaves, "ctr/wide"))
    return gc.sigmoid(logit).value


def twin_forward(deep_vec, wide_vec, model: Model) -> Tuple[np.ndarray, np.ndarray]:
    """Factual and counterfactual CVR from precomputed input vectors."""
    tape = gc.Tape()
    leaves = {k: tape.constant(v) for k, v in model.params.items()}
    deep = tape.constant(_as_rows(deep_vec))
    if deep.shape[1] != model.schema.deep_width:
        raise gc.ShapeError(f"deep input width {deep.shape[1]} != {model.schema.deep_width}")
    wide = tape.constant(_as_rows(wide_vec)) if model.has_wide else None
    if wide is not None and wide.shape[1] != model.schema.wide_width:
        raise gc.ShapeError(f"wide input width {wide.shape[1]} != {model.schema.wide_width}")
    trunk = _mlp(deep, leaves, model._trunk_layers())
    out = []
    for head in model.heads():
        logit = _logit(_mlp(trunk, leaves, model._head_layers(head)), leaves, f"cvr/{head}/out")
        if wide is not None:
            logit = gc.add(logit, _logit(wide, leaves, f"cvr/{head}/wide"))
        out.append(gc.sigmoid(logit).value)
    if len(out) == 1:
        out.append(1.0 - out[0])
    return out[0], out[1]


def variant_forward(model: Model, batch: Batch) -> PredictionBatch:
    check_variant(model.variant)
    return model.predict(batch)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Union[str, Path], model: Model) -> None:
    names = sorted(model.params)
    tensors = []
    offset = 0
    for name in names:
        arr = model.params[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "variant": model.variant,
        "hidden_dims": list(model.hidden_dims),
        "shared_depth": model.shared_depth,
        "schema": model.schema.to_dict(),
        "schema_sha256": model.schema.digest(),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Model:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    data = rest[nl + 1:]
    schema = schema_from_dict(header["schema"])
    if schema.digest() != header["schema_sha256"]:
        raise ValueError(f"{path}: schema hash mismatch")
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        raw = data[t["offset"]: t["offset"] + count * 8]
        params[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(gc.DTYPE).reshape(t["shape"])
    return Model(schema, header["variant"], tuple(header["hidden_dims"]),
                 header["shared_depth"], params)
