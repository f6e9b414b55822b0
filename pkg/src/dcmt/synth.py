"""Synthetic exposure logs whose conversion labels are missing not at random.

Each user and item carries two latent vectors. The click logit reads the
first pair, the conversion logit mixes the same score with an independent
second pair through ``rho``, so users click what they would convert on and
the click space over-represents converting pairs.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .features import Batch, FeatureField, FeatureSchema, Sample, write_dataset
from .gradcore import sigmoid_array

SHARD_USERS = 256


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 1000
    num_items: int = 500
    exposures_per_user: int = 50
    latent_dim: int = 8
    latent_std: float = 1.0
    latent_mean: float = 0.0
    ctr_bias: float = -1.5
    cvr_bias: float = -1.0
    rho: float = 0.8
    noise_dense_fields: int = 0
    noise_dense_width: int = 4
    embedding_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.latent_dim < 1:
            raise SynthConfigError("num_users, num_items and latent_dim must be >= 1")
        if not 1 <= self.exposures_per_user <= self.num_items:
            raise SynthConfigError("exposures_per_user must lie in [1, num_items]")
        if not -1.0 <= self.rho <= 1.0:
            raise SynthConfigError(f"correlation rho must lie in [-1, 1], got {self.rho}")
        if self.latent_std < 0:
            raise SynthConfigError("latent_std must be non-negative")
        if self.noise_dense_fields < 0 or self.noise_dense_width < 1:
            raise SynthConfigError("invalid dense noise layout")
        if not all(np.isfinite([self.ctr_bias, self.cvr_bias, self.latent_mean])):
            raise SynthConfigError("biases must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


def synth_schema(cfg: SynthConfig) -> FeatureSchema:
    fields = [
        FeatureField("user_id", "sparse_id", "deep", vocab_size=cfg.num_users),
        FeatureField("item_id", "sparse_id", "both", vocab_size=cfg.num_items),
    ]
    for i in range(cfg.noise_dense_fields):
        fields.append(FeatureField(f"noise_{i}", "dense_group", "deep",
                                   group_width=cfg.noise_dense_width))
    return FeatureSchema(tuple(fields), embedding_dim=cfg.embedding_dim)


def _latents(rng: np.random.Generator, rows: int, cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    a = cfg.latent_mean + rng.standard_normal((rows, cfg.latent_dim)) * cfg.latent_std
    b = cfg.latent_mean + rng.standard_normal((rows, cfg.latent_dim)) * cfg.latent_std
    return a, b


def generate(cfg: SynthConfig) -> Tuple[FeatureSchema, Batch]:
    """Draw the whole exposure log; the true CVR ``q`` rides along in ``extras``.

    Item latents come from one stream, each block of users from its own stream
    keyed by ``(seed, block)``, and rows are ordered by ``(user, item)``.
    """
    schema = synth_schema(cfg)
    v, v2 = _latents(np.random.default_rng([cfg.seed, 0]), cfg.num_items, cfg)
    # latent_dim scaling keeps the score variance independent of k
    norm = 1.0 / np.sqrt(cfg.latent_dim)
    chunks: Dict[str, list] = {k: [] for k in ("user", "item", "p", "q", "o", "rf", "noise")}
    for shard, start in enumerate(range(0, cfg.num_users, SHARD_USERS)):
        rng = np.random.default_rng([cfg.seed, 1, shard])
        users = np.arange(start, min(start + SHARD_USERS, cfg.num_users))
        u, u2 = _latents(rng, len(users), cfg)
        for k, uid in enumerate(users):
            items = np.sort(rng.choice(cfg.num_items, cfg.exposures_per_user, replace=False))
            s1 = (v[items] @ u[k]) * norm
            s2 = (v2[items] @ u2[k]) * norm
            a = s1 + cfg.ctr_bias
            b = cfg.rho * s1 + np.sqrt(1.0 - cfg.rho ** 2) * s2 + cfg.cvr_bias
            p, q = sigmoid_array(a), sigmoid_array(b)
            o = (rng.random(len(items)) < p).astype(np.int64)
            rf = (rng.random(len(items)) < q).astype(np.int64)
            chunks["user"].append(np.full(len(items), uid, dtype=np.int64))
            chunks["item"].append(items.astype(np.int64))
            chunks["p"].append(p)
            chunks["q"].append(q)
            chunks["o"].append(o)
            chunks["rf"].append(rf)
            chunks["noise"].append(rng.standard_normal(
                (len(items), cfg.noise_dense_fields * cfg.noise_dense_width)))
    cat = {k: np.concatenate(v_) for k, v_ in chunks.items()}
    p = cat["p"]
    if not (np.all(p > 0) and np.all(p < 1) and np.all(cat["q"] > 0) and np.all(cat["q"] < 1)):
        raise SynthConfigError("biases too extreme: probabilities saturate at 0 or 1")
    columns: Dict[str, object] = {"user_id": cat["user"], "item_id": cat["item"]}
    w = cfg.noise_dense_width
    for i in range(cfg.noise_dense_fields):
        columns[f"noise_{i}"] = np.ascontiguousarray(cat["noise"][:, i * w:(i + 1) * w])
    o, rf = cat["o"], cat["rf"]
    batch = Batch(columns, o, o * rf, p, rf, {"q": cat["q"]})
    return schema, batch


def to_samples(batch: Batch, schema: FeatureSchema) -> list:
    out = []
    for i in range(len(batch)):
        feats = {}
        for f in schema.fields:
            col = batch.columns[f.name]
            feats[f.name] = int(col[i]) if f.kind == "sparse_id" else [float(x) for x in col[i]]
        out.append(Sample(feats, int(batch.o[i]), int(batch.r[i]),
                          None if batch.p_true is None else float(batch.p_true[i]),
                          None if batch.r_full is None else int(batch.r_full[i])))
    return out


def user_split_mask(users: np.ndarray, test_ratio: float, seed: int) -> np.ndarray:
    """True for rows whose user hashes into the test share; users never straddle."""
    if not 0.0 <= test_ratio < 1.0:
        raise SynthConfigError("test_ratio must lie in [0, 1)")
    uniq = np.unique(users)
    h = np.array([zlib.crc32(f"{seed}:{u}".encode()) for u in uniq], dtype=np.float64)
    test_users = uniq[h / 2.0 ** 32 < test_ratio]
    return np.isin(users, test_users)


def pair_split_mask(n: int, test_ratio: float, seed: int) -> np.ndarray:
    """True for a seeded random share of exposures, users may appear on both sides."""
    if not 0.0 <= test_ratio < 1.0:
        raise SynthConfigError("test_ratio must lie in [0, 1)")
    return np.random.default_rng([seed, 2]).random(n) < test_ratio


def split(batch: Batch, test_ratio: float, seed: int, by: str = "user") -> Tuple[Batch, Batch]:
    if by == "user":
        mask = user_split_mask(batch.columns["user_id"], test_ratio, seed)
    elif by == "pair":
        mask = pair_split_mask(len(batch), test_ratio, seed)
    else:
        raise SynthConfigError(f"unknown split mode {by!r}")
    idx = np.arange(len(batch))
    return batch.take(idx[~mask]), batch.take(idx[mask])


def write(out_dir: Union[str, Path], cfg: SynthConfig, test_ratio: float = 0.2,
          split_by: str = "user") -> Dict[str, Path]:
    """Write ``schema.json``, ``train.csv`` and ``test.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    schema, batch = generate(cfg)
    train, test = split(batch, test_ratio, cfg.seed, split_by)
    paths = {"schema": out_dir / "schema.json", "train": out_dir / "train.csv",
             "test": out_dir / "test.csv"}
    paths["schema"].write_text(schema.to_json() + "\n")
    write_dataset(paths["train"], to_samples(train, schema), schema)
    write_dataset(paths["test"], to_samples(test, schema), schema)
    return paths


@dataclass(frozen=True)
class PosteriorStats:
    mean_d: float
    mean_o: float
    mean_n: float
    n_d: int
    n_o: int
    n_n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def posterior_stats(batch: Batch) -> PosteriorStats:
    """Mean of the full conversion labels over D, the click space and the non-click space."""
    if batch.r_full is None:
        raise ValueError("posterior statistics need the r_full column")
    rf = batch.r_full.astype(np.float64)
    m = batch.o == 1
    nan = float("nan")
    return PosteriorStats(
        float(rf.mean()) if len(rf) else nan,
        float(rf[m].mean()) if m.any() else nan,
        float(rf[~m].mean()) if (~m).any() else nan,
        len(rf), int(m.sum()), int((~m).sum()),
    )
