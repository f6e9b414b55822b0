"""Mini-batch training of any model variant and hyperparameter sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import estimators as est
from . import gradcore as gc
from .features import Batch, FeatureSchema
from .model import (Forward, Model, PredictionBatch, batch_squared_norm, check_variant,
                    touched_rows)

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("embedding_dim", "hidden_dims", "lambda1", "hard_constraint")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: str = "dcmt"
    lr: float = 0.001
    lambda1: float = 0.001
    lambda2: float = 0.0001
    batch_size: int = 1024
    max_epochs: int = 5
    embedding_dim: Optional[int] = 32
    hidden_dims: Tuple[int, ...] = (64, 64, 32)
    shared_depth: Optional[int] = None
    eps: float = est.DEFAULT_EPS
    snips: bool = True
    seed: int = 0
    shuffle: bool = True
    detach_propensity: bool = False
    imputation_weighted: bool = False
    l2_scope: str = "batch"

    def __post_init__(self):
        check_variant(self.variant)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lr < 0:
            raise ValueError("lr, lambda1 and lambda2 must be non-negative")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.l2_scope not in ("batch", "full"):
            raise ValueError("l2_scope must be 'batch' or 'full'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


# ---------------------------------------------------------------------------
# objective on the tape


def _log_loss(y: np.ndarray, p: gc.Node) -> gc.Node:
    pc = gc.clip(p, est.LOG_CLIP, 1.0 - est.LOG_CLIP)
    pos = gc.mul(gc.log(pc), y)
    neg = gc.mul(gc.log(gc.rsub(1.0, pc)), 1.0 - y)
    return gc.sub(gc.scale(pos, -1.0), neg)


def _masked_sum(x: gc.Node, mask: np.ndarray) -> gc.Node:
    return gc.total(gc.mul(x, mask.astype(gc.DTYPE)))


def _snips_term(e: gc.Node, raw_w: gc.Node, mask: np.ndarray) -> gc.Node:
    num = _masked_sum(gc.mul(e, raw_w), mask)
    den = _masked_sum(raw_w, mask)
    return gc.div(num, den)


def batch_objective(cfg: TrainConfig, fwd: Forward, o: np.ndarray, r: np.ndarray,
                    tape: gc.Tape, reg_rows: Optional[Dict[str, Optional[np.ndarray]]] = None
                    ) -> Tuple[gc.Node, Dict[str, gc.Node]]:
    """Scalar training loss of one batch and its named components.

    ``reg_rows`` limits the L2 penalty of a tensor to the listed rows; tensors
    that are absent or mapped to ``None`` are penalised in full.
    """
    n = len(o)
    of = o.astype(gc.DTYPE)
    rf = r.astype(gc.DTYPE)
    clicked = o == 1
    unclicked = ~clicked
    w = gc.clip(fwd.o_hat, cfg.eps, 1.0 - cfg.eps)
    if cfg.detach_propensity:
        w = gc.detach(w)
    zero = tape.constant(0.0)

    parts: Dict[str, gc.Node] = {
        "ctr": gc.scale(gc.total(_log_loss(of, fwd.o_hat)), 1.0 / n),
        "cvr": zero,
        "ctcvr": zero,
        "imputation": zero,
    }
    v = cfg.variant
    if v in ("esmm", "dcmt", "dcmt_hard", "dcmt_pd", "dcmt_cf"):
        parts["ctcvr"] = gc.scale(gc.total(_log_loss(rf, fwd.t_hat)), 1.0 / n)

    if v == "naive":
        if clicked.any():
            e = _log_loss(rf, fwd.r_hat)
            parts["cvr"] = gc.scale(_masked_sum(e, clicked), 1.0 / int(clicked.sum()))
    elif v == "ipw":
        e = _log_loss(rf, fwd.r_hat)
        parts["cvr"] = gc.scale(_masked_sum(gc.div(e, w), clicked), 1.0 / n)
    elif v == "dr":
        e = _log_loss(rf, fwd.r_hat)
        e_hat = gc.detach(fwd.e_hat)
        delta = gc.sub(e, e_hat)
        dr = gc.add(e_hat, gc.mul(gc.div(delta, w), of))
        parts["cvr"] = gc.scale(gc.total(dr), 1.0 / n)
        if clicked.any():
            sq = gc.square(gc.sub(fwd.e_hat, gc.detach(e)))
            if cfg.imputation_weighted:
                parts["imputation"] = gc.scale(_masked_sum(gc.div(sq, gc.detach(w)), clicked),
                                               1.0 / n)
            else:
                parts["imputation"] = gc.scale(_masked_sum(sq, clicked),
                                               1.0 / int(clicked.sum()))
    elif v in ("dcmt", "dcmt_hard"):
        e_f = _log_loss(rf, fwd.r_hat)
        e_cf = _log_loss(1.0 - rf, fwd.r_hat_cf)
        inv_f = gc.div(tape.constant(np.ones(n)), w)
        inv_cf = gc.div(tape.constant(np.ones(n)), gc.rsub(1.0, w))
        if cfg.snips:
            main = zero
            if clicked.any():
                main = gc.add(main, _snips_term(e_f, inv_f, clicked))
            if unclicked.any():
                main = gc.add(main, _snips_term(e_cf, inv_cf, unclicked))
        else:
            main = gc.scale(gc.add(_masked_sum(gc.mul(e_f, inv_f), clicked),
                                   _masked_sum(gc.mul(e_cf, inv_cf), unclicked)), 1.0 / n)
        cvr = main
        if v == "dcmt" and cfg.lambda1 > 0:
            resid = gc.absolute(gc.rsub(1.0, gc.add(fwd.r_hat, fwd.r_hat_cf)))
            cvr = gc.add(cvr, gc.scale(gc.total(resid), cfg.lambda1 / n))
        parts["cvr"] = cvr
    elif v == "dcmt_pd":
        e = _log_loss(rf, fwd.r_hat)
        weighted = gc.add(gc.mul(gc.div(e, w), of),
                          gc.mul(gc.div(e, gc.rsub(1.0, w)), 1.0 - of))
        parts["cvr"] = gc.scale(gc.total(weighted), 1.0 / n)
    elif v == "dcmt_cf":
        e_f = _log_loss(rf, fwd.r_hat)
        e_cf = _log_loss(1.0 - rf, fwd.r_hat_cf)
        main = gc.scale(gc.add(_masked_sum(e_f, clicked), _masked_sum(e_cf, unclicked)), 1.0 / n)
        resid = gc.absolute(gc.rsub(1.0, gc.add(fwd.r_hat, fwd.r_hat_cf)))
        parts["cvr"] = gc.add(main, gc.scale(gc.total(resid), cfg.lambda1 / n))
    elif v == "esmm":
        pass

    reg = zero
    if cfg.lambda2 > 0:
        for name in sorted(fwd.leaves):
            leaf = fwd.leaves[name]
            rows = None if reg_rows is None else reg_rows.get(name)
            if rows is not None:
                leaf = gc.take_rows(leaf, rows)
            reg = gc.add(reg, gc.total(gc.square(leaf)))
        reg = gc.scale(reg, cfg.lambda2)
    parts["reg"] = reg
    loss = gc.add(gc.add(gc.add(parts["ctr"], parts["cvr"]), parts["ctcvr"]), reg)
    loss = gc.add(loss, parts["imputation"])
    return loss, parts


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log: List[dict] = field(default_factory=list)
    seconds: float = 0.0


BatchHook = Callable[[int, int, Batch, PredictionBatch, Dict[str, float], float], None]


def _diagnose(fwd: Forward) -> str:
    p = fwd.o_hat.value
    return f"pre-clip propensity range [{p.min():.3e}, {p.max():.3e}]"


def build_model(schema: FeatureSchema, cfg: TrainConfig) -> Model:
    if cfg.embedding_dim is not None and cfg.embedding_dim != schema.embedding_dim:
        schema = schema.with_embedding_dim(cfg.embedding_dim)
    return Model.init(schema, cfg.variant, cfg.hidden_dims, cfg.shared_depth, seed=cfg.seed)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(data: Batch, schema: FeatureSchema, cfg: TrainConfig,
          hook: Optional[BatchHook] = None, model: Optional[Model] = None) -> TrainResult:
    """Fit ``cfg.variant`` on ``data``; ground-truth columns are never read here."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = build_model(schema, cfg) if model is None else model
    opt = gc.Adam(lr=cfg.lr)
    result = TrainResult(model)
    t0 = time.perf_counter()
    n = len(data)
    for epoch in range(cfg.max_epochs):
        order = epoch_order(n, cfg.seed, epoch, cfg.shuffle)
        sums: Dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data.take(order[start:start + cfg.batch_size])
            tape = gc.Tape()
            fwd = model.forward(tape, batch)
            rows = touched_rows(model, batch) if cfg.l2_scope == "batch" else None
            loss, parts = batch_objective(cfg, fwd, batch.o, batch.r, tape, rows)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}; "
                                       f"{_diagnose(fwd)}")
            part_values = {k: float(v.value) for k, v in parts.items()}
            part_values["total"] = value
            if hook is not None:
                sq = (batch_squared_norm(model, batch) if cfg.l2_scope == "batch"
                      else gc.squared_norm(model.params))
                hook(epoch, b, batch, fwd.numpy(), part_values, sq)
            grads = tape.backward(loss)
            try:
                opt.step(model.params, grads)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}; {_diagnose(fwd)}") from None
            for k, v in part_values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        record = {"epoch": epoch, "batches": n_batches}
        record["train_loss"] = {k: v / n_batches for k, v in sorted(sums.items())}
        pred = model.predict(data)
        record["residual_mean"] = float(np.mean(np.abs(1.0 - (pred.r_hat + pred.r_hat_cf))))
        record["report"] = est.loss_report(
            data.o, data.r, pred, variant=cfg.variant, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
            sq_norm=gc.squared_norm(model.params), eps=cfg.eps, snips=cfg.snips).to_dict()
        result.log.append(record)
        log.info("epoch %d loss %.6f", epoch, record["train_loss"]["total"])
    result.seconds = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------------------
# sweeps


def _parse_hidden(value) -> Tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(x) for x in value.split("-") if x)
    if isinstance(value, (int, np.integer)):
        return (int(value),)
    return tuple(int(x) for x in value)


def sweep_configs(base: TrainConfig, param: str, values: Sequence) -> List[Tuple[object, TrainConfig]]:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    out = []
    for value in values:
        if param == "embedding_dim":
            cfg = replace(base, embedding_dim=int(value))
        elif param == "hidden_dims":
            dims = _parse_hidden(value)
            cfg = replace(base, hidden_dims=dims, shared_depth=None)
            value = "-".join(str(d) for d in dims)
        elif param == "lambda1":
            cfg = replace(base, lambda1=float(value))
        else:
            hard = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "hard", "yes")
            cfg = replace(base, variant="dcmt_hard", lambda1=0.0) if hard else base
            value = bool(hard)
        out.append((value, cfg))
    return out


def sweep(train_data: Batch, eval_data: Batch, schema: FeatureSchema, base: TrainConfig,
          param: str, values: Sequence, space: Optional[str] = None) -> List[dict]:
    """One train + evaluation run per value; returns one row per run.

    ``space`` defaults to the entire space when ``eval_data`` carries ``r_full``.
    """
    from .evaluation import evaluate

    rows = []
    for value, cfg in sweep_configs(base, param, values):
        res = train(train_data, schema, cfg)
        if space is None:
            space = "entire" if eval_data.r_full is not None else "click"
        report = evaluate(res.model, eval_data, space=space)
        last = res.log[-1] if res.log else {"train_loss": {}, "residual_mean": None}
        rows.append({
            "param": param,
            "value": value,
            "variant": cfg.variant,
            "cvr_auc": report.cvr_auc,
            "ctcvr_auc": report.ctcvr_auc,
            "final_loss": last["train_loss"].get("total"),
            "final_cvr_loss": last["train_loss"].get("cvr"),
            "residual_mean": last["residual_mean"],
        })
    return rows
