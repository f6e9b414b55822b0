"""CVR loss estimators, their bias measurements and the unbiasedness checkers.

Everything here works on plain numpy arrays; nothing records gradients. The
trainer builds its objective on a tape separately, and these functions serve
as the independent recomputation of that objective.

Arrays are indexed by sample. ``o`` holds click labels, ``r`` observed
conversion labels (``r = 1`` only where ``o = 1``), ``r_full`` the
entire-space conversion labels that only a synthetic oracle can supply.
Sums run sequentially left to right so results do not depend on numpy's
pairwise reduction.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

LOG_CLIP = 1e-12
DEFAULT_EPS = 1e-6


class EstimatorError(ValueError):
    pass


def _arr(x, dtype=np.float64) -> np.ndarray:
    return np.asarray(x, dtype=dtype).reshape(-1)


def _seq_sum(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x)[-1])


def clip_propensity(o_hat, eps: float = DEFAULT_EPS) -> np.ndarray:
    if not 0.0 < eps < 0.5:
        raise EstimatorError(f"clipping eps must lie in (0, 0.5), got {eps}")
    return np.clip(np.asarray(o_hat, dtype=np.float64), eps, 1.0 - eps)


def log_loss(r, r_hat) -> np.ndarray:
    """Elementwise binary log loss with predictions clipped to [1e-12, 1 - 1e-12]."""
    r = np.asarray(r, dtype=np.float64)
    p = np.clip(np.asarray(r_hat, dtype=np.float64), LOG_CLIP, 1.0 - LOG_CLIP)
    return -r * np.log(p) - (1.0 - r) * np.log(1.0 - p)


def _check_propensity(o_hat, o, nonclicked: bool = True):
    bad = np.any((o_hat <= 0.0)[o == 1])
    if nonclicked:
        bad = bad or np.any((o_hat >= 1.0)[o == 0])
    if bad:
        raise EstimatorError("propensities must be clipped into (0, 1) before weighting")


# ---------------------------------------------------------------------------
# per-space losses


def ground_truth_loss(r_full, r_hat) -> float:
    if r_full is None:
        raise EstimatorError("ground-truth loss needs entire-space conversion labels")
    r_full = _arr(r_full)
    if r_full.size == 0:
        raise EstimatorError("empty exposure space")
    return _seq_sum(log_loss(r_full, _arr(r_hat))) / r_full.size


def naive_loss(r, r_hat, o) -> float:
    o = _arr(o, np.int64)
    n_clicked = int(o.sum())
    if n_clicked == 0:
        raise EstimatorError("no clicked samples")
    e = log_loss(_arr(r), _arr(r_hat))
    return _seq_sum(e[o == 1]) / n_clicked


def bias_naive(r, r_full, r_hat, o) -> float:
    return abs(naive_loss(r, r_hat, o) - ground_truth_loss(r_full, r_hat))


def ipw_loss(r, r_hat, o_hat, o) -> float:
    o = _arr(o, np.int64)
    o_hat = _arr(o_hat)
    _check_propensity(o_hat, o, nonclicked=False)
    e = log_loss(_arr(r), _arr(r_hat))
    m = o == 1
    return _seq_sum(e[m] / o_hat[m]) / o.size


def dr_loss(r, r_hat, o_hat, e_hat, o) -> float:
    o = _arr(o, np.int64)
    o_hat = _arr(o_hat)
    e_hat = _arr(e_hat)
    if np.any(e_hat < 0):
        raise EstimatorError("imputed errors must be non-negative")
    _check_propensity(o_hat, o, nonclicked=False)
    e = log_loss(_arr(r), _arr(r_hat))
    delta = e - e_hat
    term = e_hat.copy()
    m = o == 1
    term[m] = e_hat[m] + delta[m] / o_hat[m]
    return _seq_sum(term) / o.size


def dcmt_naive_loss(r, r_hat, o_hat, o) -> float:
    o = _arr(o, np.int64)
    o_hat = _arr(o_hat)
    _check_propensity(o_hat, o)
    e = log_loss(_arr(r), _arr(r_hat))
    m = o == 1
    term = np.where(m, e / np.where(m, o_hat, 1.0), e / np.where(m, 1.0, 1.0 - o_hat))
    return _seq_sum(term) / o.size


def snips_weights(o_hat, space: str) -> np.ndarray:
    """Self-normalised inverse propensity weights over one space.

    ``o_hat`` holds the CTR predictions of the samples in that space only.
    """
    o_hat = _arr(o_hat)
    if o_hat.size == 0:
        return np.zeros(0)
    if space == "clicked":
        raw = 1.0 / o_hat
    elif space == "nonclicked":
        raw = 1.0 / (1.0 - o_hat)
    else:
        raise EstimatorError(f"unknown space {space!r}")
    return raw / _seq_sum(raw)


def counterfactual_regularizer(r_hat, r_hat_cf, lambda1: float) -> float:
    if lambda1 < 0:
        raise EstimatorError("lambda1 must be non-negative")
    r_hat, r_hat_cf = _arr(r_hat), _arr(r_hat_cf)
    if r_hat.size == 0:
        return 0.0
    return lambda1 * _seq_sum(np.abs(1.0 - (r_hat + r_hat_cf))) / r_hat.size


def dcmt_main_loss(r, r_hat, r_hat_cf, o_hat, o, snips: bool = False) -> float:
    """Factual loss over clicks plus counterfactual loss over the mirrored non-clicks.

    Non-clicked samples take the flipped label ``1 - r``. With ``snips`` each
    space's inverse weights are normalised to sum to one and the ``1/|D|``
    factor is dropped.
    """
    o = _arr(o, np.int64)
    o_hat = _arr(o_hat)
    _check_propensity(o_hat, o)
    r = _arr(r)
    m = o == 1
    e_f = log_loss(r[m], _arr(r_hat)[m])
    e_cf = log_loss(1.0 - r[~m], _arr(r_hat_cf)[~m])
    if snips:
        return (_seq_sum(snips_weights(o_hat[m], "clicked") * e_f)
                + _seq_sum(snips_weights(o_hat[~m], "nonclicked") * e_cf))
    return (_seq_sum(e_f / o_hat[m]) + _seq_sum(e_cf / (1.0 - o_hat[~m]))) / o.size


def dcmt_full_loss(r, r_hat, r_hat_cf, o_hat, o, lambda1: float, snips: bool = False) -> float:
    return (dcmt_main_loss(r, r_hat, r_hat_cf, o_hat, o, snips)
            + counterfactual_regularizer(r_hat, r_hat_cf, lambda1))


def dcmt_cf_loss(r, r_hat, r_hat_cf, o, lambda1: float) -> float:
    """Counterfactual mechanism without propensity weights (the CF ablation)."""
    o = _arr(o, np.int64)
    r = _arr(r)
    m = o == 1
    e_f = log_loss(r[m], _arr(r_hat)[m])
    e_cf = log_loss(1.0 - r[~m], _arr(r_hat_cf)[~m])
    main = (_seq_sum(e_f) + _seq_sum(e_cf)) / o.size
    return main + counterfactual_regularizer(r_hat, r_hat_cf, lambda1)


def ctr_loss(o, o_hat) -> float:
    o = _arr(o)
    return _seq_sum(log_loss(o, _arr(o_hat))) / o.size


def ctcvr_loss(r, t_hat) -> float:
    r = _arr(r)
    return _seq_sum(log_loss(r, _arr(t_hat))) / r.size


def imputation_loss(r, r_hat, e_hat, o, o_hat=None) -> float:
    """Mean squared error of the imputed CVR error over clicks (0 when none).

    With ``o_hat`` given, each click is weighted by ``1/o_hat`` and the sum is
    divided by ``|D|`` instead.
    """
    o = _arr(o, np.int64)
    m = o == 1
    if not m.any():
        return 0.0
    sq = (_arr(e_hat)[m] - log_loss(_arr(r)[m], _arr(r_hat)[m])) ** 2
    if o_hat is None:
        return _seq_sum(sq) / int(m.sum())
    return _seq_sum(sq / _arr(o_hat)[m]) / o.size


def total_loss(ctr: float, cvr: float, ctcvr: float, sq_norm: float = 0.0,
               lambda2: float = 0.0, w_cvr: float = 1.0, w_ctcvr: float = 1.0) -> float:
    return ctr + w_cvr * cvr + w_ctcvr * ctcvr + lambda2 * sq_norm


# ---------------------------------------------------------------------------
# variant objectives and reports


def variant_objective(variant: str, o, r, pred, lambda1: float = 0.001, lambda2: float = 0.0,
                      sq_norm: float = 0.0, eps: float = DEFAULT_EPS, snips: bool = False,
                      imputation_weighted: bool = False) -> Dict[str, float]:
    """Component losses and the total training objective of one variant on one batch.

    ``pred`` is a :class:`dcmt.model.PredictionBatch` (or anything with the
    same attributes).
    """
    o = _arr(o, np.int64)
    r = _arr(r)
    w = clip_propensity(pred.o_hat, eps)
    has_click = bool(o.any())
    parts = {"ctr": ctr_loss(o, pred.o_hat), "cvr": 0.0, "ctcvr": 0.0, "imputation": 0.0}
    if variant == "naive":
        parts["cvr"] = naive_loss(r, pred.r_hat, o) if has_click else 0.0
    elif variant == "esmm":
        parts["ctcvr"] = ctcvr_loss(r, pred.t_hat)
    elif variant == "ipw":
        parts["cvr"] = ipw_loss(r, pred.r_hat, w, o)
    elif variant == "dr":
        parts["cvr"] = dr_loss(r, pred.r_hat, w, pred.e_hat, o)
        parts["imputation"] = imputation_loss(r, pred.r_hat, pred.e_hat, o,
                                              w if imputation_weighted else None)
    elif variant in ("dcmt", "dcmt_hard"):
        lam = lambda1 if variant == "dcmt" else 0.0
        parts["cvr"] = dcmt_full_loss(r, pred.r_hat, pred.r_hat_cf, w, o, lam, snips)
        parts["ctcvr"] = ctcvr_loss(r, pred.t_hat)
    elif variant == "dcmt_pd":
        parts["cvr"] = dcmt_naive_loss(r, pred.r_hat, w, o)
        parts["ctcvr"] = ctcvr_loss(r, pred.t_hat)
    elif variant == "dcmt_cf":
        parts["cvr"] = dcmt_cf_loss(r, pred.r_hat, pred.r_hat_cf, o, lambda1)
        parts["ctcvr"] = ctcvr_loss(r, pred.t_hat)
    else:
        raise EstimatorError(f"unknown variant {variant!r}")
    parts["reg"] = lambda2 * sq_norm
    parts["total"] = (total_loss(parts["ctr"], parts["cvr"], parts["ctcvr"], sq_norm, lambda2)
                      + parts["imputation"])
    return parts


@dataclass
class LossReport:
    ground_truth: Optional[float] = None
    naive: Optional[float] = None
    ipw: Optional[float] = None
    dr: Optional[float] = None
    dcmt_naive: Optional[float] = None
    dcmt_main: Optional[float] = None
    dcmt_full: Optional[float] = None
    ctr: Optional[float] = None
    ctcvr: Optional[float] = None
    esmm_total: Optional[float] = None
    total: Optional[float] = None
    regularizer: Optional[float] = None
    bias: Dict[str, float] = field(default_factory=dict)
    lambda1: float = 0.001
    lambda2: float = 0.0001
    w_cvr: float = 1.0
    w_ctcvr: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def loss_report(o, r, pred, r_full=None, variant: str = "dcmt", lambda1: float = 0.001,
                lambda2: float = 0.0001, sq_norm: float = 0.0, eps: float = DEFAULT_EPS,
                snips: bool = False) -> LossReport:
    """Every estimator that the available labels allow, evaluated on ``pred``."""
    o = _arr(o, np.int64)
    r = _arr(r)
    w = clip_propensity(pred.o_hat, eps)
    rep = LossReport(lambda1=lambda1, lambda2=lambda2)
    rep.ctr = ctr_loss(o, pred.o_hat)
    rep.ctcvr = ctcvr_loss(r, pred.t_hat)
    rep.esmm_total = rep.ctr + rep.ctcvr
    if o.any():
        rep.naive = naive_loss(r, pred.r_hat, o)
    rep.ipw = ipw_loss(r, pred.r_hat, w, o)
    if pred.e_hat is not None:
        rep.dr = dr_loss(r, pred.r_hat, w, pred.e_hat, o)
    rep.dcmt_naive = dcmt_naive_loss(r, pred.r_hat, w, o)
    rep.dcmt_main = dcmt_main_loss(r, pred.r_hat, pred.r_hat_cf, w, o, snips)
    rep.regularizer = counterfactual_regularizer(pred.r_hat, pred.r_hat_cf, lambda1)
    rep.dcmt_full = rep.dcmt_main + rep.regularizer
    rep.total = variant_objective(variant, o, r, pred, lambda1, lambda2, sq_norm, eps,
                                  snips)["total"]
    if r_full is not None:
        rep.ground_truth = ground_truth_loss(r_full, pred.r_hat)
        for name in ("naive", "ipw", "dr", "dcmt_naive", "dcmt_full"):
            value = getattr(rep, name)
            if value is not None:
                rep.bias[name] = abs(value - rep.ground_truth)
    return rep


# ---------------------------------------------------------------------------
# unbiasedness checks


@dataclass
class BiasInstance:
    """A fixed set of exposures with known click propensities and predictions."""

    p: np.ndarray
    r_full: np.ndarray
    r_hat: np.ndarray
    o: np.ndarray
    o_hat: Optional[np.ndarray] = None

    @property
    def r(self) -> np.ndarray:
        return self.o * self.r_full

    def __len__(self):
        return len(self.p)


def random_instance(rng: np.random.Generator, n: int = 10, p_low: float = 0.2,
                    p_high: float = 0.8) -> BiasInstance:
    p = rng.uniform(p_low, p_high, size=n)
    q = rng.uniform(0.05, 0.95, size=n)
    r_full = (rng.uniform(size=n) < q).astype(np.int64)
    r_hat = rng.uniform(0.02, 0.98, size=n)
    o = (rng.uniform(size=n) < p).astype(np.int64)
    return BiasInstance(p, r_full, r_hat, o)


@dataclass
class BiasCheck:
    estimator: str
    estimate: float
    ground_truth: float
    bias: float
    relative_bias: float
    tolerance: float
    passed: bool
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


def _rel(bias: float, gt: float) -> float:
    return bias / abs(gt) if gt != 0 else (0.0 if bias == 0 else math.inf)


def _check_degenerate(p):
    p = _arr(p)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise EstimatorError("true propensities must lie strictly inside (0, 1)")


def exact_expectation(inst: BiasInstance, loss_fn: Callable[[np.ndarray], float]) -> float:
    """Expectation of ``loss_fn(o)`` over every click vector o ~ Bernoulli(p)."""
    n = len(inst)
    if n > 20:
        raise EstimatorError("exact enumeration is limited to 20 samples")
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n):
        o = np.asarray(bits, dtype=np.int64)
        prob = float(np.prod(np.where(o == 1, inst.p, 1.0 - inst.p)))
        total += prob * loss_fn(o)
    return total


def check_ipw_unbiased(inst: BiasInstance, trials: int = 100_000, seed: int = 0,
                       tolerance: float = 0.01) -> BiasCheck:
    """Monte Carlo: redraw clicks from the true propensities with o_hat = p."""
    _check_degenerate(inst.p)
    rng = np.random.default_rng(seed)
    e = log_loss(inst.r_full, inst.r_hat)
    gt = ground_truth_loss(inst.r_full, inst.r_hat)
    n = len(inst)
    acc = 0.0
    chunk = 10_000
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        o = rng.uniform(size=(k, n)) < inst.p
        # r = r_full on clicked rows, so e is the observed loss there.
        per_trial = (o * (e / inst.p)).sum(axis=1) / n
        acc += _seq_sum(per_trial)
        done += k
    est = acc / trials
    bias = abs(est - gt)
    rel = _rel(bias, gt)
    return BiasCheck("ipw", est, gt, bias, rel, tolerance, rel < tolerance,
                     {"trials": float(trials)})


def check_dr_unbiased(inst: BiasInstance, eps: float = DEFAULT_EPS,
                      tolerance: float = 1e-12) -> BiasCheck:
    """Deterministic identity: with a perfect error imputation the DR loss is the ideal loss."""
    _check_degenerate(inst.p)
    e = log_loss(inst.r_full, inst.r_hat)
    o_hat = clip_propensity(inst.p if inst.o_hat is None else inst.o_hat, eps)
    est = dr_loss(inst.r_full * inst.o, inst.r_hat, o_hat, e.copy(), inst.o)
    # on clicked rows r = r_full; on unclicked rows the o-term vanishes, so
    # e_hat = e over all of D is the imputation that makes delta zero.
    gt = ground_truth_loss(inst.r_full, inst.r_hat)
    bias = abs(est - gt)
    return BiasCheck("dr", est, gt, bias, _rel(bias, gt), tolerance, bias < tolerance)


def check_dcmt_unbiased(inst: BiasInstance, eps: float = DEFAULT_EPS,
                        tolerance: Optional[float] = None, stochastic: bool = True) -> BiasCheck:
    """Deterministic identity with o_hat = clip(o) and r_hat_cf = 1 - r_hat.

    The reference is the ideal loss on observed labels. The stochastic
    expectation under o ~ Bernoulli(p) with o_hat = p is reported alongside
    (as ``stochastic_expectation``, when ``stochastic`` is set and the instance
    has at most 16 samples) but is not part of the verdict.
    """
    _check_degenerate(inst.p)
    tolerance = 100.0 * eps if tolerance is None else tolerance
    r = inst.r
    o_hat = clip_propensity(inst.o.astype(np.float64), eps)
    r_hat_cf = 1.0 - inst.r_hat
    est = dcmt_full_loss(r, inst.r_hat, r_hat_cf, o_hat, inst.o, lambda1=1.0)
    gt = ground_truth_loss(r, inst.r_hat)
    bias = abs(est - gt)

    e_full = log_loss(inst.r_full, inst.r_hat)
    e_full_cf = log_loss(1.0 - inst.r_full, r_hat_cf)

    def main_given(o):
        # with o drawn, observed r = o * r_full, so the mirrored label on N is 1.
        return (_seq_sum(np.where(o == 1, e_full / inst.p, 0.0))
                + _seq_sum(np.where(o == 0, log_loss(1.0, r_hat_cf) / (1.0 - inst.p), 0.0))) / len(o)

    details = {"eps": eps}
    if stochastic and len(inst) <= 16:
        details["stochastic_expectation"] = exact_expectation(inst, main_given)
        details["stochastic_ground_truth"] = ground_truth_loss(inst.r_full, inst.r_hat)
        details["stochastic_mirror_sum"] = _seq_sum(e_full + e_full_cf) / len(inst)
    return BiasCheck("dcmt", est, gt, bias, _rel(bias, gt), tolerance, bias < tolerance, details)


def esmm_instance() -> BiasInstance:
    """Four exposures where the ESMM objective misses the ideal CVR loss."""
    return BiasInstance(
        p=np.array([0.9, 0.6, 0.3, 0.1]),
        r_full=np.array([1, 0, 1, 0]),
        r_hat=np.array([0.7, 0.4, 0.5, 0.2]),
        o=np.array([1, 1, 0, 0]),
        o_hat=np.array([0.9, 0.6, 0.3, 0.1]),
    )


def esmm_bias_demo(inst: Optional[BiasInstance] = None, threshold: float = 0.01) -> BiasCheck:
    """Exact expected ESMM loss (CTR + CTCVR) over all click outcomes vs the ideal loss."""
    inst = esmm_instance() if inst is None else inst
    _check_degenerate(inst.p)
    o_hat = inst.p if inst.o_hat is None else inst.o_hat
    t_hat = o_hat * inst.r_hat

    def esmm_given(o):
        return _seq_sum(log_loss(o, o_hat) + log_loss(o * inst.r_full, t_hat)) / len(o)

    est = exact_expectation(inst, esmm_given)
    gt = ground_truth_loss(inst.r_full, inst.r_hat)
    bias = abs(est - gt)
    return BiasCheck("esmm", est, gt, bias, _rel(bias, gt), threshold, bias > threshold)
