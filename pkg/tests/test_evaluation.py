from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmt.evaluation import (UndefinedAUC, auc, evaluate, histogram, prediction_distribution,
                             report_from_predictions, write_histogram_csv, write_report)
from dcmt.model import Model
from dcmt.synth import SynthConfig, generate


def pairwise_auc(labels, scores):
    """Quadratic oracle: concordant pairs plus half the ties, over all pos/neg pairs."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    hits = 0
    for a in pos:
        for b in neg:
            hits += 2 if a > b else (1 if a == b else 0)
    return hits / (2.0 * len(pos) * len(neg))


def test_auc_examples():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0], [0.5, 0.5]) == 0.5
    assert auc([1, 1, 0, 0], [0.8, 0.3, 0.6, 0.1]) == 0.75


def test_auc_errors():
    with pytest.raises(UndefinedAUC, match="undefined AUC"):
        auc([1, 1], [0.2, 0.3])
    with pytest.raises(ValueError):
        auc([1, 0], [0.2])
    with pytest.raises(ValueError):
        auc([2, 0], [0.2, 0.1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 200), st.integers(1, 6))
def test_auc_equals_pairwise_oracle(seed, n, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, levels, n) / levels  # coarse grid forces ties
    assert auc(y, s) == pairwise_auc(y, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_auc_invariant_to_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 60)
    y[:2] = (0, 1)
    s = rng.normal(size=60)
    base = auc(y, s)
    assert auc(y, np.exp(s)) == base
    assert auc(y, 3 * s - 1) == base
    assert auc(y, -s) == pytest.approx(1 - base, abs=1e-15)


def test_histogram_point_mass_and_edges():
    h = histogram(np.full(100, 0.05), 10)
    assert h.counts[0] == 100 and h.counts.sum() == 100
    h = histogram([0.0, 1.0, 0.1, 0.999], 10)
    assert h.counts[0] == 1 and h.counts[9] == 2 and h.counts[1] == 1
    with pytest.raises(ValueError):
        histogram([0.5], 0)


def _synthetic(seed=3):
    return generate(SynthConfig(num_users=300, num_items=100, exposures_per_user=40, seed=seed))


def test_oracle_predictions_give_oracle_auc():
    _, b = _synthetic()
    q = b.extras["q"]
    pred = SimpleNamespace(r_hat=q, t_hat=b.p_true * q, o_hat=b.p_true)
    rep = report_from_predictions(pred, b)
    assert rep.cvr_auc == auc(b.r_full, q)
    assert rep.ctr_auc == auc(b.o, b.p_true)
    assert rep.posterior_gamma > rep.posterior_beta > rep.posterior_alpha


def test_constant_predictor_scores_half():
    _, b = _synthetic()
    c = np.full(len(b), 0.3)
    rep = report_from_predictions(SimpleNamespace(r_hat=c, t_hat=c, o_hat=c), b)
    assert rep.cvr_auc == 0.5 and rep.ctr_auc == 0.5
    assert rep.mean_r_hat_d == pytest.approx(0.3)
    assert rep.gap_beta == pytest.approx(abs(0.3 - rep.posterior_beta))


def test_click_space_report():
    _, b = _synthetic()
    q = b.extras["q"]
    rep = report_from_predictions(SimpleNamespace(r_hat=q, t_hat=q, o_hat=q), b, space="click")
    m = b.o == 1
    assert rep.cvr_auc == auc(b.r[m], q[m])
    with pytest.raises(ValueError):
        report_from_predictions(SimpleNamespace(r_hat=q, t_hat=q, o_hat=q), b, space="both")


def test_evaluate_model_and_files(tmp_path):
    schema, b = _synthetic()
    m = Model.init(schema, "dcmt", (8, 4), seed=1)
    rep = evaluate(m, b, buckets=5)
    assert rep.n == len(b) and 0.0 <= rep.cvr_auc <= 1.0
    assert sum(row[2] for row in rep.histogram) == len(b) and len(rep.histogram) == 5
    dist = prediction_distribution(m, b, buckets=5)
    assert dist.mean_d == pytest.approx(rep.mean_r_hat_d)
    assert dist.gap == pytest.approx(rep.gap_beta)
    assert (dist.alpha, dist.beta, dist.gamma) == (rep.posterior_alpha, rep.posterior_beta,
                                                   rep.posterior_gamma)
    write_report(tmp_path / "r.json", rep)
    write_histogram_csv(tmp_path / "h.csv", rep.histogram)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bucket_low,bucket_high,count" and len(lines) == 6
    assert '"cvr_auc"' in (tmp_path / "r.json").read_text()
