import numpy as np
import pytest

from dcmt.features import load_dataset, load_schema
from dcmt.gradcore import sigmoid_array
from dcmt.synth import SynthConfig, SynthConfigError, generate, posterior_stats, split, write

BIG = dict(num_users=1000, num_items=500, exposures_per_user=100)


def test_uncorrelated_paths_give_uncorrelated_rates():
    _, b = generate(SynthConfig(rho=0.0, seed=3, **BIG))
    assert len(b) == 100_000
    assert abs(np.corrcoef(b.p_true, b.extras["q"])[0, 1]) < 0.02


def test_click_rate_matches_sigmoid_without_latents():
    _, b = generate(SynthConfig(latent_std=0.0, ctr_bias=-2.0, seed=4, **BIG))
    p = float(sigmoid_array(np.array(-2.0)))
    assert p == pytest.approx(0.1192, abs=1e-4)
    np.testing.assert_array_equal(b.p_true, p)
    sd = np.sqrt(p * (1 - p) / len(b))
    assert abs(b.o.mean() - p) < 3 * sd


def test_generated_rows_are_consistent():
    _, b = generate(SynthConfig(num_users=300, num_items=40, exposures_per_user=20, seed=1))
    assert np.all(b.r <= b.o)
    assert np.all(b.r == b.o * b.r_full)
    for x in (b.p_true, b.extras["q"]):
        assert np.all((x > 0) & (x < 1))
    # rows ordered by (user, item) across shard boundaries
    key = b.columns["user_id"] * 40 + b.columns["item_id"]
    assert np.all(np.diff(key) > 0)


def test_same_seed_writes_identical_files(tmp_path):
    cfg = SynthConfig(num_users=50, num_items=30, exposures_per_user=10, noise_dense_fields=1, seed=7)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = write(tmp_path / "a", cfg), write(tmp_path / "b", cfg)
    for k in ("schema", "train", "test"):
        assert a[k].read_bytes() == b[k].read_bytes()
    schema = load_schema(a["schema"])
    samples, _ = load_dataset(a["train"], schema)
    assert samples[0].p_true is not None and samples[0].r_full is not None


def test_different_seeds_differ():
    _, a = generate(SynthConfig(num_users=20, num_items=30, exposures_per_user=10, seed=1))
    _, b = generate(SynthConfig(num_users=20, num_items=30, exposures_per_user=10, seed=2))
    assert not np.array_equal(a.p_true, b.p_true)


def test_posterior_ordering_under_strong_correlation():
    _, b = generate(SynthConfig(rho=0.9, ctr_bias=-1.0, cvr_bias=-1.0, seed=5, **BIG))
    s = posterior_stats(b)
    assert s.mean_o > s.mean_d > s.mean_n
    assert s.n_o + s.n_n == s.n_d == 100_000


def test_no_correlation_no_selection_gap():
    _, b = generate(SynthConfig(rho=0.0, seed=6, **BIG))
    s = posterior_stats(b)
    se = np.sqrt(s.mean_o * (1 - s.mean_o) / s.n_o + s.mean_n * (1 - s.mean_n) / s.n_n)
    assert abs(s.mean_o - s.mean_n) < 3 * se


def test_homogeneous_rates():
    _, b = generate(SynthConfig(latent_std=0.0, cvr_bias=-1.2, seed=8, **BIG))
    q = float(sigmoid_array(np.array(-1.2)))
    s = posterior_stats(b)
    for mean, n in ((s.mean_d, s.n_d), (s.mean_o, s.n_o), (s.mean_n, s.n_n)):
        assert abs(mean - q) < 3 * np.sqrt(q * (1 - q) / n)


def test_selection_gap_grows_with_correlation():
    small = dict(num_users=400, num_items=200, exposures_per_user=50)
    gaps = []
    for rho in (0.0, 0.3, 0.6, 0.9):
        g = []
        for seed in range(5):
            s = posterior_stats(generate(SynthConfig(rho=rho, seed=seed, **small))[1])
            g.append(s.mean_o - s.mean_n)
        gaps.append(np.mean(g))
    assert all(b > a for a, b in zip(gaps, gaps[1:])), gaps


def test_posterior_needs_full_labels():
    _, b = generate(SynthConfig(num_users=5, num_items=5, exposures_per_user=5))
    b.r_full = None
    with pytest.raises(ValueError, match="r_full"):
        posterior_stats(b)


@pytest.mark.parametrize("kw", [dict(rho=1.5), dict(num_users=0), dict(latent_dim=0),
                                dict(num_items=3, exposures_per_user=4), dict(ctr_bias=float("nan"))])
def test_config_validation(kw):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kw)


def test_user_split_keeps_users_whole():
    _, b = generate(SynthConfig(num_users=200, num_items=30, exposures_per_user=10, seed=2))
    tr, te = split(b, 0.25, seed=2, by="user")
    assert len(tr) + len(te) == len(b)
    assert not set(tr.columns["user_id"]) & set(te.columns["user_id"])
    assert 0.1 < len(te) / len(b) < 0.4


def test_pair_split_share():
    _, b = generate(SynthConfig(num_users=200, num_items=30, exposures_per_user=10, seed=2))
    tr, te = split(b, 0.2, seed=2, by="pair")
    assert len(tr) + len(te) == len(b)
    assert abs(len(te) / len(b) - 0.2) < 0.03
    with pytest.raises(SynthConfigError):
        split(b, 0.2, seed=2, by="item")
