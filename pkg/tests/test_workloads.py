import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbitsim.workloads import (
    DynamicPattern,
    SizeModel,
    Workload,
    ZipfGen,
    cacheable_ratio,
    key_name,
    load_histogram,
    value_matches_key,
    zipf_cdf,
    zipf_pmf,
)


def brute_pmf(n, alpha):
    w = [r ** -alpha for r in range(1, n + 1)]
    s = sum(w)
    return [x / s for x in w]


def test_pmf_matches_brute_force():
    assert np.allclose(zipf_pmf(500, 0.99), brute_pmf(500, 0.99))
    assert zipf_cdf(500, 0.99)[-1] == pytest.approx(1.0)


def test_rank1_over_rank2_frequency():
    ranks = ZipfGen(100_000, 0.99, np.random.default_rng(4)).sample(2_000_000)
    c1 = np.count_nonzero(ranks == 1)
    c2 = np.count_nonzero(ranks == 2)
    assert c1 / c2 == pytest.approx(2 ** 0.99, rel=0.03)


def test_empirical_head_matches_pmf():
    n = 1000
    ranks = ZipfGen(n, 0.99, np.random.default_rng(5)).sample(500_000)
    freq = np.bincount(ranks, minlength=n + 1)[1:] / len(ranks)
    pmf = brute_pmf(n, 0.99)
    for r in range(10):
        assert freq[r] == pytest.approx(pmf[r], rel=0.05)


def test_alpha_zero_is_uniform():
    ranks = ZipfGen(100, 0.0, np.random.default_rng(6)).sample(1_000_000)
    counts = np.bincount(ranks, minlength=101)[1:]
    assert counts.min() > 0 and counts.max() / counts.min() <= 1.1


def test_zipf_seeded_reproducible():
    a = ZipfGen(1000, 0.9, 7).sample(100)
    b = ZipfGen(1000, 0.9, 7).sample(100)
    assert (a == b).all() and a.min() >= 1 and a.max() <= 1000


def test_zipf_needs_keys():
    with pytest.raises(ValueError):
        zipf_cdf(0, 0.99)


def test_bimodal_sampled_fraction():
    sizes = SizeModel().sample_value_size(np.random.default_rng(8), 200_000)
    assert np.mean(sizes == 64) == pytest.approx(0.82, abs=0.01)
    assert set(np.unique(sizes)) == {64, 1024}


def test_assign_exact_per_block():
    sizes = SizeModel().assign(10_500, np.random.default_rng(9))
    for start in range(0, 10_000, 1000):
        assert np.count_nonzero(sizes[start:start + 1000] == 64) == 820
    assert np.count_nonzero(sizes[10_000:] == 64) == 410


def test_cacheable_ratio_bimodal():
    wl = Workload(n_keys=10_000)
    assert cacheable_ratio(wl.item_sizes(), 16, 64) == pytest.approx(0.82, abs=1e-12)


def test_cacheable_ratio_edges():
    assert cacheable_ratio([(16, 64), (17, 64), (16, 65)], 16, 64) == pytest.approx(1 / 3)
    assert cacheable_ratio([], 16, 64) == 0.0
    with pytest.raises(ValueError):
        cacheable_ratio([(1, 1)], 0, 64)


def test_point_and_histogram_models(tmp_path):
    assert set(SizeModel("point", small=100).assign(50, np.random.default_rng(0))) == {100}
    p = tmp_path / "h.txt"
    p.write_text("# size prob\n64 0.5\n512 0.5\n")
    hist = load_histogram(p)
    assert hist == [(64, 0.5), (512, 0.5)]
    m = SizeModel("histogram", hist=hist)
    assert np.count_nonzero(m.assign(1000, np.random.default_rng(0)) == 64) == 500


def test_bad_size_models():
    with pytest.raises(ValueError):
        SizeModel("weird")
    with pytest.raises(ValueError):
        SizeModel("histogram")
    with pytest.raises(ValueError):
        SizeModel(p_small=1.5)


def test_bad_histogram_file(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("64 0.5 9\n")
    with pytest.raises(ValueError):
        load_histogram(p)


def test_hot_in_swaps_head_and_tail():
    pat = DynamicPattern("hot-in", swap_count=128, period_s=10)
    n = 10_000
    assert pat.item_of(1, n, 0.0) == 0
    assert pat.item_of(1, n, 10.5e9) == n - 1
    assert pat.item_of(n, n, 10.5e9) == 0
    assert pat.item_of(500, n, 10.5e9) == 499
    assert pat.item_of(1, n, 20.5e9) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(300, 3000), st.floats(0, 100))
def test_hot_in_preserves_popularity_mass(n, t_s):
    pat = DynamicPattern("hot-in", swap_count=128, period_s=10)
    items = [pat.item_of(r, n, t_s * 1e9) for r in range(1, n + 1)]
    assert sorted(items) == list(range(n))
    pmf = zipf_pmf(n, 0.99)
    mass = np.zeros(n)
    for r, it in enumerate(items):
        mass[it] += pmf[r]
    assert mass.sum() == pytest.approx(1.0)
    assert sorted(mass) == pytest.approx(sorted(pmf))


def test_unknown_pattern():
    with pytest.raises(ValueError):
        DynamicPattern("churn")


def test_workload_values_and_meta():
    wl = Workload(n_keys=1000, n_servers=8)
    key, hkey, home = wl.meta(3)
    assert key == key_name(3) == b"0000000000000003"
    assert 0 <= home < 8
    v0 = wl.initial_value(key)
    assert len(v0) == wl.value_size(3) and value_matches_key(key, v0)
    w = wl.write_value(3, 2, 17)
    assert w.startswith(key + b"|c2s17|") and not value_matches_key(b"0000000000000004", w)


def test_hottest_follows_pattern():
    wl = Workload(n_keys=1000, pattern=DynamicPattern("hot-in", swap_count=10, period_s=1))
    assert wl.hottest(3) == [0, 1, 2]
    assert wl.hottest(3, 1.5e9) == [999, 998, 997]


def test_write_ratio_validated():
    with pytest.raises(ValueError):
        Workload(n_keys=10, write_ratio=1.2)
