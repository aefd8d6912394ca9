import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signgd_attn.datagen import (
    ConfigError,
    DataConfig,
    Dataset,
    Sample,
    fresh_samples,
    generate_dataset,
    load_dataset,
    noise_norm_stats,
    save_dataset,
    signal_orthogonality_rate,
    supports_disjoint,
)


def _sample_with_support(d, support, y=1):
    X = np.zeros((d, 2))
    X[0, 0] = y
    X[list(support), 1] = 1.0
    return Sample(X=X, y=y, signal_positions=(0,), noise_supports=(tuple(support),))


# --- examples ----------------------------------------------------------------


def test_row_a_shape_and_support(row_a_data):
    ds = row_a_data
    assert len(ds) == 20
    for smp in ds.samples:
        noise = smp.X[:, smp.noise_positions[0]]
        assert np.count_nonzero(noise) == 80
        assert noise[0] == 0.0
        assert smp.X[0, smp.signal_positions[0]] == smp.y


def test_s_zero_rejected_and_forced_support():
    with pytest.raises(ConfigError):
        generate_dataset(DataConfig(d=4, s=0, n=2))
    ds = generate_dataset(DataConfig(d=4, s=3, n=5, orthogonal=True, seed=3))
    for smp in ds.samples:
        assert smp.noise_supports == ((1, 2, 3),)  # coordinates 2..4 in one-based terms


@pytest.mark.parametrize("bad", [dict(d=10, s=10, n=2, orthogonal=True), dict(d=10, s=3, n=2, L=3), dict(d=10, s=3, n=0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate_dataset(DataConfig(**bad))


def test_determinism_bytes():
    cfg = DataConfig(d=10, s=3, n=2, seed=42)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.X.tobytes() == b.X.tobytes()
    assert a.y.tobytes() == b.y.tobytes()


def test_supports_disjoint_examples():
    a = _sample_with_support(8, (2, 3))
    b = _sample_with_support(8, (4, 5))
    c = _sample_with_support(8, (3, 4))
    cfg = DataConfig(d=8, s=2, n=2)
    assert supports_disjoint(Dataset(cfg, (a, b)))
    assert not supports_disjoint(Dataset(cfg, (a, c)))


def _disjoint_probability(d_eff, s, k):
    # probability that k independent uniform s-subsets of a d_eff-set are pairwise disjoint
    logp = 0.0
    for j in range(1, k):
        logp += math.lgamma(d_eff - j * s + 1) - math.lgamma(d_eff - j * s - s + 1)
        logp -= math.lgamma(d_eff + 1) - math.lgamma(d_eff - s + 1)
    return math.exp(logp)


def test_row_a_disjointness_rate_matches_closed_form():
    # Independent oracle: closed-form probability from counting, then direct set
    # intersection over 100 seeded datasets. At s = 80, n = 20 supports overlap
    # almost surely, so the observed rate is 0.
    p = _disjoint_probability(1999, 80, 20)
    assert p < 1e-100
    hits = 0
    for seed in range(100):
        ds = generate_dataset(DataConfig.row_a(seed=seed))
        sets = [set(sup) for smp in ds.samples for sup in smp.noise_supports]
        pairwise = all(not (sets[a] & sets[b]) for a in range(len(sets)) for b in range(a + 1, len(sets)))
        assert pairwise == supports_disjoint(ds)
        hits += pairwise
    assert hits == 0


def test_disjointness_rate_sparse_regime():
    # d = 2000, s = 10, n = 4: closed form ~0.76; Monte Carlo within 4 binomial SE
    p = _disjoint_probability(1999, 10, 4)
    trials = 400
    hits = sum(supports_disjoint(generate_dataset(DataConfig(d=2000, s=10, n=4, seed=k))) for k in range(trials))
    se = math.sqrt(p * (1 - p) / trials)
    assert abs(hits / trials - p) <= 4 * se


def test_noise_norm_hand_example():
    X = np.zeros((4, 2))
    X[0, 0] = 1.0
    X[:, 1] = (0.0, 1.0, -1.0, 0.0)
    smp = Sample(X=X, y=1, signal_positions=(0,), noise_supports=((1, 2),))
    stats = noise_norm_stats(Dataset(DataConfig(d=4, s=2, n=1), (smp,)))
    assert stats.l1[0, 0] == 2.0
    assert stats.l2sq[0, 0] == 2.0


def test_row_a_l2_bounds(row_a_data):
    c = row_a_data.config
    l2 = noise_norm_stats(row_a_data).l2sq
    assert np.all(l2 >= c.sigma_p**2 * c.s / 2) and np.all(l2 <= 1.5 * c.sigma_p**2 * c.s)


def test_row_a_l1_bounds_hold_for_most_patches():
    # The lower l1 bound sigma_p s / sqrt(2) sits 1.35 standard deviations below
    # the half-normal mean at s = 80, so a few patches per dataset fall below it.
    # Measured: 1-2 violations per 20 patches on seeds 0-4.
    viol = 0
    for seed in range(5):
        ds = generate_dataset(DataConfig.row_a(seed=seed))
        c = ds.config
        l1 = noise_norm_stats(ds).l1
        assert np.all(l1 <= c.sigma_p * c.s)
        viol += int(np.sum(l1 < c.sigma_p * c.s / np.sqrt(2)))
    assert viol <= 0.2 * 5 * 20


def test_l1_mean_matches_half_normal():
    cfg = DataConfig(d=2000, s=80, n=1000, sigma_p=2 / math.sqrt(80), seed=7)
    l1 = noise_norm_stats(generate_dataset(cfg)).l1.ravel()
    target = math.sqrt(2 / math.pi) * cfg.sigma_p * cfg.s
    assert abs(l1.mean() - target) <= 0.02 * target


def test_orthogonality_rate_examples():
    assert signal_orthogonality_rate([DataConfig(d=50, s=10, n=5, seed=k) for k in range(5)]) == 1.0
    assert signal_orthogonality_rate([DataConfig(d=10, s=10, n=2, orthogonal=False, seed=k) for k in range(5)]) == 0.0


def test_orthogonality_rate_closed_form():
    p = (1 - 80 / 2000) ** 20
    rate = signal_orthogonality_rate([DataConfig(d=2000, s=80, n=20, orthogonal=False, seed=k) for k in range(100)])
    assert rate >= 0.3
    assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / 100)


def test_fresh_samples_differ_from_training():
    cfg = DataConfig(d=30, s=3, n=4, seed=1)
    train = generate_dataset(cfg)
    test = fresh_samples(cfg, 4)
    assert not np.array_equal(train.X, test.X)
    assert np.array_equal(test.X, fresh_samples(cfg, 4).X)


def test_dataset_file_round_trip(tmp_path):
    ds = generate_dataset(DataConfig(d=30, s=4, n=5, L=4, seed=9))
    save_dataset(ds, tmp_path / "ds.jsonl")
    back = load_dataset(tmp_path / "ds.jsonl")
    assert back.config == ds.config
    assert back.X.tobytes() == ds.X.tobytes()
    assert [s.signal_positions for s in back.samples] == [s.signal_positions for s in ds.samples]


# --- properties --------------------------------------------------------------

configs = st.builds(
    lambda d, frac, n, half, orth, seed: DataConfig(
        d=d, s=max(1, int(frac * (d - 1))), n=n, L=2 * half, sigma_p=0.5, orthogonal=orth, seed=seed
    ),
    d=st.integers(2, 60),
    frac=st.floats(0.01, 1.0),
    n=st.integers(1, 6),
    half=st.integers(1, 3),
    orth=st.booleans(),
    seed=st.integers(0, 2**63 - 1),
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_support_cardinality_and_roles(cfg):
    ds = generate_dataset(cfg)
    assert len(ds) == cfg.n
    for smp in ds.samples:
        assert len(smp.signal_positions) == cfg.L // 2
        for l in smp.signal_positions:
            expected = np.zeros(cfg.d)
            expected[0] = smp.y
            assert np.array_equal(smp.X[:, l], expected)
        for l, sup in zip(smp.noise_positions, smp.noise_supports):
            nz = np.flatnonzero(smp.X[:, l])
            assert set(nz) <= set(sup) and len(sup) == cfg.s
            if cfg.orthogonal:
                assert smp.X[0, l] == 0.0


@settings(max_examples=30, deadline=None)
@given(configs)
def test_determinism_property(cfg):
    assert generate_dataset(cfg).X.tobytes() == generate_dataset(cfg).X.tobytes()


def test_concentration_of_norms():
    cfg = DataConfig(d=500, s=40, n=1000, sigma_p=0.3, seed=11)
    norms = noise_norm_stats(generate_dataset(cfg))
    l1, l2 = norms.l1.ravel(), norms.l2sq.ravel()
    m1 = math.sqrt(2 / math.pi) * cfg.sigma_p * cfg.s
    assert abs(l1.mean() - m1) <= 3 * l1.std(ddof=1) / math.sqrt(l1.size)
    m2 = cfg.sigma_p**2 * cfg.s
    assert abs(l2.mean() - m2) <= 3 * l2.std(ddof=1) / math.sqrt(l2.size)


def test_label_balance():
    ds = generate_dataset(DataConfig(d=3, s=1, n=10_000, seed=5))
    n_pos = int(np.sum(ds.y == 1))
    assert abs(n_pos - 5000) <= 4 * math.sqrt(10_000)
