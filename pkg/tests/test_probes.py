import io
import math
from dataclasses import replace

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from signgd_attn.datagen import DataConfig, Dataset, Sample, generate_dataset
from signgd_attn.optim import OptimizerSpec, run_training
from signgd_attn.probes import (
    SIGN_CLASSES,
    ProbeSnapshot,
    alignment_fraction,
    beta_stats,
    increment_audit,
    make_probe,
    read_jsonl,
    sign_table,
    snapshot,
    write_csv,
    write_jsonl,
    xi_l1_norms,
)
from signgd_attn.transformer import ModelConfig, Params, forward, init_params, zero_params

from conftest import disjoint_problem, small_problem


def _snap(q_xi, k_xi, t=0.0, q_mu=None, k_mu=None):
    q_xi, k_xi = np.asarray(q_xi, float), np.asarray(k_xi, float)
    m_k, n = q_xi.shape
    return ProbeSnapshot(
        t=t,
        q_mu=np.ones(m_k) if q_mu is None else np.asarray(q_mu, float),
        k_mu=-np.ones(m_k) if k_mu is None else np.asarray(k_mu, float),
        q_xi=q_xi,
        k_xi=k_xi,
        v_mu=0.0,
        v_xi=np.zeros(n),
        s11=np.full(n, 0.5),
        s21=np.full(n, 0.5),
        loss_deriv=np.full(n, 0.5),
        train_loss=math.log(2),
    )


# --- examples ----------------------------------------------------------------


def test_zero_params_snapshot(small):
    ds, _, _ = small
    s = snapshot(zero_params(ds.config.d, 2, 2), ds, 0)
    for arr in (s.q_mu, s.k_mu, s.q_xi, s.k_xi, s.v_xi):
        assert not arr.any()
    assert s.v_mu == 0.0
    assert np.all(s.s11 == 0.5) and np.all(s.s21 == 0.5) and np.all(s.loss_deriv == 0.5)


def test_row_a_initial_value_noise_band(row_a_data, row_a_params):
    c = row_a_data.config
    s = snapshot(row_a_params, row_a_data, 0)
    m_v, n, delta = 20, 20, 0.01
    bound = 2 * math.sqrt(2 * math.log(12 * m_v * n / delta)) * (0.1 / math.sqrt(2000)) * c.sigma_p * math.sqrt(c.s) / math.sqrt(m_v)
    assert np.max(np.abs(s.v_xi)) <= bound


def test_sign_table_identity_is_diagonal():
    rng = np.random.default_rng(0)
    s = _snap(rng.standard_normal((5, 4)), rng.standard_normal((5, 4)))
    tab = sign_table(s, s)
    assert np.array_equal(tab.counts, np.diag(np.diag(tab.counts)))
    assert tab.total == 20


def test_sign_table_hand_enumeration():
    # m_k = 2, n = 2: pairs (s, i) = (0,0), (0,1), (1,0), (1,1)
    ref = _snap(q_xi=[[1, -1], [1, -2]], k_xi=[[1, 1], [-1, -3]])  # K+Q+, K+Q-, K-Q+, K-Q-
    later = _snap(q_xi=[[2, 1], [-1, -1]], k_xi=[[3, 1], [-1, 2]], t=10)  # K+Q+, K+Q+, K-Q-, K+Q-
    tab = sign_table(ref, later)
    expected = np.zeros((4, 4), int)
    expected[0, 0] = 1
    expected[1, 0] = 1
    expected[2, 3] = 1
    expected[3, 1] = 1
    assert np.array_equal(tab.counts, expected)
    assert tab.mixed_fraction == 0.25
    assert SIGN_CLASSES == ("K+Q+", "K+Q-", "K-Q+", "K-Q-")


def test_sign_table_zero_is_its_own_class():
    ref = _snap(q_xi=[[1, 0]], k_xi=[[1, 1]])
    tab = sign_table(ref, ref)
    assert tab.degenerate == 1 and tab.counts.sum() == 1 and tab.total == 2


def test_beta_stats_examples():
    ds, _, _ = small_problem()
    z = beta_stats(zero_params(ds.config.d, 2, 2), ds)
    assert z.beta_xi == 0 and z.beta_mu == 0
    X = np.array([[1.0, 0.0], [0.0, -2.0]])
    one = Dataset(DataConfig(d=2, s=1, n=1), (Sample(X=X, y=1, signal_positions=(0,), noise_supports=((1,),)),))
    p = Params(np.array([[0.3, 0.5]]), np.array([[-0.7, 0.1]]), np.array([[0.2, -0.4]]), np.array([[0.0, 0.05]]))
    b = beta_stats(p, one)
    assert b.beta_mu == 0.7  # max(|0.3|, |-0.7|, |0.2|, |0.0|)
    assert b.beta_xi == 1.0  # max(|0.5*-2|, |0.1*-2|, |-0.4*-2|, |0.05*-2|)


def test_row_a_beta_mu_bound():
    ok = 0
    bound = math.sqrt(2 * math.log(12 * 100 / 0.01)) * 0.1 / math.sqrt(2000)
    ds = generate_dataset(DataConfig.row_a(seed=0))
    for seed in range(100):
        ok += beta_stats(init_params(ModelConfig.row_a(init_seed=seed)), ds).beta_mu <= bound
    assert ok >= 99


def test_alignment_at_random_init(row_a_data, row_a_params):
    a = alignment_fraction(snapshot(row_a_params, row_a_data, 0))
    trials = 2000
    assert abs(a.qk_noise - 0.5) <= 3 * math.sqrt(0.25 / trials)


def test_row_a_alignment_after_ten_steps(row_a_data, row_a_params):
    res = run_training(row_a_params, row_a_data, OptimizerSpec(eta=1e-4), 10, 10, make_probe())
    assert alignment_fraction(res.trace[-1]).qk_noise >= 0.95


def test_audit_skips_non_signgd():
    rep = increment_audit([], 1e-4, np.ones(2), optimizer="gd")
    assert rep.skipped and not rep.ok


def test_audit_flags_corrupted_step():
    ds, p, _ = disjoint_problem()
    res = run_training(p, ds, OptimizerSpec(eta=1e-4), 12, 1, make_probe())
    trace = list(res.trace)
    q = trace[7].q_xi.copy()
    q[1, 2] += 3e-5
    trace[7] = replace(trace[7], q_xi=q)
    rep = increment_audit(trace, 1e-4, xi_l1_norms(ds))
    flagged = {(f.t, f.quantity, f.index) for f in rep.flags}
    assert (7, "q_xi", (1, 2)) in flagged
    assert {f.t for f in rep.flags} <= {7, 8}


def test_snapshot_l_greater_than_two():
    ds, p, _ = small_problem(L=6, d=80, s=5, n=4, sigma_0=2.0)
    s = snapshot(p, ds, 0)
    c = forward(p, ds)
    for i in range(len(ds)):
        sig = ds.signal_index[i]
        expected = max(c.S[i, l, sig] for l in ds.noise_index[i])
        assert s.s21[i] == expected
        assert s.attn_argmax[i] == int(np.argmax(c.S[i, sig]))


# --- properties --------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_snapshot_purity_and_determinism(seed):
    ds, p, _ = small_problem(seed=seed)
    before = [w.copy() for w in p]
    X_before = ds.X.copy()
    a, b = snapshot(p, ds, 3), snapshot(p, ds, 3)
    assert a == b
    assert all(np.array_equal(x, y) for x, y in zip(before, p))
    assert np.array_equal(X_before, ds.X)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_s12_complement(seed):
    ds, p, _ = small_problem(seed=seed, sigma_0=1.0)
    s, c = snapshot(p, ds, 0), forward(p, ds)
    for i in range(len(ds)):
        sig, noi = ds.signal_index[i], ds.noise_index[i, 0]
        assert abs((1 - s.s11[i]) - c.S[i, sig, noi]) <= 1e-12
    # large logits saturate float64 softmax to exactly 0 or 1
    assert np.all((s.s11 >= 0) & (s.s11 <= 1) & (s.s21 >= 0) & (s.s21 <= 1))
    assert np.all((s.loss_deriv >= 0) & (s.loss_deriv <= 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_sign_table_marginals(seed, m_k, n):
    rng = np.random.default_rng(seed)
    a = _snap(rng.standard_normal((m_k, n)), rng.standard_normal((m_k, n)))
    b = _snap(rng.standard_normal((m_k, n)), rng.standard_normal((m_k, n)), t=1)
    tab = sign_table(a, b)
    ref_classes = sign_table(a, a).column_totals
    assert np.array_equal(tab.row_totals, ref_classes)
    assert tab.total == m_k * n and np.all(tab.counts >= 0)


def test_jsonl_and_csv_round_trip(small):
    ds, p, _ = small
    res = run_training(p, ds, OptimizerSpec(eta=1e-2), 3, 1, make_probe())
    buf = io.StringIO()
    write_jsonl(res.trace, buf)
    back = read_jsonl(buf.getvalue().splitlines())
    assert back == res.trace
    out = io.StringIO()
    write_csv(res.trace[:1], out)
    rows = out.getvalue().splitlines()
    assert rows[0] == "t,quantity,index,value"
    assert any(r.startswith("0,q_xi,1;2,") for r in rows)
