import math
import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signgd_attn.datagen import DataConfig, generate_dataset
from signgd_attn.optim import OptimizerSpec, run_training
from signgd_attn.probes import BetaStats, ProbeSnapshot, beta_stats, make_probe, xi_l1_norms
from signgd_attn.theory import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    RegimeError,
    argmax_on_noise,
    binomial_half_test,
    convergence_time,
    detect_transitions,
    linear_fit,
    opposite_pair_resolution,
    predicted_times,
    s21_decay_fit,
    stage2_check,
    stage3_check,
    verify_attention_sparsity,
    verify_convergence,
    verify_generalization,
    verify_stage_predicates,
)
from signgd_attn.transformer import ModelConfig, Params, init_params, zero_params


ROW_A_DATA = DataConfig.row_a()
ROW_A_MODEL = ModelConfig.row_a()


def _snap(t, n=3, m_k=2, **kw):
    base = dict(
        t=float(t),
        q_mu=np.ones(m_k),
        k_mu=-np.ones(m_k),
        q_xi=np.ones((m_k, n)),
        k_xi=np.ones((m_k, n)),
        v_mu=0.0,
        v_xi=np.zeros(n),
        s11=np.full(n, 0.5),
        s21=np.full(n, 0.5),
        loss_deriv=np.full(n, 0.5),
        train_loss=math.log(2),
        step=int(t),
    )
    base.update(kw)
    return ProbeSnapshot(**base)


# --- predicted times ---------------------------------------------------------


def test_row_a_times_match_hand_formulas(row_a_data, row_a_params):
    beta = beta_stats(row_a_params, row_a_data)
    pt = predicted_times(ROW_A_DATA, ROW_A_MODEL, 1e-4, beta)
    sps = ROW_A_DATA.sigma_p * ROW_A_DATA.s  # 2 sqrt(80)
    bx, bm = beta.beta_xi, beta.beta_mu
    assert pt.T1 == pytest.approx(4 * bx / math.sqrt(20) / (1e-4 * sps), rel=1e-14)
    assert pt.T2_prime == pytest.approx(math.sqrt(2) * bx / (1e-4 * sps), rel=1e-14)
    assert pt.T2_sgn == pytest.approx(3 * pt.T2_prime, rel=1e-15)
    assert pt.T2 == pytest.approx(50 * math.sqrt(2) * 20 * bx / (1e-4 * sps), rel=1e-14)
    assert pt.T3 == pytest.approx(3 * bm / 1e-4, rel=1e-14)
    stage4 = 1 / (1e-4 * math.sqrt(100) * sps)
    assert pt.T4_minus_hi == pytest.approx(math.sqrt(1.01 * math.pi / 2 * math.log(sps)) * stage4, rel=1e-14)
    assert pt.T4 == pytest.approx(math.log(sps) * stage4, rel=1e-14)
    # sigma_p s / (3 sqrt(2) n) = 0.21 < 1: the lower T4^- bound is vacuous here
    assert pt.vacuous == ("T4_minus_lo",) and pt.T4_minus_lo == 0.0
    # measured on seed 0: T2 (~1.6e4) exceeds T3 (~204), so the chain is not monotone
    assert pt.T1 < pt.T2_sgn <= pt.T2 and pt.T2 > pt.T3
    assert not pt.monotone


@pytest.mark.parametrize("c", [2.0, 0.5, 4.0, 0.125])
def test_homogeneous_in_eta(c):
    beta = BetaStats(0.0123, 0.00456)
    a = predicted_times(ROW_A_DATA, ROW_A_MODEL, 1e-4, beta)
    b = predicted_times(ROW_A_DATA, ROW_A_MODEL, c * 1e-4, beta)
    for x, y in zip(a.ordering, b.ordering):
        assert y == x / c


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e-1), st.floats(0.1, 10.0))
def test_homogeneous_in_eta_general(eta, c):
    beta = BetaStats(0.0123, 0.00456)
    a = predicted_times(ROW_A_DATA, ROW_A_MODEL, eta, beta)
    b = predicted_times(ROW_A_DATA, ROW_A_MODEL, c * eta, beta)
    for x, y in zip(a.ordering, b.ordering):
        assert y == pytest.approx(x / c, rel=1e-13)


def test_regime_error_for_high_snr():
    data = DataConfig(d=200, s=4, n=10, sigma_p=0.1)  # sigma_p s = 0.4 < ||mu|| n
    with pytest.raises(RegimeError, match="sigma_p"):
        predicted_times(data, ModelConfig(d=200, m_k=5, m_v=2), 1e-4, BetaStats(1e-3, 1e-3))


def test_constants_recorded():
    pt = predicted_times(ROW_A_DATA, ROW_A_MODEL, 1e-4, BetaStats(0.01, 0.01), C3=2.0, theta_c=0.2, delta=0.05)
    assert pt.constants_used == {"C3": 2.0, "theta_c": 0.2, "delta": 0.05, "mu_norm": 1.0}


# --- regression --------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-6, 1e-3))
def test_linear_fit_recovers_exact_decay(a, b):
    t = np.arange(40, 200, 2.0)
    fit = linear_fit(t**2, a - b * t**2)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert abs(-fit.slope - b) <= 1e-9


def test_s21_fit_on_synthetic_trace():
    ts = np.arange(0, 101, 5.0)
    trace = [_snap(t, s21=np.full(3, math.exp(-0.7 - 2e-4 * t * t))) for t in ts]
    fit = s21_decay_fit(trace, 20, 100)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12) and abs(fit.slope + 2e-4) <= 1e-9


# --- transitions -------------------------------------------------------------


def _planted_trace():
    trace = []
    for t in range(15):
        k = np.ones((2, 3))
        k[1, 2] = -1.0 if t < 7 else 0.5  # the one opposite pair crosses at t = 7
        trace.append(_snap(t, k_xi=k, q_xi=np.ones((2, 3))))
    return trace


def test_planted_flip_detected_at_seven():
    tr = detect_transitions(_planted_trace(), 1e-4, np.ones(3), flip_reference=0)
    assert tr.t_key_flip == 7 and tr.t_key_flip_first == 7 and tr.flip_pairs == 1
    assert tr.t_query_flip is None  # no query pair was opposite


def test_absent_events_are_none():
    trace = [_snap(t) for t in range(5)]
    tr = detect_transitions(trace, 1e-4, np.ones(3))
    assert tr.t_s21_decayed is None and tr.t_key_flip is None and tr.t_stage1_end is None


def test_detector_idempotent():
    a = detect_transitions(_planted_trace(), 1e-4, np.ones(3), flip_reference=0)
    b = detect_transitions(_planted_trace(), 1e-4, np.ones(3), flip_reference=0)
    assert a == b


def test_shuffled_trace_is_inconclusive():
    trace = _planted_trace()
    random.Random(0).shuffle(trace)
    pt = predicted_times(ROW_A_DATA, ROW_A_MODEL, 1e-4, BetaStats(0.01, 0.01))
    rep = verify_stage_predicates(trace, pt, 1e-4, np.ones(3))
    assert rep.status == INCONCLUSIVE
    assert all(v.status == INCONCLUSIVE for v in rep.verdicts.values())


def test_stage1_end_on_disjoint_supports():
    from conftest import disjoint_problem

    ds, p, _ = disjoint_problem()
    res = run_training(p, ds, OptimizerSpec(eta=1e-4), 10, 1, make_probe())
    tr = detect_transitions(res.trace, 1e-4, xi_l1_norms(ds))
    assert tr.t_stage1_end is not None and tr.t_stage1_end <= 5


# --- stage checks ------------------------------------------------------------


def test_stage2_check_hand_table():
    q0 = np.array([[1.0, -1.0, 1.0, -1.0]])
    k0 = np.array([[1.0, 1.0, -1.0, -1.0]])
    aligned = stage2_check(_snap(0, n=4, m_k=1, q_xi=q0, k_xi=k0), _snap(10, n=4, m_k=1, q_xi=k0, k_xi=k0))
    assert aligned.status == PASS and aligned.evidence["mixed_fraction"] == 0.0
    mixed = stage2_check(_snap(0, n=4, m_k=1, q_xi=q0, k_xi=k0), _snap(10, n=4, m_k=1, q_xi=q0, k_xi=k0))
    assert mixed.status == FAIL and mixed.evidence["mixed_fraction"] == 0.5
    assert mixed.snapshots == [0.0, 10.0]


def test_stage3_check_signs_and_band():
    k_xi = np.array([[1.0, 2.0, -0.5], [-1.0, -2.0, 0.5]])
    good = _snap(40, q_mu=np.array([1.0, -1.0]), k_mu=np.array([-1.0, 1.0]), k_xi=k_xi)
    assert stage3_check(good).status == PASS
    wrong_vote = replace(good, k_xi=-k_xi)
    assert stage3_check(wrong_vote).evidence["signs_ok"] is False
    off_band = replace(good, s21=np.array([0.5, 0.5, 0.44]))
    v = stage3_check(off_band)
    assert v.status == FAIL and v.evidence["signs_ok"] and not v.evidence["softmax_ok"]


def test_stage4_inconclusive_when_trace_too_short():
    trace = [_snap(t) for t in range(31)]
    pt = predicted_times(ROW_A_DATA, ROW_A_MODEL, 1e-4, BetaStats(0.005, 0.0005))
    rep = verify_stage_predicates(trace, pt, 1e-4, np.ones(3), stage_times={"T2_sgn": 10, "T3": 20})
    assert rep.verdicts["stageIV"].status == INCONCLUSIVE


# --- convergence, generalization, sparsity -----------------------------------


def test_convergence_time_formula():
    assert convergence_time(0.01, 1e-4, 2 / math.sqrt(80), 80) == math.ceil(2 * math.log(100) / (1e-4 * 2 * math.sqrt(80)))
    assert convergence_time(1.0, 1e-4, 1.0, 10) == 0


def test_convergence_epsilon_one_trivial():
    v = verify_convergence([_snap(0), _snap(1)], 1.0, 1e-4, 1.0, 10)
    assert v.status == PASS and v.evidence["t_hit"] == 0


def test_convergence_budget_exhausted_reports_loss():
    v = verify_convergence([_snap(0), _snap(10)], 0.01, 1e-4, 1.0, 10)
    assert v.status == FAIL
    assert v.evidence["final_loss"] == pytest.approx(math.log(2))
    assert "budget" in v.evidence["reason"]


def test_generalization_zero_params_is_ln2():
    v = verify_generalization(zero_params(30, 2, 2), DataConfig(d=30, s=3, n=4))
    assert v.evidence["logistic"] == pytest.approx(math.log(2), rel=1e-15, abs=0)
    assert v.evidence["zero_one"] == 1.0 and v.status == PASS


def test_frozen_query_key_never_sparse(small):
    ds, p, _ = small
    frozen = Params(np.zeros_like(p.W_Q), np.zeros_like(p.W_K), p.W_V_pos, p.W_V_neg)
    res = run_training(frozen, ds, OptimizerSpec(eta=1e-2), 50, 5, make_probe())
    assert not res.params.W_Q.any() and not res.params.W_K.any()
    v = verify_attention_sparsity(res.trace)
    assert v.status == FAIL and v.evidence["min_attained"] == 0.5


def test_long_context_attends_to_noise():
    data = DataConfig(d=400, n=4, s=16, L=10, sigma_p=0.5, seed=0)
    ds = generate_dataset(data)
    p = init_params(ModelConfig(d=400, m_k=20, m_v=4, L=10, sigma_0=0.005))
    res = run_training(p, ds, OptimizerSpec(eta=1e-3), 300, 100, make_probe())
    last = res.trace[-1]
    assert argmax_on_noise(last, ds.noise_index)
    assert verify_attention_sparsity(res.trace).status == PASS


# --- cross-seed statistic ----------------------------------------------------


def test_opposite_pair_resolution_hand_case():
    s0 = _snap(0, n=2, m_k=2, q_xi=np.array([[1.0, -1.0], [1.0, 1.0]]), k_xi=np.array([[-1.0, 1.0], [1.0, 1.0]]))
    st_ = _snap(47, n=2, m_k=2, q_xi=np.array([[2.0, -3.0], [1.0, 1.0]]), k_xi=np.ones((2, 2)))
    assert opposite_pair_resolution(s0, st_) == (1, 2)


def test_binomial_half_test():
    assert binomial_half_test(50, 100).passed
    ok = binomial_half_test(515, 1000)  # z = 0.95
    assert ok.passed and ok.z == pytest.approx(0.9486832980505138)
    assert not binomial_half_test(600, 1000).passed
    with pytest.raises(ValueError):
        binomial_half_test(0, 0)
