"""Predicted stage times, transition detectors and stage/convergence verdicts.

Everything here reads probe traces (lists of :class:`ProbeSnapshot` ordered
by ``t``) and never touches raw parameters, except
:func:`verify_generalization`, which needs the final weights to draw fresh
test samples.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datagen import DataConfig
from .probes import BetaStats, ProbeSnapshot, alignment_fraction, sign_table
from .transformer import ModelConfig, Params, test_loss as mc_test_loss

PASS, FAIL, INCONCLUSIVE, NOT_APPLICABLE = "pass", "fail", "inconclusive", "not-applicable"


class RegimeError(ValueError):
    """The configuration is outside the low signal-to-noise regime the stage times assume."""


class TraceOrderError(ValueError):
    """Snapshot times are not strictly increasing."""


# ---------------------------------------------------------------------------
# predicted times


@dataclass(frozen=True)
class PredictedTimes:
    T1: float
    T2_prime: float
    T2_sgn: float
    T2: float
    T3: float
    T4_minus_lo: float
    T4_minus_hi: float
    T4: float
    constants_used: dict = field(default_factory=dict)
    vacuous: tuple = ()  # bounds whose log argument was <= 1 and were set to 0

    @property
    def ordering(self) -> tuple[float, ...]:
        return (self.T1, self.T2_sgn, self.T2, self.T3, self.T4_minus_lo, self.T4_minus_hi, self.T4)

    @property
    def monotone(self) -> bool:
        """``T1 < T2_sgn <= T2 < T3 < T4_minus_lo <= T4_minus_hi < T4``."""
        T1, T2s, T2, T3, lo, hi, T4 = self.ordering
        return T1 < T2s <= T2 < T3 < lo <= hi < T4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vacuous"] = list(self.vacuous)
        d["monotone"] = self.monotone
        return d


def predicted_times(
    data: DataConfig,
    model: ModelConfig,
    eta: float,
    beta: BetaStats,
    C3: float = 1.0,
    theta_c: float = 0.1,
    delta: float = 0.01,
    mu_norm: float = 1.0,
) -> PredictedTimes:
    """Closed-form stage times (in iterations) from the run constants and measured betas.

    Raises :class:`RegimeError` when ``sigma_p * s`` does not exceed ``||mu||``
    (or ``||mu|| / C3``), since the Stage IV logarithms are then non-positive.
    The lower bound on ``T4^-`` carries an extra ``3 sqrt(2) n`` in its log; if
    that argument is <= 1 the bound is vacuous and is reported as 0.
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    sps = data.sigma_p * data.s
    if sps / mu_norm <= 1.0:
        raise RegimeError(
            f"sigma_p*s = {sps:.6g} <= ||mu|| = {mu_norm:.6g}: noise does not dominate the signal, "
            "Stage IV times are undefined"
        )
    if C3 * sps / mu_norm <= 1.0:
        raise RegimeError(f"C3*sigma_p*s/||mu|| = {C3 * sps / mu_norm:.6g} <= 1: T4 is undefined for C3={C3}")
    base = 1.0 / (eta * sps)
    stage4 = base / math.sqrt(model.m_k)
    T2_prime = math.sqrt(2) * beta.beta_xi * base
    vacuous = []
    lo_arg = sps / (3 * math.sqrt(2) * data.n * mu_norm)
    if lo_arg <= 1.0:
        vacuous.append("T4_minus_lo")
        T4_lo = 0.0
    else:
        T4_lo = math.sqrt(0.99 * math.pi / 2) * math.sqrt(math.log(lo_arg)) * stage4
    return PredictedTimes(
        T1=4 * beta.beta_xi / math.sqrt(model.m_v) * base,
        T2_prime=T2_prime,
        T2_sgn=3 * T2_prime,
        T2=50 * math.sqrt(2) * data.n * beta.beta_xi * base,
        T3=3 * beta.beta_mu / (eta * mu_norm),
        T4_minus_lo=T4_lo,
        T4_minus_hi=math.sqrt(1.01 * math.pi / 2) * math.sqrt(math.log(sps / mu_norm)) * stage4,
        T4=C3 * math.log(C3 * sps / mu_norm) * stage4,
        constants_used={"C3": C3, "theta_c": theta_c, "delta": delta, "mu_norm": mu_norm},
        vacuous=tuple(vacuous),
    )


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    n: int


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Least-squares line with coefficient of determination (``r2 = 1`` for exact data)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two points for a fit")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("x values are all equal")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - (intercept + slope * x)) ** 2)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), float(r2), int(x.size))


# ---------------------------------------------------------------------------
# trace helpers


def check_order(trace: Sequence[ProbeSnapshot]) -> None:
    ts = [s.t for s in trace]
    for a, b in zip(ts, ts[1:]):
        if not b > a:
            raise TraceOrderError(f"snapshot times not strictly increasing: {a} then {b}")


def at_or_after(trace: Sequence[ProbeSnapshot], t: float) -> ProbeSnapshot | None:
    for s in trace:
        if s.t >= t:
            return s
    return None


def at_time(trace: Sequence[ProbeSnapshot], t: float) -> ProbeSnapshot | None:
    for s in trace:
        if s.t == t:
            return s
    return None


def window(trace: Sequence[ProbeSnapshot], lo: float, hi: float) -> list[ProbeSnapshot]:
    return [s for s in trace if lo <= s.t <= hi]


# ---------------------------------------------------------------------------
# transition detection


@dataclass(frozen=True)
class Transitions:
    t_stage1_end: float | None
    t_qk_aligned: float | None
    t_signal_departure: float | None
    t_s21_decayed: float | None
    t_key_flip: float | None
    t_query_flip: float | None
    t_final_aligned: float | None
    t_key_flip_first: float | None = None
    t_query_flip_first: float | None = None
    t_key_flip_last: float | None = None
    t_query_flip_last: float | None = None
    flip_reference: float | None = None
    flip_pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _first(trace, pred) -> float | None:
    for s in trace:
        if pred(s):
            return s.t
    return None


def stage1_end(trace: Sequence[ProbeSnapshot], eta: float, xi_l1: np.ndarray, rtol: float = 0.01) -> float | None:
    """First t with every ``v_xi > 0`` and the last per-step growth of each ``v_xi`` within ``rtol`` of ``2 eta ||xi_i||_1``.

    The growth rate is measured between consecutive snapshots of the same
    segment and expressed per unit of (main-run) time.
    """
    target = 2 * eta * np.asarray(xi_l1)
    for a, b in zip(trace, trace[1:]):
        if a.segment != b.segment or not np.all(b.v_xi > 0):
            continue
        rate = (b.v_xi - a.v_xi) / (b.t - a.t)
        if np.all(np.abs(rate - target) <= rtol * target):
            return b.t
    return None


def flip_times(
    trace: Sequence[ProbeSnapshot], quantity: str, reference: float
) -> tuple[np.ndarray, int]:
    """Zero-crossing time of every pair whose sign opposes its neuron's query signal at ``reference``.

    Returns crossing times (``inf`` for pairs that never cross inside the
    trace) and the number of such pairs.
    """
    ref = at_or_after(trace, reference)
    if ref is None:
        return np.array([]), 0
    target = np.sign(ref.q_mu)[:, None]
    vals = getattr(ref, quantity)
    opposite = (np.sign(vals) == -target) & (target != 0)
    times = np.full(vals.shape, np.inf)
    pending = opposite.copy()
    for s in trace:
        if s.t <= ref.t or not pending.any():
            continue
        crossed = pending & (np.sign(getattr(s, quantity)) == target)
        times[crossed] = s.t
        pending &= ~crossed
    return times[opposite], int(opposite.sum())


def _quantile_time(times: np.ndarray, q: float) -> float | None:
    if times.size == 0:
        return None
    val = float(np.quantile(times, q, method="lower")) if q > 0 else float(times.min())
    return None if math.isinf(val) else val


def detect_transitions(
    trace: Sequence[ProbeSnapshot],
    eta: float,
    xi_l1: np.ndarray,
    mu_norm: float = 1.0,
    s21_threshold: float = 0.05,
    flip_reference: float = 40.0,
    flip_quantile: float = 0.5,
) -> Transitions:
    """Empirical stage transitions; absent events are ``None``.

    Flip times summarise, over all (s, i) pairs whose key (query) noise has the
    opposite sign of the neuron's query signal at ``flip_reference``, the
    ``flip_quantile`` quantile of their zero-crossing times. The first and last
    crossings are reported alongside.
    """
    check_order(trace)
    if not trace:
        return Transitions(*([None] * 7))
    q0 = trace[0].q_mu
    keys, n_pairs = flip_times(trace, "k_xi", flip_reference)
    queries, _ = flip_times(trace, "q_xi", flip_reference)
    return Transitions(
        t_stage1_end=stage1_end(trace, eta, xi_l1),
        t_qk_aligned=_first(trace, lambda s: alignment_fraction(s).qk_noise == 1.0),
        t_signal_departure=_first(trace, lambda s: np.min(np.abs(s.q_mu - q0)) > 5 * eta * mu_norm),
        t_s21_decayed=_first(trace, lambda s: np.max(s.s21) < s21_threshold),
        t_key_flip=_quantile_time(keys, flip_quantile),
        t_query_flip=_quantile_time(queries, flip_quantile),
        t_final_aligned=_first(trace, lambda s: alignment_fraction(s).final == 1.0),
        t_key_flip_first=_quantile_time(keys, 0.0),
        t_query_flip_first=_quantile_time(queries, 0.0),
        t_key_flip_last=_quantile_time(keys, 1.0),
        t_query_flip_last=_quantile_time(queries, 1.0),
        flip_reference=flip_reference,
        flip_pairs=n_pairs,
    )


# ---------------------------------------------------------------------------
# verdicts


@dataclass
class Verdict:
    status: str
    evidence: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)  # times of the snapshots used

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self) -> dict:
        return {"status": self.status, "evidence": _jsonable(self.evidence), "snapshots": list(self.snapshots)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


def stage2_check(snap0: ProbeSnapshot, snap_t: ProbeSnapshot, mixed_max: float = 0.05, leave_max: float = 0.02) -> Verdict:
    """Sign table between ``snap0`` and ``snap_t``: little mixed-class mass, same-signed pairs stay put."""
    table = sign_table(snap0, snap_t)
    total = table.total
    # K+Q+ leaving to K- or Q-, and K-Q- leaving to K+ or Q+, as fractions of the grand total
    leave_pp = (table.counts[0].sum() - table.counts[0, 0]) / total
    leave_mm = (table.counts[3].sum() - table.counts[3, 3]) / total
    ok = table.mixed_fraction < mixed_max and leave_pp < leave_max and leave_mm < leave_max
    ev = {
        "counts": table.counts,
        "column_totals": table.column_totals,
        "degenerate": table.degenerate,
        "mixed_fraction": table.mixed_fraction,
        "leave_K+Q+": leave_pp,
        "leave_K-Q-": leave_mm,
    }
    return Verdict(_status(ok), ev, [snap0.t, snap_t.t])


def stage3_check(snap: ProbeSnapshot, band: float = 0.05) -> Verdict:
    """Majority voting and softmax concentration at one snapshot.

    For every neuron s: ``sgn q_mu = -sgn k_mu = sgn(sum_i k_xi)``; every
    ``s11`` and ``s21`` within ``1/2 +- band``.
    """
    q = np.sign(snap.q_mu)
    kneg = -np.sign(snap.k_mu)
    vote = np.sign(snap.k_xi.sum(axis=1))
    bad_qk = np.flatnonzero(q != kneg)
    bad_vote = np.flatnonzero(q != vote)
    s11_ok = bool(np.all(np.abs(snap.s11 - 0.5) <= band))
    s21_ok = bool(np.all(np.abs(snap.s21 - 0.5) <= band))
    ev = {
        "neurons_q_mu_vs_k_mu": bad_qk,
        "neurons_q_mu_vs_key_vote": bad_vote,
        "s11_range": [float(snap.s11.min()), float(snap.s11.max())],
        "s21_range": [float(snap.s21.min()), float(snap.s21.max())],
        "signs_ok": bool(bad_qk.size == 0 and bad_vote.size == 0),
        "softmax_ok": bool(s11_ok and s21_ok),
    }
    return Verdict(_status(ev["signs_ok"] and ev["softmax_ok"]), ev, [snap.t])


def s21_decay_fit(trace: Sequence[ProbeSnapshot], t_lo: float, t_hi: float) -> LinearFit | None:
    """Fit of the sample mean of ``log s21`` against ``t^2`` over ``[t_lo, t_hi]``."""
    pts = window(trace, t_lo, t_hi)
    if len(pts) < 3:
        return None
    t = np.array([s.t for s in pts])
    y = np.array([np.mean(np.log(s.s21)) for s in pts])
    return linear_fit(t**2, y)


def stage4_check(
    trace: Sequence[ProbeSnapshot],
    T_start: float,
    trans: Transitions,
    T4: float,
    r2_min: float = 0.99,
    band: float = 0.05,
    theta_c: float = 0.1,
    loss_band: tuple[float, float] = (0.2, math.log(2)),
) -> Verdict:
    t_hi = trans.t_s21_decayed
    if t_hi is None or t_hi <= T_start:
        return Verdict(INCONCLUSIVE, {"reason": f"no s21 decay window after t={T_start} (t_s21_decayed={t_hi})"})
    fit = s21_decay_fit(trace, T_start, t_hi)
    if fit is None:
        return Verdict(INCONCLUSIVE, {"reason": f"fewer than 3 snapshots in [{T_start}, {t_hi}]"})
    pts = window(trace, T_start, t_hi)
    s11_ok = all(np.all(np.abs(s.s11 - 0.5) <= band) for s in pts)
    ev = {"fit_slope": fit.slope, "fit_r2": fit.r2, "window": [T_start, t_hi], "s11_in_band": s11_ok}
    used = [pts[0].t, pts[-1].t]
    last = trace[-1]
    if trans.t_query_flip is None or last.t < (1 + theta_c) * trans.t_query_flip:
        return Verdict(INCONCLUSIVE, {**ev, "reason": "trace ends before the query-noise flip settles"}, used)
    final = alignment_fraction(last).final
    snap4 = at_or_after(trace, T4)
    loss4 = snap4.train_loss if snap4 is not None else float("nan")
    ev.update(final_alignment=final, train_loss_at_T4=loss4, t_query_flip=trans.t_query_flip)
    used += [last.t] + ([snap4.t] if snap4 is not None else [])
    ok = fit.r2 >= r2_min and fit.slope < 0 and s11_ok and final == 1.0 and loss_band[0] <= loss4 <= loss_band[1]
    return Verdict(_status(ok), ev, used)


def stage1_check(trace: Sequence[ProbeSnapshot], trans: Transitions, rel: float = 0.2) -> Verdict:
    t1 = trans.t_stage1_end
    if t1 is None:
        return Verdict(FAIL, {"reason": "no snapshot shows every v_xi growing at the Stage I rate"})
    s0, s1 = trace[0], at_time(trace, t1)
    ev = {
        "v_mu": s1.v_mu,
        "min_v_xi": float(s1.v_xi.min()),
        "q_xi_max_rel_change": float(np.max(np.abs(s1.q_xi - s0.q_xi) / np.abs(s0.q_xi))),
        "k_xi_max_rel_change": float(np.max(np.abs(s1.k_xi - s0.k_xi) / np.abs(s0.k_xi))),
    }
    ok = abs(s1.v_mu) < 0.1 * ev["min_v_xi"] and ev["q_xi_max_rel_change"] <= rel and ev["k_xi_max_rel_change"] <= rel
    return Verdict(_status(ok), ev, [s0.t, s1.t])


@dataclass
class StageReport:
    predicted: PredictedTimes
    measured: Transitions
    verdicts: dict

    @property
    def status(self) -> str:
        states = [v.status for v in self.verdicts.values()]
        if any(s == FAIL for s in states):
            return FAIL
        if any(s == INCONCLUSIVE for s in states):
            return INCONCLUSIVE
        return PASS

    def to_dict(self) -> dict:
        return {
            "predicted": self.predicted.to_dict(),
            "measured": self.measured.to_dict(),
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "status": self.status,
        }

    def text(self) -> str:
        lines = ["stage     status        snapshots"]
        for name, v in self.verdicts.items():
            lines.append(f"{name:<9} {v.status:<13} {', '.join(f'{t:g}' for t in v.snapshots)}")
        lines.append("")
        lines.append("event                predicted     measured")
        pairs = [
            ("stage I end", self.predicted.T1, self.measured.t_stage1_end),
            ("q/k noise aligned", self.predicted.T2_sgn, self.measured.t_qk_aligned),
            ("signal departure", self.predicted.T3, self.measured.t_signal_departure),
            ("s21 decayed", self.predicted.T4_minus_hi, self.measured.t_s21_decayed),
            ("key noise flip", None, self.measured.t_key_flip),
            ("query noise flip", None, self.measured.t_query_flip),
            ("final alignment", self.predicted.T4, self.measured.t_final_aligned),
        ]
        for label, p, m in pairs:
            ps = "-" if p is None else f"{p:.4g}"
            ms = "absent" if m is None else f"{m:g}"
            lines.append(f"{label:<20} {ps:<13} {ms}")
        return "\n".join(lines)


def verify_stage_predicates(
    trace: Sequence[ProbeSnapshot],
    predicted: PredictedTimes,
    eta: float,
    xi_l1: np.ndarray,
    mu_norm: float = 1.0,
    stage_times: dict | None = None,
    flip_reference: float | None = None,
) -> StageReport:
    """Evaluate the four stage predicates on a SignGD trace.

    ``stage_times`` may override the times at which Stage II (``"T2_sgn"``)
    and Stage III (``"T3"``) are checked; by default the predicted times are
    used, rounded to the nearest iteration.
    """
    try:
        check_order(trace)
    except TraceOrderError as exc:
        v = Verdict(INCONCLUSIVE, {"reason": str(exc)})
        empty = Transitions(*([None] * 7))
        return StageReport(predicted, empty, {f"stage{k}": v for k in ("I", "II", "III", "IV")})
    times = {"T2_sgn": round(predicted.T2_sgn), "T3": round(predicted.T3)}
    times.update(stage_times or {})
    theta_c = predicted.constants_used.get("theta_c", 0.1)
    ref = times["T3"] if flip_reference is None else flip_reference
    trans = detect_transitions(trace, eta, xi_l1, mu_norm, flip_reference=ref)
    verdicts = {"stageI": stage1_check(trace, trans)}
    snap2 = at_or_after(trace, times["T2_sgn"])
    verdicts["stageII"] = (
        Verdict(INCONCLUSIVE, {"reason": f"no snapshot at or after t={times['T2_sgn']}"})
        if snap2 is None
        else stage2_check(trace[0], snap2)
    )
    snap3 = at_or_after(trace, times["T3"])
    verdicts["stageIII"] = (
        Verdict(INCONCLUSIVE, {"reason": f"no snapshot at or after t={times['T3']}"})
        if snap3 is None
        else stage3_check(snap3)
    )
    verdicts["stageIV"] = stage4_check(trace, times["T3"], trans, predicted.T4, theta_c=theta_c)
    return StageReport(predicted, trans, verdicts)


def convergence_time(epsilon: float, eta: float, sigma_p: float, s: int) -> int:
    """``ceil(2 log(1/eps) / (eta sigma_p s))``."""
    return max(0, math.ceil(2 * math.log(1 / epsilon) / (eta * sigma_p * s)))


def verify_convergence(
    trace: Sequence[ProbeSnapshot],
    epsilon: float,
    eta: float,
    sigma_p: float,
    s: int,
    T4: float | None = None,
    r2_min: float = 0.99,
) -> Verdict:
    """Training loss reaches ``epsilon`` no later than the predicted time, and decays log-linearly after ``T4``.

    If the trace ends before the predicted time but the loss is already below
    ``epsilon`` (and stays there), the hitting-time bound is satisfied.
    """
    T = convergence_time(epsilon, eta, sigma_p, s)
    losses = np.array([sn.train_loss for sn in trace])
    ts = np.array([sn.t for sn in trace])
    below = losses <= epsilon
    hit = next((float(t) for t, b in zip(ts, below) if b), None)
    ev = {"T_predicted": T, "t_hit": hit, "final_loss": float(losses[-1]), "final_t": float(ts[-1])}
    if hit is None or hit > T:
        if ts[-1] < T:
            ev["reason"] = "budget exhausted before the predicted time"
        return Verdict(FAIL, ev, [float(ts[-1])])
    stays = bool(np.all(below[ts >= hit]))
    ev["stays_below"] = stays
    ok = stays
    if T4 is not None:
        mask = ts >= T4
        if mask.sum() >= 3:
            fit = linear_fit(ts[mask], np.log(losses[mask]))
            ev.update(post_T4_slope=fit.slope, post_T4_r2=fit.r2, T4=T4)
            ok = ok and fit.r2 >= r2_min and fit.slope < 0
        else:
            ev["reason"] = "fewer than 3 snapshots after T4"
            return Verdict(INCONCLUSIVE, ev, [hit])
    return Verdict(_status(ok), ev, [hit, float(ts[-1])])


def verify_generalization(
    params: Params,
    config: DataConfig,
    n_test: int = 500,
    seed: int | None = None,
    head: np.ndarray | None = None,
    threshold: float = 0.1,
) -> Verdict:
    res = mc_test_loss(params, config, n_test, seed, head)
    return generalization_verdict(res["logistic"], res["zero_one"], n_test, threshold)


def generalization_verdict(logistic: float, zero_one: float, n_test: int, threshold: float = 0.1) -> Verdict:
    ev = {"logistic": logistic, "zero_one": zero_one, "n_test": n_test, "threshold": threshold}
    return Verdict(_status(logistic >= threshold), ev)


def verify_attention_sparsity(trace: Sequence[ProbeSnapshot], threshold: float = 0.1) -> Verdict:
    """Some snapshot has every ``s11`` and every ``s21`` below ``threshold``."""
    best = math.inf
    for s in trace:
        worst = max(float(s.s11.max()), float(s.s21.max()))
        if worst < threshold:
            return Verdict(PASS, {"max_s11": float(s.s11.max()), "max_s21": float(s.s21.max())}, [s.t])
        best = min(best, worst)
    return Verdict(FAIL, {"min_attained": best})


def argmax_on_noise(snap: ProbeSnapshot, noise_index: np.ndarray) -> bool:
    """For L > 2: whether each sample's most-attended key patch (from its signal query) is a noise patch."""
    return bool(all(a in row for a, row in zip(snap.attn_argmax, noise_index)))


# ---------------------------------------------------------------------------
# cross-seed statistic


@dataclass(frozen=True)
class BinomialCheck:
    successes: int
    trials: int
    fraction: float
    stderr: float
    z: float
    passed: bool


def opposite_pair_resolution(snap0: ProbeSnapshot, snap_t: ProbeSnapshot) -> tuple[int, int]:
    """Among pairs with opposite query/key noise signs at ``snap0``: (#positive query noise at ``snap_t``, #pairs)."""
    q0, k0 = np.sign(snap0.q_xi), np.sign(snap0.k_xi)
    opposite = (q0 * k0) < 0
    plus = opposite & (np.sign(snap_t.q_xi) > 0)
    return int(plus.sum()), int(opposite.sum())


def binomial_half_test(successes: int, trials: int, n_se: float = 3.0) -> BinomialCheck:
    """Is ``successes / trials`` within ``n_se`` binomial standard errors of 1/2?"""
    if trials < 1:
        raise ValueError("no trials")
    frac = successes / trials
    se = math.sqrt(0.25 / trials)
    z = (frac - 0.5) / se
    return BinomialCheck(successes, trials, frac, se, z, abs(z) <= n_se)
