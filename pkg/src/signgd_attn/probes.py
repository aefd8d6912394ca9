"""Theory-level observables of a run: inner products, softmax outputs, sign statistics.

Noise inner products are taken against ``y_i * xi_i`` where ``xi_i`` is the
first noise patch of sample ``i``. Patch roles (signal vs noise) come from the
bookkeeping stored on each sample, never from the values themselves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import Dataset, noise_norm_stats
from .transformer import ForwardCache, Params, forward, readout

SIGN_CLASSES = ("K+Q+", "K+Q-", "K-Q+", "K-Q-")

_ARRAY_FIELDS = ("q_mu", "k_mu", "q_xi", "k_xi", "v_xi", "s11", "s21", "loss_deriv", "attn_argmax")


@dataclass(frozen=True, eq=False)
class ProbeSnapshot:
    t: float
    q_mu: np.ndarray  # (m_k,)
    k_mu: np.ndarray  # (m_k,)
    q_xi: np.ndarray  # (m_k, n)  <w_Q,s, y_i xi_i>
    k_xi: np.ndarray  # (m_k, n)
    v_mu: float
    v_xi: np.ndarray  # (n,)
    s11: np.ndarray  # (n,)
    s21: np.ndarray  # (n,)  max over noise query patches when L > 2
    loss_deriv: np.ndarray  # (n,)  -l'
    train_loss: float
    test_loss: float | None = None
    attn_argmax: np.ndarray | None = None  # (n,) argmax_a S[signal, a]
    segment: str = "main"
    step: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbeSnapshot):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, np.ndarray):
                val = val.tolist()
            elif isinstance(val, np.generic):
                val = val.item()
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, rec: dict) -> "ProbeSnapshot":
        kw = dict(rec)
        for name in _ARRAY_FIELDS:
            if kw.get(name) is not None:
                dtype = np.int64 if name == "attn_argmax" else np.float64
                kw[name] = _frozen(np.asarray(kw[name], dtype=dtype))
        return cls(**kw)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


def snapshot(
    params: Params,
    dataset: Dataset,
    t: float,
    caches: ForwardCache | None = None,
    head: np.ndarray | None = None,
    test_loss: float | None = None,
    segment: str = "main",
    step: int | None = None,
) -> ProbeSnapshot:
    """Collect every probe quantity at one iteration (pure; params and data untouched)."""
    if caches is None:
        caches = forward(params, dataset, head)
    yxi = dataset.noise * dataset.y[:, None]  # (n, d)
    v = readout(params, head)
    rows = np.arange(len(dataset))
    sig = dataset.signal_index
    S = caches.S
    s11 = S[rows, sig, sig]
    # noise query patches attending to the signal key patch
    s21_all = S[rows[:, None], dataset.noise_index, sig[:, None]]
    return ProbeSnapshot(
        t=t,
        q_mu=_frozen(params.W_Q[:, 0]),
        k_mu=_frozen(params.W_K[:, 0]),
        q_xi=_frozen(params.W_Q @ yxi.T),
        k_xi=_frozen(params.W_K @ yxi.T),
        v_mu=float(v[0]),
        v_xi=_frozen(yxi @ v),
        s11=_frozen(s11),
        s21=_frozen(s21_all.max(axis=1)),
        loss_deriv=_frozen(caches.loss_deriv),
        train_loss=float(caches.loss.mean()),
        test_loss=test_loss,
        attn_argmax=_frozen(S[rows, sig].argmax(axis=1).astype(np.int64)),
        segment=segment,
        step=int(t) if step is None else step,
    )


def make_probe(
    test_set: Dataset | None = None,
    test_every: int = 0,
    zoom: int = 1,
    segment: str = "main",
    final_step: int | None = None,
) -> Callable:
    """Probe callback for :func:`optim.run_training`.

    ``t`` in snapshots is ``step / zoom`` so a zoomed segment (learning rate
    divided by ``zoom``) lands on the main run's time axis. Test loss is
    evaluated on ``test_set`` every ``test_every`` steps and at ``final_step``.
    """

    def probe(params, dataset, step, caches, head):
        tl = None
        due = test_every and (step % test_every == 0 or step == final_step)
        if test_set is not None and due:
            tl = float(forward(params, test_set, head).loss.mean())
        t = step if zoom == 1 else step / zoom
        return snapshot(params, dataset, t, caches, head, test_loss=tl, segment=segment, step=step)

    return probe


# ---------------------------------------------------------------------------
# sign statistics


def _sign_class(k: np.ndarray, q: np.ndarray) -> np.ndarray:
    """0..3 for K+Q+, K+Q-, K-Q+, K-Q-; -1 if either value is exactly zero."""
    cls = np.where(k > 0, np.where(q > 0, 0, 1), np.where(q > 0, 2, 3))
    return np.where((k == 0) | (q == 0), -1, cls)


@dataclass(frozen=True)
class SignTable:
    counts: np.ndarray  # (4, 4) reference class x later class
    degenerate: int  # pairs with an exact zero at either time
    t_ref: float
    t: float

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.degenerate

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def column_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def mixed_fraction(self) -> float:
        """Mass of the (K+Q-) and (K-Q+) columns over the grand total."""
        return float(self.column_totals[1] + self.column_totals[2]) / self.total


def sign_table(snap_ref: ProbeSnapshot, snap_t: ProbeSnapshot) -> SignTable:
    if snap_ref.k_xi.shape != snap_t.k_xi.shape:
        raise ValueError(f"snapshot shapes differ: {snap_ref.k_xi.shape} vs {snap_t.k_xi.shape}")
    a = _sign_class(snap_ref.k_xi, snap_ref.q_xi).ravel()
    b = _sign_class(snap_t.k_xi, snap_t.q_xi).ravel()
    ok = (a >= 0) & (b >= 0)
    counts = np.zeros((4, 4), dtype=np.int64)
    np.add.at(counts, (a[ok], b[ok]), 1)
    return SignTable(counts, int((~ok).sum()), snap_ref.t, snap_t.t)


@dataclass(frozen=True)
class BetaStats:
    beta_xi: float
    beta_mu: float


def beta_stats(init_params: Params, dataset: Dataset) -> BetaStats:
    """Largest |initial inner product| of any query/key/value neuron with any xi_i, resp. with mu."""
    W = np.vstack(list(init_params))
    mu_ip = W[:, 0]
    rows = np.arange(len(dataset))[:, None]
    xi = dataset.X[rows, :, dataset.noise_index].reshape(-1, dataset.X.shape[1])  # every noise patch
    xi_ip = W @ xi.T
    return BetaStats(float(np.max(np.abs(xi_ip))), float(np.max(np.abs(mu_ip))))


@dataclass(frozen=True)
class Alignment:
    qk_noise: float
    final: float


def alignment_fraction(snap: ProbeSnapshot) -> Alignment:
    """Fraction of (s, i) with sgn q_xi = sgn k_xi != 0, and of those also matching sgn q_mu = -sgn k_mu."""
    q, k = np.sign(snap.q_xi), np.sign(snap.k_xi)
    qm, km = np.sign(snap.q_mu)[:, None], np.sign(snap.k_mu)[:, None]
    qk = (q == k) & (q != 0)
    final = qk & (q == qm) & (km == -qm)
    return Alignment(float(qk.mean()), float(final.mean()))


# ---------------------------------------------------------------------------
# increment audit


@dataclass(frozen=True)
class AuditFlag:
    t: float
    quantity: str
    index: tuple
    step: float
    expected: float


@dataclass
class AuditReport:
    checked: int = 0
    n_flagged: int = 0
    flags: list = field(default_factory=list)  # first ``max_flags`` offenders
    skipped: str | None = None
    windows: int = 0

    @property
    def ok(self) -> bool:
        return self.skipped is None and self.n_flagged == 0

    @property
    def conforming_fraction(self) -> float:
        return 1.0 - self.n_flagged / self.checked if self.checked else float("nan")


def increment_audit(
    trace: Sequence[ProbeSnapshot],
    eta: float,
    xi_l1: np.ndarray,
    mu_norm: float = 1.0,
    optimizer: str = "signgd",
    rtol: float = 1e-10,
    max_flags: int = 1000,
) -> AuditReport:
    """Check every per-step change of a probed inner product against the SignGD law.

    Query/key quantities may move by 0, ``eta*||mu||`` or ``eta*||xi_i||_1``;
    the mean value ``v`` is a difference of two blocks moving in opposite
    directions, so its allowed steps are twice those. Only consecutive
    snapshots of the same segment one step apart are compared.
    """
    if optimizer != "signgd":
        return AuditReport(skipped=f"increment audit applies to SignGD only, got {optimizer!r}")
    report = AuditReport()
    xi_l1 = np.asarray(xi_l1, dtype=np.float64)
    for a, b in zip(trace, trace[1:]):
        if a.segment != b.segment or b.step != a.step + 1:
            continue
        report.windows += 1
        checks = (
            ("q_mu", b.q_mu - a.q_mu, eta * mu_norm),
            ("k_mu", b.k_mu - a.k_mu, eta * mu_norm),
            ("q_xi", b.q_xi - a.q_xi, eta * xi_l1[None, :]),
            ("k_xi", b.k_xi - a.k_xi, eta * xi_l1[None, :]),
            ("v_mu", np.array([b.v_mu - a.v_mu]), 2 * eta * mu_norm),
            ("v_xi", b.v_xi - a.v_xi, 2 * eta * xi_l1),
        )
        for name, delta, expected in checks:
            mag = np.abs(delta)
            expected = np.broadcast_to(expected, mag.shape)
            good = (mag == 0) | (np.abs(mag - expected) <= rtol * expected)
            report.checked += mag.size
            bad = np.argwhere(~good)
            report.n_flagged += len(bad)
            for idx in map(tuple, bad[: max(0, max_flags - len(report.flags))]):
                report.flags.append(AuditFlag(b.t, name, tuple(int(j) for j in idx), float(mag[idx]), float(expected[idx])))
    return report


def xi_l1_norms(dataset: Dataset) -> np.ndarray:
    """``||xi_i||_1`` of the probed (first) noise patch of every sample."""
    return noise_norm_stats(dataset).l1[:, 0]


# ---------------------------------------------------------------------------
# serialization


def write_jsonl(snaps: Iterable[ProbeSnapshot], fh) -> None:
    for s in snaps:
        fh.write(json.dumps(s.to_dict()) + "\n")


def read_jsonl(lines: Iterable[str]) -> list[ProbeSnapshot]:
    return [ProbeSnapshot.from_dict(json.loads(line)) for line in lines if line.strip()]


def write_csv(snaps: Iterable[ProbeSnapshot], fh) -> None:
    """Flat long-format view: ``t, quantity, index, value`` (index is ``s;i`` for matrices)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "quantity", "index", "value"])
    for s in snaps:
        for name, val in s.to_dict().items():
            if name in ("t", "segment", "step") or val is None:
                continue
            arr = np.asarray(val)
            if arr.ndim == 0:
                w.writerow([repr(s.t), name, "", repr(float(arr))])
                continue
            for idx in np.ndindex(arr.shape):
                w.writerow([repr(s.t), name, ";".join(map(str, idx)), repr(arr[idx].item())])
