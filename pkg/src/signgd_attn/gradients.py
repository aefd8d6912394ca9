"""Analytic gradients of the empirical logistic loss, plus a finite-difference oracle.

All gradients are of ``L_S = (1/n) sum_i l(y_i f(W, X_i))``. Per sample the
chain rule goes through ``dl/df = l'(y f) y = -loss_deriv * y``; the 1/n
average is taken inside, so sign-based optimizers see the sign of the mean.

For general ``L`` the attention gradients come from the softmax Jacobian
``dS[l,b]/dZ[l,a] = S[l,b] (1{a=b} - S[l,a])``, which gives

    df/dZ[l, a] = S[l, a] (U[a] - sum_b S[l, b] U[b]).

The two-patch closed forms are kept in :func:`grad_query_key_two_patch` as an
independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .datagen import Dataset
from .transformer import ForwardCache, Params, forward

__all__ = [
    "Grads",
    "HeadModeError",
    "central_difference",
    "default_head",
    "finite_difference_oracle",
    "grad_head",
    "grad_query_key",
    "grad_query_key_two_patch",
    "grad_value",
    "loss_and_grads",
    "max_relative_error",
    "worst_entries",
]


class HeadModeError(RuntimeError):
    """Head gradient requested while the linear head is fixed."""


@dataclass(frozen=True)
class Grads:
    g_Q: np.ndarray
    g_K: np.ndarray
    g_V_pos: np.ndarray
    g_V_neg: np.ndarray
    g_head: np.ndarray | None = None

    def as_params(self) -> Params:
        return Params(self.g_Q, self.g_K, self.g_V_pos, self.g_V_neg)

    def check(self, t: int | None = None) -> None:
        for name, g in zip(("g_Q", "g_K", "g_V_pos", "g_V_neg", "g_head"), (*self.as_params(), self.g_head)):
            if g is not None and not np.all(np.isfinite(g)):
                where = "" if t is None else f" at iteration {t}"
                raise FloatingPointError(f"non-finite gradient {name}{where}")


def default_head(m_v: int) -> np.ndarray:
    """Head magnitudes ``theta[j, r] = 1/m_v``; row 0 is ``j=+1``, row 1 is ``j=-1``."""
    return np.full((2, m_v), 1.0 / m_v)


def _sample_weights(dataset: Dataset, caches: ForwardCache) -> np.ndarray:
    # l'_i y_i / n with l' = -loss_deriv
    return -caches.loss_deriv * dataset.y / len(dataset)


def grad_value(params: Params, dataset: Dataset, caches: ForwardCache, head: np.ndarray | None = None):
    """Gradients for ``W_V_pos`` and ``W_V_neg``.

    Row ``r`` of block ``j`` is ``theta[j, r] * j * sum_i c_i sum_a (sum_l S_i[l, a]) x_i^(a)``
    with ``c_i = l'_i y_i / n``; for the fixed head every row is identical.
    """
    c = _sample_weights(dataset, caches)
    colsum = caches.S.sum(axis=1)  # (n, L): attention mass received by each patch
    base = np.einsum("n,na,nda->d", c, colsum, dataset.X)
    if head is None:
        row = base / params.m_v
        g_pos = np.broadcast_to(row, params.W_V_pos.shape).copy()
        return g_pos, -g_pos
    return np.outer(head[0], base), -np.outer(head[1], base)


def _dZ(caches: ForwardCache, c: np.ndarray) -> np.ndarray:
    S, U = caches.S, caches.U
    G = S * (U[:, None, :] - np.einsum("nlb,nb->nl", S, U)[:, :, None])
    return G * c[:, None, None]


def grad_query_key(params: Params, dataset: Dataset, caches: ForwardCache) -> tuple[np.ndarray, np.ndarray]:
    """Gradients for ``W_Q`` and ``W_K`` at any context length."""
    G = _dZ(caches, _sample_weights(dataset, caches))  # (n, L, L)
    n, d, L = dataset.X.shape
    Xf = dataset.X.transpose(0, 2, 1).reshape(n * L, d)
    A = np.einsum("nla,nka->knl", G, caches.K).reshape(params.m_k, n * L)
    B = np.einsum("nla,nkl->kna", G, caches.Q).reshape(params.m_k, n * L)
    return A @ Xf, B @ Xf


def grad_query_key_two_patch(params: Params, dataset: Dataset, caches: ForwardCache) -> tuple[np.ndarray, np.ndarray]:
    """Two-patch closed forms, written sample by sample.

    query: ``<v, x1-x2> <w_K,s, x1-x2> (s11 s12 x1 + s21 s22 x2)``
    key:   ``<v, x1-x2> <w_Q,s, s11 s12 x1 + s21 s22 x2> (x1 - x2)``
    each weighted by ``l'_i y_i / n``.
    """
    if dataset.X.shape[2] != 2:
        raise ValueError("closed form only covers L = 2")
    v = params.mean_value()
    c = _sample_weights(dataset, caches)
    gQ = np.zeros_like(params.W_Q)
    gK = np.zeros_like(params.W_K)
    for i in range(len(dataset)):
        x1, x2 = dataset.X[i, :, 0], dataset.X[i, :, 1]
        S = caches.S[i]
        diff = x1 - x2
        mix = S[0, 0] * S[0, 1] * x1 + S[1, 0] * S[1, 1] * x2
        vd = v @ diff
        gQ += c[i] * vd * np.outer(params.W_K @ diff, mix)
        gK += c[i] * vd * np.outer(params.W_Q @ mix, diff)
    return gQ, gK


def grad_head(params: Params, head: np.ndarray | None, dataset: Dataset, caches: ForwardCache) -> np.ndarray:
    """Gradient for head magnitudes: ``(1/n) sum_i y_i l'_i j sum_a colsum_a <w_V,j,r, x_a>``."""
    if head is None:
        raise HeadModeError("linear head is fixed; enable joint training to get its gradient")
    c = _sample_weights(dataset, caches)
    colsum = caches.S.sum(axis=1)
    mixed = np.einsum("n,na,nda->d", c, colsum, dataset.X)
    return np.stack([params.W_V_pos @ mixed, -(params.W_V_neg @ mixed)])


def loss_and_grads(
    params: Params, dataset: Dataset, head: np.ndarray | None = None
) -> tuple[float, Grads, ForwardCache]:
    caches = forward(params, dataset, head)
    g_pos, g_neg = grad_value(params, dataset, caches, head)
    g_Q, g_K = grad_query_key(params, dataset, caches)
    g_head = grad_head(params, head, dataset, caches) if head is not None else None
    return float(caches.loss.mean()), Grads(g_Q, g_K, g_pos, g_neg, g_head), caches


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Entry-wise central differences with step ``h * max(1, |x_k|)``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    grad = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        step = h * max(1.0, abs(orig))
        flat[k] = orig + step
        f_plus = fn(x)
        flat[k] = orig - step
        f_minus = fn(x)
        flat[k] = orig
        grad[k] = (f_plus - f_minus) / (2.0 * step)
    return out


def finite_difference_oracle(
    params: Params, dataset: Dataset, h: float = 1e-6, head: np.ndarray | None = None
) -> Grads:
    """Central-difference estimate of every gradient entry; O(#params) forward passes, tests only."""
    mats = [np.array(w) for w in params]

    def loss_with(idx: int) -> Callable[[np.ndarray], float]:
        def fn(w: np.ndarray) -> float:
            trial = list(mats)
            trial[idx] = w
            return float(forward(Params(*trial), dataset, head).loss.mean())

        return fn

    grads = [central_difference(loss_with(k), mats[k], h) for k in range(4)]
    g_head = None
    if head is not None:
        p = Params(*mats)
        g_head = central_difference(lambda th: float(forward(p, dataset, th).loss.mean()), head, h)
    return Grads(*grads, g_head=g_head)


_GRAD_NAMES = ("g_Q", "g_K", "g_V_pos", "g_V_neg", "g_head")


def _pairs(analytic: Grads, numeric: Grads):
    for name, a, b in zip(_GRAD_NAMES, (*analytic.as_params(), analytic.g_head), (*numeric.as_params(), numeric.g_head)):
        if a is not None and b is not None and a.size:
            yield name, np.asarray(a), np.asarray(b)


def max_relative_error(analytic: Grads, numeric: Grads, floor: float = 1e-300) -> dict[str, float]:
    """Per tensor, ``max |a - b| / max(max |a|, max |b|)``.

    Errors are measured against the tensor's scale rather than entry by entry:
    central differences carry an absolute round-off of roughly
    ``machine eps * loss / h``, which swamps entries many orders below the
    largest one. ``floor`` keeps an all-zero pair from producing 0/0.
    """
    out = {}
    for name, a, b in _pairs(analytic, numeric):
        scale = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
        out[name] = float(np.abs(a - b).max()) / scale
    return out


def worst_entries(analytic: Grads, numeric: Grads) -> dict[str, dict]:
    """Per tensor, the entry with the largest ``|a - b|``: its index, both values and the scaled error."""
    out = {}
    for name, a, b in _pairs(analytic, numeric):
        idx = np.unravel_index(int(np.argmax(np.abs(a - b))), a.shape)
        scale = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-300)
        out[name] = {
            "index": tuple(int(k) for k in idx),
            "analytic": float(a[idx]),
            "numeric": float(b[idx]),
            "relative_error": float(abs(a[idx] - b[idx])) / scale,
        }
    return out
