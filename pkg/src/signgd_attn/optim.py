"""SignGD, GD (optionally heavy-ball), and Adam as pure functions over Params.

``run_training`` is the full-batch loop: forward, analytic gradients, one
optimizer step, with probe snapshots at t=0 and on a cadence schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datagen import Dataset
from .gradients import Grads, loss_and_grads
from .transformer import PARAM_NAMES, Params

log = logging.getLogger(__name__)

KINDS = ("signgd", "gd", "gd_momentum", "adam")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss, gradient or parameter."""

    def __init__(self, message: str, iteration: int, tensor: str):
        super().__init__(message)
        self.iteration = iteration
        self.tensor = tensor


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "signgd"
    eta: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.0
    epsilon: float = 0.0
    bias_correction: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    @classmethod
    def adam(cls, eta: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-15, **kw):
        return cls("adam", eta, beta1, beta2, epsilon, **kw)


@dataclass
class OptimizerState:
    step_count: int = 0
    first_moment: Params | None = None
    second_moment: Params | None = None
    head_moments: tuple[np.ndarray | None, np.ndarray | None] = (None, None)


def signgd_step(params: Params, grads: Params | Grads, eta: float) -> Params:
    """``theta - eta * sgn(g)`` with ``sgn(0) = 0``."""
    g = grads.as_params() if isinstance(grads, Grads) else grads
    return params.zip_map(g, lambda w, gw: w - eta * np.sign(gw))


def gd_step(
    params: Params, grads: Params | Grads, eta: float, state: OptimizerState | None = None, beta1: float = 0.0
) -> tuple[Params, OptimizerState | None]:
    """Plain GD when ``state`` is None, else heavy-ball ``m <- beta1 m + g; theta <- theta - eta m``."""
    g = grads.as_params() if isinstance(grads, Grads) else grads
    if state is None:
        return params.zip_map(g, lambda w, gw: w - eta * gw), None
    m = g if state.first_moment is None else state.first_moment.zip_map(g, lambda mw, gw: beta1 * mw + gw)
    new = params.zip_map(m, lambda w, mw: w - eta * mw)
    return new, replace(state, step_count=state.step_count + 1, first_moment=m)


def _adam_direction(m: np.ndarray, v: np.ndarray, spec: OptimizerSpec, t: int) -> np.ndarray:
    if spec.bias_correction:
        m = m / (1.0 - spec.beta1**t)
        v = v / (1.0 - spec.beta2**t)
    denom = np.sqrt(v) + spec.epsilon
    # 0/0 only arises for an exactly-zero gradient history with epsilon=0; treat as no move.
    return np.divide(m, denom, out=np.zeros_like(m), where=denom != 0)


def adam_step(
    params: Params, grads: Params | Grads, spec: OptimizerSpec, state: OptimizerState
) -> tuple[Params, OptimizerState]:
    g = grads.as_params() if isinstance(grads, Grads) else grads
    t = state.step_count + 1
    b1, b2 = spec.beta1, spec.beta2
    if state.first_moment is None:
        m = g.map(lambda gw: (1 - b1) * gw)
        v = g.map(lambda gw: (1 - b2) * gw * gw)
    else:
        m = state.first_moment.zip_map(g, lambda mw, gw: b1 * mw + (1 - b1) * gw)
        v = state.second_moment.zip_map(g, lambda vw, gw: b2 * vw + (1 - b2) * gw * gw)
    new = Params(*(w - spec.eta * _adam_direction(mw, vw, spec, t) for w, mw, vw in zip(params, m, v)))
    return new, replace(state, step_count=t, first_moment=m, second_moment=v)


def _head_step(head: np.ndarray, g: np.ndarray, spec: OptimizerSpec, state: OptimizerState):
    # the head follows the same rule as the attention weights
    if spec.kind == "signgd":
        return head - spec.eta * np.sign(g), state.head_moments
    if spec.kind == "gd":
        return head - spec.eta * g, state.head_moments
    m_prev, v_prev = state.head_moments
    if spec.kind == "gd_momentum":
        m = g if m_prev is None else spec.beta1 * m_prev + g
        return head - spec.eta * m, (m, None)
    m = (1 - spec.beta1) * g if m_prev is None else spec.beta1 * m_prev + (1 - spec.beta1) * g
    v = (1 - spec.beta2) * g * g if v_prev is None else spec.beta2 * v_prev + (1 - spec.beta2) * g * g
    return head - spec.eta * _adam_direction(m, v, spec, state.step_count + 1), (m, v)


def optimizer_step(
    params: Params, grads: Grads, spec: OptimizerSpec, state: OptimizerState
) -> tuple[Params, OptimizerState]:
    if spec.kind == "signgd":
        return signgd_step(params, grads, spec.eta), replace(state, step_count=state.step_count + 1)
    if spec.kind == "gd":
        new, _ = gd_step(params, grads, spec.eta)
        return new, replace(state, step_count=state.step_count + 1)
    if spec.kind == "gd_momentum":
        return gd_step(params, grads, spec.eta, state, spec.beta1)
    return adam_step(params, grads, spec, state)


@dataclass(frozen=True)
class Cadence:
    """Probe every step up to ``dense_until``, then every ``every`` steps (plus the final step)."""

    dense_until: int = 50
    every: int = 10

    def __call__(self, t: int) -> bool:
        return t <= self.dense_until or (t - self.dense_until) % self.every == 0


@dataclass
class TrainResult:
    params: Params
    trace: list = field(default_factory=list)
    head: np.ndarray | None = None
    losses: np.ndarray | None = None  # training loss at every t in [0, iters]


def _check_finite(params: Params, head: np.ndarray | None, t: int) -> None:
    for name, w in params.items():
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"non-finite parameter {name} at iteration {t}", t, name)
    if head is not None and not np.all(np.isfinite(head)):
        raise NumericalError(f"non-finite parameter head at iteration {t}", t, "head")


def run_training(
    params: Params,
    dataset: Dataset,
    spec: OptimizerSpec,
    iters: int,
    probe_cadence: Callable[[int], bool] | int | None = None,
    probe: Callable | None = None,
    head: np.ndarray | None = None,
    on_step: Callable[[int, Params], None] | None = None,
) -> TrainResult:
    """Deterministic full-batch training.

    ``probe(params, dataset, t, caches, head)`` is called at t=0, whenever
    ``probe_cadence(t)`` is true, and at ``t = iters``; its return values form
    the trace. Aborts with :class:`NumericalError` on any non-finite value.
    """
    spec.validate()
    if isinstance(probe_cadence, int):
        probe_cadence = Cadence(dense_until=0, every=probe_cadence)
    cadence = probe_cadence or Cadence()
    state = OptimizerState()
    trace = []
    losses = np.empty(iters + 1)
    _check_finite(params, head, 0)
    for t in range(iters + 1):
        loss, grads, caches = loss_and_grads(params, dataset, head)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {t}", t, "loss")
        losses[t] = loss
        if probe is not None and (t == 0 or t == iters or cadence(t)):
            trace.append(probe(params, dataset, t, caches, head))
        if on_step is not None:
            on_step(t, params)
        if t == iters:
            break
        for name, g in zip((*PARAM_NAMES, "head"), (*grads.as_params(), grads.g_head)):
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient of {name} at iteration {t}", t, name)
        prev_state = state
        params, state = optimizer_step(params, grads, spec, state)
        if head is not None:
            head, moments = _head_step(head, grads.g_head, spec, prev_state)
            state = replace(state, head_moments=moments)
        _check_finite(params, head, t + 1)
    return TrainResult(params=params, trace=trace, head=head, losses=losses)
