"""Two-layer transformer: one softmax attention head and a fixed +-1/m_v linear head.

For a sample ``X`` (``d x L``, columns are patches) the attention logits are
``Z[l, a] = <W_Q x_l, W_K x_a>`` without any ``1/sqrt(m_k)`` scaling, the
softmax runs over ``a`` for each query patch ``l``, and the output is

    f(W, X) = sum_l sum_a S[l, a] <v, x_a>,

where ``v`` is the mean row of ``W_V_pos`` minus the mean row of ``W_V_neg``.
Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .datagen import DataConfig, Dataset, Sample, fresh_samples

PARAMS_FORMAT = "signgd-attn-params/1"
PARAM_NAMES = ("W_Q", "W_K", "W_V_pos", "W_V_neg")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int
    m_k: int
    m_v: int
    L: int = 2
    sigma_0: float = 0.0
    init_seed: int = 0

    def validate(self) -> None:
        if self.m_k < 1 or self.m_v < 1:
            raise ShapeError(f"m_k and m_v must be >= 1, got {self.m_k}, {self.m_v}")
        if self.L < 2:
            raise ShapeError(f"L must be >= 2, got {self.L}")
        if self.sigma_0 < 0:
            raise ValueError(f"sigma_0 must be >= 0, got {self.sigma_0}")

    @classmethod
    def row_a(cls, d: int = 2000, init_seed: int = 0, **overrides) -> "ModelConfig":
        kw = dict(d=d, m_k=int(round(0.05 * d)), m_v=int(round(0.01 * d)), L=2, sigma_0=0.1 / np.sqrt(d), init_seed=init_seed)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class Params:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V_pos: np.ndarray
    W_V_neg: np.ndarray

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter((self.W_Q, self.W_K, self.W_V_pos, self.W_V_neg))

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(PARAM_NAMES, self)

    def map(self, fn) -> "Params":
        return Params(*(fn(w) for w in self))

    def zip_map(self, other: "Params", fn) -> "Params":
        return Params(*(fn(a, b) for a, b in zip(self, other)))

    def copy(self) -> "Params":
        return self.map(np.array)

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def m_k(self) -> int:
        return self.W_Q.shape[0]

    @property
    def m_v(self) -> int:
        return self.W_V_pos.shape[0]

    def mean_value(self) -> np.ndarray:
        """The readout direction ``v`` (recomputed on every call)."""
        return self.W_V_pos.mean(axis=0) - self.W_V_neg.mean(axis=0)

    def check(self) -> None:
        m_k, d = self.W_Q.shape
        if self.W_K.shape != (m_k, d):
            raise ShapeError(f"W_K shape {self.W_K.shape} != W_Q shape {(m_k, d)}")
        if self.W_V_pos.shape != self.W_V_neg.shape or self.W_V_pos.shape[1] != d:
            raise ShapeError(f"value shapes {self.W_V_pos.shape}, {self.W_V_neg.shape} inconsistent with d={d}")
        for name, w in self.items():
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"{name} has non-finite entries")


def init_params(config: ModelConfig) -> Params:
    config.validate()
    ss = np.random.SeedSequence(config.init_seed)
    shapes = [(config.m_k, config.d)] * 2 + [(config.m_v, config.d)] * 2
    mats = []
    for child, shape in zip(ss.spawn(4), shapes):
        rng = np.random.Generator(np.random.PCG64(child))
        mats.append(rng.standard_normal(shape) * config.sigma_0)
    return Params(*mats)


def zero_params(d: int, m_k: int, m_v: int) -> Params:
    return Params(np.zeros((m_k, d)), np.zeros((m_k, d)), np.zeros((m_v, d)), np.zeros((m_v, d)))


def readout(params: Params, head: np.ndarray | None = None) -> np.ndarray:
    """Effective readout vector. ``head`` holds magnitudes ``theta[j, r]`` (row 0: j=+1, row 1: j=-1)."""
    if head is None:
        return params.mean_value()
    return head[0] @ params.W_V_pos - head[1] @ params.W_V_neg


def _batch(X: np.ndarray) -> np.ndarray:
    return X[None] if X.ndim == 2 else X


def attention_logits(params: Params, X: np.ndarray) -> np.ndarray:
    """``Z[l, a] = (W_Q x_l) . (W_K x_a)`` for one ``(d, L)`` sample or a ``(n, d, L)`` batch."""
    Xb = _batch(np.asarray(X, dtype=np.float64))
    if Xb.shape[1] != params.d:
        raise ShapeError(f"sample dimension {Xb.shape[1]} != parameter dimension {params.d}")
    Q = params.W_Q @ Xb
    K = params.W_K @ Xb
    Z = Q.transpose(0, 2, 1) @ K
    return Z[0] if np.ndim(X) == 2 else Z


def softmax_outputs(Z: np.ndarray) -> np.ndarray:
    """Row-wise (last axis) softmax with max subtraction."""
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logistic_loss(margin: np.ndarray) -> np.ndarray:
    """``log(1 + exp(-m))`` without overflow."""
    m = np.asarray(margin, dtype=np.float64)
    pos = np.log1p(np.exp(-np.abs(m)))
    return np.where(m > 0, pos, pos - m)


def logistic_deriv(margin: np.ndarray) -> np.ndarray:
    """``-l'(m) = 1 / (1 + exp(m))``, in (0, 1)."""
    m = np.asarray(margin, dtype=np.float64)
    e = np.exp(-np.abs(m))
    return np.where(m > 0, e / (1.0 + e), 1.0 / (1.0 + e))


@dataclass(frozen=True)
class ForwardCache:
    """Per-sample forward quantities, each with a leading sample axis."""

    Q: np.ndarray  # (n, m_k, L)  W_Q x_l
    K: np.ndarray  # (n, m_k, L)  W_K x_a
    U: np.ndarray  # (n, L)       <v, x_a>
    Z: np.ndarray  # (n, L, L)
    S: np.ndarray  # (n, L, L)
    f: np.ndarray  # (n,)
    margin: np.ndarray
    loss: np.ndarray
    loss_deriv: np.ndarray  # -l'(margin)


def forward_arrays(params: Params, X: np.ndarray, y: np.ndarray, head: np.ndarray | None = None) -> ForwardCache:
    X = _batch(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.d:
        raise ShapeError(f"sample dimension {X.shape[1]} != parameter dimension {params.d}")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    Q = params.W_Q @ X
    K = params.W_K @ X
    Z = Q.transpose(0, 2, 1) @ K
    S = softmax_outputs(Z)
    U = readout(params, head) @ X
    f = np.einsum("nla,na->n", S, U)
    margin = y * f
    return ForwardCache(Q, K, U, Z, S, f, margin, logistic_loss(margin), logistic_deriv(margin))


def forward(params: Params, data: Sample | Dataset, head: np.ndarray | None = None) -> ForwardCache:
    if isinstance(data, Sample):
        return forward_arrays(params, data.X, np.array([data.y]), head)
    return forward_arrays(params, data.X, data.y, head)


def two_patch_output(params: Params, X: np.ndarray) -> float:
    """The L=2 closed form ``(s11 + s21) <v, x1> + (s12 + s22) <v, x2>``."""
    S = softmax_outputs(attention_logits(params, X))
    v = params.mean_value()
    return float((S[0, 0] + S[1, 0]) * (v @ X[:, 0]) + (S[0, 1] + S[1, 1]) * (v @ X[:, 1]))


def empirical_loss(params: Params, dataset: Dataset, head: np.ndarray | None = None) -> float:
    return float(forward(params, dataset, head).loss.mean())


def test_loss(
    params: Params,
    config: DataConfig,
    n_test: int = 500,
    seed: int | None = None,
    head: np.ndarray | None = None,
) -> dict[str, float]:
    """Monte Carlo logistic and 0-1 loss on ``n_test`` fresh samples (``y f <= 0`` is an error)."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    cache = forward(params, fresh_samples(config, n_test, seed), head)
    return {"logistic": float(cache.loss.mean()), "zero_one": float(np.mean(cache.margin <= 0))}


test_loss.__test__ = False  # keep pytest from collecting it


def save_params(params: Params, config: ModelConfig, path: str | Path) -> None:
    """Checkpoint: a JSON header line, then the four matrices as row-major little-endian float64."""
    header = json.dumps({"format": PARAMS_FORMAT, "config": asdict(config), "names": list(PARAM_NAMES)}).encode()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for w in params:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != PARAMS_FORMAT:
            raise ValueError(f"{path}: not a params checkpoint")
        cfg = ModelConfig(**header["config"])
        shapes = [(cfg.m_k, cfg.d)] * 2 + [(cfg.m_v, cfg.d)] * 2
        mats = []
        for shape in shapes:
            count = shape[0] * shape[1]
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            mats.append(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64))
    return Params(*mats), cfg
