"""Synthetic signal-plus-sparse-noise classification data.

Every sample has ``L`` patches. Half of them hold ``y * mu`` with ``mu = e_1``;
the other half are ``s``-sparse Gaussian noise vectors. With ``orthogonal``
set, noise never touches coordinate 0 (the signal coordinate).

Randomness is derived per sample and per patch from ``(seed, stream, i, l)``
through :class:`numpy.random.SeedSequence`, so any sample can be regenerated
on its own and generation order does not matter. Gaussians come from numpy's
PCG64 bit generator with the ziggurat normal sampler; both are covered by
numpy's stream-compatibility policy for ``Generator``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence(seed, spawn_key=(stream, sample, patch)); normals: ziggurat"
DATASET_FORMAT = "signgd-attn-dataset/1"

TRAIN_STREAM = 0
TEST_STREAM = 1


class ConfigError(ValueError):
    """Raised for configurations that violate the data model's constraints."""


@dataclass(frozen=True)
class DataConfig:
    d: int
    s: int
    n: int
    L: int = 2
    sigma_p: float = 1.0
    orthogonal: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.L < 2 or self.L % 2:
            raise ConfigError(f"L must be even and >= 2, got {self.L}")
        max_s = self.d - 1 if self.orthogonal else self.d
        if not 1 <= self.s <= max_s:
            raise ConfigError(f"s must lie in [1, {max_s}] (orthogonal={self.orthogonal}), got {self.s}")
        if not (self.sigma_p > 0 and np.isfinite(self.sigma_p)):
            raise ConfigError(f"sigma_p must be a positive finite number, got {self.sigma_p}")

    @classmethod
    def row_a(cls, d: int = 2000, seed: int = 0, **overrides) -> "DataConfig":
        """Setting (a) of the reference experiments: n = d/100, s = d/25, sigma_p = 2/sqrt(s)."""
        s = overrides.pop("s", int(round(0.04 * d)))
        kw = dict(d=d, s=s, n=int(round(0.01 * d)), L=2, sigma_p=2.0 / np.sqrt(s), orthogonal=True, seed=seed)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class Sample:
    X: np.ndarray
    y: int
    signal_positions: tuple[int, ...]
    noise_supports: tuple[tuple[int, ...], ...]

    @property
    def noise_positions(self) -> tuple[int, ...]:
        return tuple(l for l in range(self.X.shape[1]) if l not in self.signal_positions)


@dataclass(frozen=True)
class Dataset:
    config: DataConfig
    samples: tuple[Sample, ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def X(self) -> np.ndarray:
        """All samples stacked, shape ``(n, d, L)``."""
        out = np.stack([s.X for s in self.samples])
        out.flags.writeable = False
        return out

    @cached_property
    def y(self) -> np.ndarray:
        out = np.array([s.y for s in self.samples], dtype=np.float64)
        out.flags.writeable = False
        return out

    @cached_property
    def signal_index(self) -> np.ndarray:
        """Position of the first signal patch of every sample."""
        return np.array([s.signal_positions[0] for s in self.samples], dtype=np.int64)

    @cached_property
    def noise_index(self) -> np.ndarray:
        """Noise patch positions, shape ``(n, L/2)``."""
        return np.array([s.noise_positions for s in self.samples], dtype=np.int64)

    @cached_property
    def noise(self) -> np.ndarray:
        """Noise vectors ``xi_i`` (first noise patch of each sample), shape ``(n, d)``."""
        rows = np.arange(len(self.samples))
        return np.ascontiguousarray(self.X[rows, :, self.noise_index[:, 0]])


def _rng(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, *key))))


def _sparse_noise(rng: np.random.Generator, cfg: DataConfig) -> tuple[np.ndarray, np.ndarray]:
    # Fisher-Yates prefix of length s over the admissible coordinates.
    pool = np.arange(1 if cfg.orthogonal else 0, cfg.d)
    m = len(pool)
    for k in range(cfg.s):
        j = int(rng.integers(k, m))
        pool[k], pool[j] = pool[j], pool[k]
    support = pool[: cfg.s].copy()
    values = rng.standard_normal(cfg.s) * cfg.sigma_p
    order = np.argsort(support)
    return support[order], values[order]


def _make_sample(cfg: DataConfig, i: int, stream: int) -> Sample:
    rng = _rng(cfg.seed, stream, i)
    y = 1 if rng.integers(0, 2) == 1 else -1
    signal_positions = tuple(sorted(int(p) for p in rng.permutation(cfg.L)[: cfg.L // 2]))
    X = np.zeros((cfg.d, cfg.L))
    supports = []
    for l in range(cfg.L):
        if l in signal_positions:
            X[0, l] = float(y)
            continue
        support, values = _sparse_noise(_rng(cfg.seed, stream, i, l), cfg)
        X[support, l] = values
        supports.append(tuple(int(k) for k in support))
    X.flags.writeable = False
    return Sample(X=X, y=y, signal_positions=signal_positions, noise_supports=tuple(supports))


def generate_dataset(config: DataConfig, stream: int = TRAIN_STREAM) -> Dataset:
    config.validate()
    return Dataset(config, tuple(_make_sample(config, i, stream) for i in range(config.n)))


def fresh_samples(config: DataConfig, n: int, seed: int | None = None) -> Dataset:
    """Draw ``n`` new samples from the same distribution on the held-out stream."""
    cfg = DataConfig(**{**asdict(config), "n": n, "seed": config.seed if seed is None else seed})
    return generate_dataset(cfg, stream=TEST_STREAM)


def supports_disjoint(dataset: Dataset) -> bool:
    """True iff no coordinate is shared by two noise patches anywhere in the dataset."""
    seen: set[int] = set()
    for sample in dataset.samples:
        for support in sample.noise_supports:
            if seen.intersection(support):
                return False
            seen.update(support)
    return True


class NoiseNorms(NamedTuple):
    l1: np.ndarray
    l2sq: np.ndarray


def noise_norm_stats(dataset: Dataset) -> NoiseNorms:
    """Exact l1 norm and squared l2 norm of every noise patch, shape ``(n, L/2)``."""
    rows = np.arange(len(dataset))[:, None]
    xi = dataset.X[rows, :, dataset.noise_index]  # (n, L/2, d)
    return NoiseNorms(np.abs(xi).sum(axis=-1), (xi * xi).sum(axis=-1))


def signal_orthogonality_rate(configs: Iterable[DataConfig]) -> float:
    """Fraction of generated datasets whose noise patches all vanish on the signal coordinate."""
    hits = total = 0
    for cfg in configs:
        ds = generate_dataset(cfg)
        rows = np.arange(len(ds))[:, None]
        hits += bool(np.all(ds.X[rows, 0, ds.noise_index] == 0.0))
        total += 1
    if total == 0:
        raise ValueError("no configurations given")
    return hits / total


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write JSONL: a header with the config, then one record per sample with sparse noise."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": DATASET_FORMAT, "config": asdict(dataset.config), "rng": RNG_ALGORITHM}
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            noise = [
                [[k, float(s.X[k, l])] for k in support]
                for l, support in zip(s.noise_positions, s.noise_supports)
            ]
            rec = {"y": s.y, "signal_positions": list(s.signal_positions), "noise": noise}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ConfigError(f"{path}: not a dataset file (format={header.get('format')!r})")
        cfg = DataConfig(**header["config"])
        samples = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            X = np.zeros((cfg.d, cfg.L))
            signal_positions = tuple(rec["signal_positions"])
            X[0, list(signal_positions)] = float(rec["y"])
            noise_positions = [l for l in range(cfg.L) if l not in signal_positions]
            supports = []
            for l, entries in zip(noise_positions, rec["noise"]):
                idx = [int(k) for k, _ in entries]
                X[idx, l] = [v for _, v in entries]
                supports.append(tuple(idx))
            X.flags.writeable = False
            samples.append(Sample(X, int(rec["y"]), signal_positions, tuple(supports)))
    if len(samples) != cfg.n:
        raise ConfigError(f"{path}: header says n={cfg.n} but {len(samples)} samples found")
    return Dataset(cfg, tuple(samples))


def pairwise_overlap(dataset: Dataset) -> np.ndarray:
    """Per noise patch, the number of its coordinates shared with any other noise patch."""
    counts: dict[int, int] = {}
    for s in dataset.samples:
        for support in s.noise_supports:
            for k in support:
                counts[k] = counts.get(k, 0) + 1
    return np.array(
        [[sum(counts[k] > 1 for k in support) for support in s.noise_supports] for s in dataset.samples]
    )


__all__: Sequence[str] = [
    "ConfigError",
    "DataConfig",
    "Dataset",
    "NoiseNorms",
    "Sample",
    "fresh_samples",
    "generate_dataset",
    "load_dataset",
    "noise_norm_stats",
    "pairwise_overlap",
    "save_dataset",
    "signal_orthogonality_rate",
    "supports_disjoint",
]
