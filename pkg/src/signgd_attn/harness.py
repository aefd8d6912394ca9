"""Run orchestration: config files, manifests, trace files, sweeps and reports.

A run is fully determined by its :class:`RunManifest`. Trace files are JSONL:
the manifest, a record of run constants, one record per probe snapshot, and
an end marker. Wall-clock data and the output directory live only in the
side-car ``manifest.json`` so that two executions of one manifest produce
byte-identical traces.
"""

from __future__ import annotations

import ast
import csv
import io
import itertools
import json
import logging
import math
import operator
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .datagen import RNG_ALGORITHM, ConfigError, DataConfig, Dataset, fresh_samples, generate_dataset, load_dataset
from .gradients import default_head
from .optim import Cadence, NumericalError, OptimizerSpec, run_training
from .probes import (
    SIGN_CLASSES,
    BetaStats,
    ProbeSnapshot,
    beta_stats,
    make_probe,
    sign_table,
    xi_l1_norms,
)
from .theory import (
    FAIL,
    INCONCLUSIVE,
    NOT_APPLICABLE,
    PASS,
    PredictedTimes,
    RegimeError,
    StageReport,
    Verdict,
    at_or_after,
    binomial_half_test,
    detect_transitions,
    generalization_verdict,
    opposite_pair_resolution,
    predicted_times,
    verify_attention_sparsity,
    verify_convergence,
    verify_stage_predicates,
)
from .transformer import ModelConfig, Params, forward, init_params, save_params

log = logging.getLogger(__name__)

TRACE_FORMAT = "signgd-attn-trace/1"

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_REGIME, EXIT_INCONCLUSIVE = 0, 1, 2, 3, 4, 5, 6


class ConfigFileError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


class TraceFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config files

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"

SCHEMA: dict[str, str] = {
    # data
    "d": _INT, "n": _INT, "s": _INT, "L": _INT, "sigma_p": _FLOAT, "orthogonal": _BOOL, "seed": _INT,
    # model
    "m_k": _INT, "m_v": _INT, "sigma_0": _FLOAT, "init_seed": _INT, "joint_head": _BOOL,
    # optimizer
    "optimizer": _STR, "eta": _FLOAT, "beta1": _FLOAT, "beta2": _FLOAT, "epsilon": _FLOAT,
    "bias_correction": _BOOL,
    # run
    "experiment": _STR, "iters": _INT, "dense_until": _INT, "probe_every": _INT,
    "zoom": _INT, "zoom_span": _INT, "zoom_every": _INT, "test_every": _INT, "n_test": _INT,
}  # fmt: skip

DATA_REQUIRED = ("d", "n", "s", "sigma_p")
MODEL_REQUIRED = ("m_k", "m_v", "sigma_0")

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv, ast.Pow: operator.pow}
_FUNCS = {"sqrt": math.sqrt, "log": math.log, "exp": math.exp}
_CONSTS = {"pi": math.pi, "e": math.e}


def _eval_expr(text: str, env: dict[str, Any]):
    """Arithmetic over numbers, earlier keys, ``sqrt``/``log``/``exp`` and ``pi``/``e``."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return node.value
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Name):
            if node.id in env and isinstance(env[node.id], (int, float)) and not isinstance(env[node.id], bool):
                return env[node.id]
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise ValueError(f"unknown name {node.id!r}")
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and len(node.args) == 1:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ValueError(f"unsupported expression {ast.dump(node)}")

    return ev(ast.parse(text, mode="eval"))


def _coerce(key: str, raw: str, env: dict[str, Any], line: int | None):
    kind = SCHEMA[key]
    text = raw.strip()
    if kind == _STR:
        return text
    if kind == _BOOL:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigFileError(f"{key}: expected a boolean, got {text!r}", line, key)
    try:
        val = _eval_expr(text, env)
    except (SyntaxError, ValueError, ZeroDivisionError, OverflowError) as exc:
        raise ConfigFileError(f"{key}: cannot evaluate {text!r} ({exc})", line, key) from None
    if kind == _INT:
        if isinstance(val, float) and not val.is_integer():
            raise ConfigFileError(f"{key}: expected an integer, got {val!r}", line, key)
        return int(val)
    return float(val)


def parse_config_text(text: str, allow_grid: bool = False) -> tuple[dict[str, Any], dict[str, list]]:
    """Parse flat ``key = value`` text. With ``allow_grid``, ``grid.<key> = a, b, c`` and
    ``seeds = 0..49`` (inclusive) or ``seeds = 1, 5, 9`` lines are collected separately."""
    values: dict[str, Any] = {}
    grid: dict[str, list] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        if allow_grid and key == "seeds":
            grid["seed"] = _parse_seeds(val, lineno)
            continue
        if allow_grid and key.startswith("grid."):
            name = key[5:]
            if name not in SCHEMA:
                raise ConfigFileError(f"unknown field {name!r}", lineno, name)
            items = [v for v in (x.strip() for x in val.split(",")) if v]
            grid[name] = [_coerce(name, v, values, lineno) for v in items]
            continue
        if key not in SCHEMA:
            raise ConfigFileError(f"unknown field {key!r}", lineno, key)
        if key in values:
            raise ConfigFileError(f"duplicate field {key!r}", lineno, key)
        values[key] = _coerce(key, val, values, lineno)
    return values, grid


def _parse_seeds(val: str, lineno: int) -> list[int]:
    m = re.fullmatch(r"\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*", val)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        return list(range(lo, hi + 1))
    try:
        return [int(v) for v in val.split(",") if v.strip()]
    except ValueError:
        raise ConfigFileError(f"seeds: expected 'a..b' or a comma list, got {val!r}", lineno, "seeds") from None


def read_config_file(path: str | Path, allow_grid: bool = False) -> tuple[dict[str, Any], dict[str, list]]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), allow_grid)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ZoomSettings:
    """A prepended segment with learning rate ``eta / factor`` for ``factor * span`` steps."""

    factor: int = 0  # 0 disables
    span: int = 2
    every: int = 10

    @property
    def enabled(self) -> bool:
        return self.factor > 0


@dataclass(frozen=True)
class RunManifest:
    data: DataConfig
    model: ModelConfig
    optimizer: OptimizerSpec
    iters: int
    cadence: Cadence = Cadence()
    zoom: ZoomSettings = ZoomSettings()
    test_every: int = 100
    n_test: int = 500
    joint_head: bool = False
    experiment: str = "run"
    tool_version: str = __version__
    out_dir: str = field(default="", compare=False)
    wall_clock: dict = field(default_factory=dict, compare=False)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.optimizer.validate()
        if self.model.d != self.data.d or self.model.L != self.data.L:
            raise ConfigError(f"model (d={self.model.d}, L={self.model.L}) does not match data (d={self.data.d}, L={self.data.L})")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if self.cadence.every < 1 or self.zoom.every < 1:
            raise ConfigError("probe cadence must be >= 1")

    def deterministic_dict(self) -> dict:
        """Everything that determines the run's outputs (no output path, no timings)."""
        return {
            "experiment": self.experiment,
            "data": asdict(self.data),
            "model": asdict(self.model),
            "optimizer": asdict(self.optimizer),
            "iters": self.iters,
            "cadence": asdict(self.cadence),
            "zoom": asdict(self.zoom),
            "test_every": self.test_every,
            "n_test": self.n_test,
            "joint_head": self.joint_head,
            "tool_version": self.tool_version,
        }

    def to_dict(self) -> dict:
        return {**self.deterministic_dict(), "out_dir": self.out_dir, "wall_clock": self.wall_clock}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            data=DataConfig(**d["data"]),
            model=ModelConfig(**d["model"]),
            optimizer=OptimizerSpec(**d["optimizer"]),
            iters=d["iters"],
            cadence=Cadence(**d["cadence"]),
            zoom=ZoomSettings(**d["zoom"]),
            test_every=d["test_every"],
            n_test=d["n_test"],
            joint_head=d["joint_head"],
            experiment=d["experiment"],
            tool_version=d["tool_version"],
            out_dir=d.get("out_dir", ""),
            wall_clock=d.get("wall_clock", {}),
        )

    def to_config_text(self) -> str:
        """Flat key/value form accepted by :func:`manifest_from_values`."""
        vals = {
            "experiment": self.experiment,
            **{k: v for k, v in asdict(self.data).items()},
            "m_k": self.model.m_k, "m_v": self.model.m_v, "sigma_0": self.model.sigma_0,
            "init_seed": self.model.init_seed, "joint_head": self.joint_head,
            "optimizer": self.optimizer.kind, "eta": self.optimizer.eta, "beta1": self.optimizer.beta1,
            "beta2": self.optimizer.beta2, "epsilon": self.optimizer.epsilon,
            "bias_correction": self.optimizer.bias_correction,
            "iters": self.iters, "dense_until": self.cadence.dense_until, "probe_every": self.cadence.every,
            "zoom": self.zoom.factor, "zoom_span": self.zoom.span, "zoom_every": self.zoom.every,
            "test_every": self.test_every, "n_test": self.n_test,
        }  # fmt: skip
        lines = []
        for k, v in vals.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def manifest_from_values(values: dict[str, Any], require_model: bool = True) -> RunManifest:
    """Build a manifest from parsed config values, filling documented defaults."""
    missing = [k for k in DATA_REQUIRED + (MODEL_REQUIRED if require_model else ()) if k not in values]
    if missing:
        raise ConfigFileError(f"missing required field {missing[0]!r}", key=missing[0])
    v = values
    seed = v.get("seed", 0)
    data = DataConfig(
        d=v["d"], s=v["s"], n=v["n"], L=v.get("L", 2), sigma_p=v["sigma_p"],
        orthogonal=v.get("orthogonal", True), seed=seed,
    )  # fmt: skip
    model = ModelConfig(
        d=v["d"], m_k=v.get("m_k", 1), m_v=v.get("m_v", 1), L=v.get("L", 2),
        sigma_0=v.get("sigma_0", 0.0), init_seed=v.get("init_seed", seed),
    )  # fmt: skip
    kind = v.get("optimizer", "signgd")
    if kind == "adam":
        opt = OptimizerSpec.adam(
            eta=v.get("eta", 1e-4), beta1=v.get("beta1", 0.9), beta2=v.get("beta2", 0.999),
            epsilon=v.get("epsilon", 1e-15), bias_correction=v.get("bias_correction", True),
        )  # fmt: skip
    else:
        opt = OptimizerSpec(
            kind, v.get("eta", 1e-4), v.get("beta1", 0.0), v.get("beta2", 0.0), v.get("epsilon", 0.0),
            v.get("bias_correction", True),
        )  # fmt: skip
    m = RunManifest(
        data=data, model=model, optimizer=opt, iters=v.get("iters", 2000),
        cadence=Cadence(v.get("dense_until", 50), v.get("probe_every", 10)),
        zoom=ZoomSettings(v.get("zoom", 0), v.get("zoom_span", 2), v.get("zoom_every", 10)),
        test_every=v.get("test_every", 100), n_test=v.get("n_test", 500),
        joint_head=v.get("joint_head", False), experiment=v.get("experiment", "run"),
    )  # fmt: skip
    try:
        if require_model:
            m.validate()
        else:
            m.data.validate()
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc
    return m


def row_a_values(d: int = 2000, seed: int = 0) -> dict[str, Any]:
    """Config values of setting (a) scaled to dimension ``d``."""
    s = int(round(0.04 * d))
    return {
        "d": d, "n": int(round(0.01 * d)), "s": s, "sigma_p": 2 / math.sqrt(s), "sigma_0": 0.1 / math.sqrt(d),
        "m_k": int(round(0.05 * d)), "m_v": int(round(0.01 * d)), "iters": 2000, "eta": 1e-4, "seed": seed,
    }  # fmt: skip


ROW_A_CONFIG = """\
# setting (a): d = 2000, n = d/100, s = d/25
experiment = row_a
d = 2000
n = 20
s = 80
L = 2
sigma_p = 2/sqrt(s)
orthogonal = true
sigma_0 = 0.1/sqrt(d)
m_k = 100
m_v = 20
optimizer = signgd
eta = 1e-4
iters = 2000
seed = 0
"""


# ---------------------------------------------------------------------------
# trace files


@dataclass
class TraceFile:
    manifest: RunManifest
    constants: dict
    snapshots: list
    end: dict | None = None

    @property
    def complete(self) -> bool:
        return self.end is not None

    @property
    def xi_l1(self) -> np.ndarray:
        return np.asarray(self.constants["xi_l1"])

    @property
    def noise_index(self) -> np.ndarray:
        return np.asarray(self.constants["noise_index"])


def _dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def write_trace(path: str | Path, manifest: RunManifest, constants: dict, snapshots: Sequence[ProbeSnapshot], end: dict) -> None:
    ts = [s.t for s in snapshots]
    if any(not b > a for a, b in zip(ts, ts[1:])):
        raise TraceFormatError("snapshots must be strictly increasing in t")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"type": "manifest", "format": TRACE_FORMAT, "manifest": manifest.deterministic_dict()}) + "\n")
        fh.write(_dumps({"type": "constants", **constants}) + "\n")
        for s in snapshots:
            fh.write(_dumps({"type": "snapshot", **s.to_dict()}) + "\n")
        fh.write(_dumps({"type": "end", "snapshots": len(snapshots), **end}) + "\n")


def read_trace(path: str | Path) -> TraceFile:
    """Parse a trace; a missing end marker yields ``complete == False`` rather than an error."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        recs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError:
        # a torn final line is a truncated trace; anything earlier is corruption
        try:
            recs = [json.loads(ln) for ln in lines[:-1]]
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}: malformed JSON ({exc})") from exc
    if not recs or recs[0].get("type") != "manifest" or recs[0].get("format") != TRACE_FORMAT:
        raise TraceFormatError(f"{path}: first line is not a {TRACE_FORMAT} manifest")
    manifest = RunManifest.from_dict(recs[0]["manifest"])
    constants = {}
    snaps = []
    end = None
    for rec in recs[1:]:
        kind = rec.pop("type", None)
        if kind == "constants":
            constants = rec
        elif kind == "snapshot":
            snaps.append(ProbeSnapshot.from_dict(rec))
        elif kind == "end":
            end = rec
        else:
            raise TraceFormatError(f"{path}: unknown record type {kind!r}")
    return TraceFile(manifest, constants, snaps, end)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    manifest: RunManifest
    trace: TraceFile
    params: Params
    head: np.ndarray | None
    seconds: float


def _predict(manifest: RunManifest, beta: BetaStats) -> tuple[PredictedTimes | None, str | None]:
    try:
        return predicted_times(manifest.data, manifest.model, manifest.optimizer.eta, beta), None
    except RegimeError as exc:
        return None, str(exc)


def run_constants(manifest: RunManifest, dataset: Dataset, params0: Params) -> dict:
    beta = beta_stats(params0, dataset)
    pred, regime = _predict(manifest, beta)
    return {
        "rng": RNG_ALGORITHM,
        "xi_l1": xi_l1_norms(dataset).tolist(),
        "noise_index": dataset.noise_index.tolist(),
        "signal_index": dataset.signal_index.tolist(),
        "y": dataset.y.tolist(),
        "beta": asdict(beta),
        "predicted": None if pred is None else pred.to_dict(),
        "regime_error": regime,
    }


def execute_run(
    manifest: RunManifest,
    out_dir: str | Path | None = None,
    dataset: Dataset | None = None,
) -> RunResult:
    """Train per the manifest; optionally write ``trace.jsonl``, ``params.bin``, ``manifest.json``, ``summary.json``."""
    manifest.validate()
    started = time.time()
    ds = dataset if dataset is not None else generate_dataset(manifest.data)
    params0 = init_params(manifest.model)
    head0 = default_head(manifest.model.m_v) if manifest.joint_head else None
    test_set = fresh_samples(manifest.data, manifest.n_test) if manifest.n_test > 0 else None
    spec = manifest.optimizer
    snaps: list[ProbeSnapshot] = []

    zoom = manifest.zoom
    if zoom.enabled:
        micro = replace(spec, eta=spec.eta / zoom.factor)
        res = run_training(
            params0, ds, micro, zoom.factor * zoom.span, Cadence(0, zoom.every),
            make_probe(zoom=zoom.factor, segment="zoom"), head=head0,
        )  # fmt: skip
        snaps.extend(s for s in res.trace if s.t < zoom.span)
    main = run_training(
        params0, ds, spec, manifest.iters, manifest.cadence,
        make_probe(test_set, manifest.test_every, final_step=manifest.iters), head=head0,
    )  # fmt: skip
    start_t = zoom.span if zoom.enabled else 0
    snaps.extend(s for s in main.trace if s.t >= start_t)

    end = {"final_train_loss": float(main.losses[-1])}
    if test_set is not None:
        fc = forward(main.params, test_set, main.head)
        end.update(final_test_loss=float(fc.loss.mean()), final_zero_one=float(np.mean(fc.margin <= 0)), n_test=manifest.n_test)
    constants = run_constants(manifest, ds, params0)
    trace = TraceFile(manifest, constants, snaps, end)
    seconds = time.time() - started
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace(out / "trace.jsonl", manifest, constants, snaps, end)
        save_params(main.params, manifest.model, out / "params.bin")
        if main.head is not None:
            np.save(out / "head.npy", main.head)
        stamped = replace(manifest, out_dir=str(out), wall_clock={"started": started, "seconds": seconds})
        (out / "manifest.json").write_text(json.dumps(stamped.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(end, indent=2) + "\n", encoding="utf-8")
    return RunResult(manifest, trace, main.params, main.head, seconds)


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerifyResult:
    stages: StageReport | None
    convergence: Verdict
    generalization: Verdict
    sparsity: Verdict
    notes: list = field(default_factory=list)

    @property
    def verdicts(self) -> dict[str, Verdict]:
        out = {}
        if self.stages is not None:
            out.update(self.stages.verdicts)
        out.update(convergence=self.convergence, generalization=self.generalization, attention_sparsity=self.sparsity)
        return out

    @property
    def status(self) -> str:
        states = [v.status for v in self.verdicts.values()]
        if INCONCLUSIVE in states:
            return INCONCLUSIVE
        if FAIL in states:
            return FAIL
        return PASS

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "stages": None if self.stages is None else self.stages.to_dict(),
            "convergence": self.convergence.to_dict(),
            "generalization": self.generalization.to_dict(),
            "attention_sparsity": self.sparsity.to_dict(),
            "notes": self.notes,
        }

    def text(self) -> str:
        parts = []
        if self.stages is not None:
            parts.append(self.stages.text())
        parts.append("")
        for name in ("convergence", "generalization", "attention_sparsity"):
            parts.append(f"{name:<20} {self.verdicts[name].status}")
        parts.extend(f"note: {n}" for n in self.notes)
        parts.append(f"overall: {self.status}")
        return "\n".join(parts)


def verify_trace(
    tf: TraceFile,
    stage_times: dict | None = None,
    epsilon: float = 0.01,
    flip_reference: float | None = None,
) -> VerifyResult:
    """Run every applicable verifier on a trace. Raises :class:`RegimeError` for SignGD runs outside the regime."""
    m = tf.manifest
    snaps = tf.snapshots
    notes = []
    pred = None if tf.constants.get("predicted") is None else _predicted_from_dict(tf.constants["predicted"])
    stages = None
    if m.optimizer.kind == "signgd":
        if pred is None:
            raise RegimeError(tf.constants.get("regime_error") or "predicted times unavailable")
        stages = verify_stage_predicates(
            snaps, pred, m.optimizer.eta, tf.xi_l1, stage_times=stage_times, flip_reference=flip_reference
        )
    else:
        notes.append(f"stage predicates not applicable to optimizer {m.optimizer.kind!r}")
    T4 = pred.T4 if pred is not None else None
    if snaps:
        conv = verify_convergence(snaps, epsilon, m.optimizer.eta, m.data.sigma_p, m.data.s, T4)
        sparsity = verify_attention_sparsity(snaps)
    else:
        conv = sparsity = Verdict(INCONCLUSIVE, {"reason": "empty trace"})
    if tf.end is not None and "final_test_loss" in tf.end:
        gen = generalization_verdict(tf.end["final_test_loss"], tf.end["final_zero_one"], tf.end["n_test"])
    else:
        gen = Verdict(NOT_APPLICABLE, {"reason": "no test loss recorded"})
    if not tf.complete:
        notes.append("trace has no end marker (truncated)")
    return VerifyResult(stages, conv, gen, sparsity, notes)


def _predicted_from_dict(d: dict) -> PredictedTimes:
    kw = {f.name: d[f.name] for f in fields(PredictedTimes)}
    kw["vacuous"] = tuple(kw["vacuous"])
    return PredictedTimes(**kw)


# ---------------------------------------------------------------------------
# sweeps

SUMMARY_COLUMNS = [
    "run_id", "seed", "grid", "optimizer", "eta", "beta1", "beta2", "iters", "status", "error",
    "final_train_loss", "final_test_loss", "final_zero_one",
    "t_stage1_end", "t_qk_aligned", "t_signal_departure", "t_s21_decayed",
    "t_key_flip", "t_query_flip", "t_final_aligned",
    "stageI", "stageII", "stageIII", "stageIV", "convergence", "generalization", "attention_sparsity",
    "mixed_fraction_t10", "opp_pairs", "opp_plus",
]  # fmt: skip


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass(frozen=True)
class SweepPlan:
    base: dict
    grid: dict

    def runs(self) -> list[tuple[str, dict, dict]]:
        """(run_id, overrides, values) for every grid point; any empty axis gives no runs."""
        keys = list(self.grid)
        out = []
        for k, combo in enumerate(itertools.product(*(self.grid[key] for key in keys))):
            overrides = dict(zip(keys, combo))
            vals = {**self.base, **overrides}
            if "seed" in overrides and "init_seed" not in overrides:
                vals["init_seed"] = overrides["seed"]
            out.append((f"run_{k:04d}", overrides, vals))
        return out


def read_sweep_file(path: str | Path) -> SweepPlan:
    base, grid = read_config_file(path, allow_grid=True)
    return SweepPlan(base, grid)


def summarize_run(run_id: str, overrides: dict, result: RunResult | None, error: str | None = None) -> dict:
    row = {c: None for c in SUMMARY_COLUMNS}
    row["run_id"] = run_id
    row["grid"] = ";".join(f"{k}={format_cell(v)}" for k, v in overrides.items() if k != "seed")
    row["seed"] = overrides.get("seed")
    if result is None:
        row.update(status="error", error=error)
        return row
    m, tf = result.manifest, result.trace
    row.update(
        seed=m.data.seed, optimizer=m.optimizer.kind, eta=m.optimizer.eta, beta1=m.optimizer.beta1,
        beta2=m.optimizer.beta2, iters=m.iters, status="ok",
    )  # fmt: skip
    if tf.end:
        row.update(
            final_train_loss=tf.end.get("final_train_loss"), final_test_loss=tf.end.get("final_test_loss"),
            final_zero_one=tf.end.get("final_zero_one"),
        )  # fmt: skip
    snaps = tf.snapshots
    trans = detect_transitions(snaps, m.optimizer.eta, tf.xi_l1)
    for k, v in trans.to_dict().items():
        if k in row:
            row[k] = v
    s10 = at_or_after(snaps, 10)
    if s10 is not None and snaps:
        row["mixed_fraction_t10"] = sign_table(snaps[0], s10).mixed_fraction
    pred = tf.constants.get("predicted")
    if pred is not None and snaps:
        st = at_or_after(snaps, round(pred["T2_sgn"]))
        if st is not None:
            row["opp_plus"], row["opp_pairs"] = opposite_pair_resolution(snaps[0], st)
    try:
        vr = verify_trace(tf)
        for k, v in vr.verdicts.items():
            if k in row:
                row[k] = v.status
    except RegimeError as exc:
        row["error"] = f"regime: {exc}"
    return row


def _sweep_worker(job) -> dict:
    run_id, overrides, values, out_root = job
    try:
        m = manifest_from_values(values)
        out = None if out_root is None else Path(out_root) / run_id
        res = execute_run(m, out)
        return summarize_run(run_id, overrides, res)
    except Exception as exc:  # recorded per row; the sweep keeps going
        return summarize_run(run_id, overrides, None, f"{type(exc).__name__}: {exc}")


def run_sweep(plan: SweepPlan, out_root: str | Path | None, jobs: int = 1) -> list[dict]:
    runs = [(rid, ov, vals, None if out_root is None else str(out_root)) for rid, ov, vals in plan.runs()]
    if jobs <= 1 or len(runs) <= 1:
        rows = [_sweep_worker(r) for r in runs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_worker, runs))
    if out_root is not None:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        with open(Path(out_root) / "summary.csv", "w", encoding="utf-8", newline="") as fh:
            write_summary(rows, fh)
    return rows


def write_summary(rows: Iterable[dict], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([format_cell(r.get(c)) for c in SUMMARY_COLUMNS])


def read_summary(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# reports

_CLASS_LABELS = ("K+,Q+", "K+,Q-", "K-,Q+", "K-,Q-")


def sign_table_markdown(snap_ref: ProbeSnapshot, snap_t: ProbeSnapshot) -> str:
    """Rows: sign class at the reference time; columns: class at the later time."""
    tab = sign_table(snap_ref, snap_t)
    tr, tt = f"{snap_ref.t:g}", f"{snap_t.t:g}"
    head = "| | " + " | ".join(f"S_{{{c}}}^({tt})" for c in _CLASS_LABELS) + " | total |"
    lines = [head, "|" + "---|" * 6]
    for k, c in enumerate(_CLASS_LABELS):
        row = " | ".join(str(int(x)) for x in tab.counts[k])
        lines.append(f"| S_{{{c}}}^({tr}) | {row} | {int(tab.row_totals[k])} |")
    cols = " | ".join(str(int(x)) for x in tab.column_totals)
    lines.append(f"| total | {cols} | {int(tab.counts.sum())} |")
    if tab.degenerate:
        lines.append(f"\n{tab.degenerate} pairs with an exact zero excluded")
    return "\n".join(lines)


def sign_table_csv(snap_ref: ProbeSnapshot, snap_t: ProbeSnapshot) -> str:
    tab = sign_table(snap_ref, snap_t)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_at_%g" % snap_ref.t, *SIGN_CLASSES, "total"])
    for k, c in enumerate(SIGN_CLASSES):
        w.writerow([c, *map(int, tab.counts[k]), int(tab.row_totals[k])])
    w.writerow(["total", *map(int, tab.column_totals), int(tab.counts.sum())])
    return buf.getvalue()


def loss_csv(snaps: Sequence[ProbeSnapshot]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "train_loss", "test_loss"])
    for s in snaps:
        w.writerow([format_cell(float(s.t)), format_cell(s.train_loss), format_cell(s.test_loss)])
    return buf.getvalue()


_STAGE_ROWS = (
    ("I", "value noise grows linearly; mean value signal negligible", "T1", "t_stage1_end"),
    ("II", "query and key noise align their signs", "T2_sgn", "t_qk_aligned"),
    ("III", "signals follow the majority vote of the noise", "T3", "t_signal_departure"),
    ("IV", "noise-signal softmax decays; negative noise flips", "T4", "t_final_aligned"),
)


def stage_timeline(tf: TraceFile, fmt: str = "md", flip_reference: float = 40.0) -> str:
    pred = tf.constants.get("predicted") or {}
    trans = detect_transitions(tf.snapshots, tf.manifest.optimizer.eta, tf.xi_l1, flip_reference=flip_reference).to_dict()
    rows = []
    for stage, desc, pkey, mkey in _STAGE_ROWS:
        p, mval = pred.get(pkey), trans.get(mkey)
        rows.append((stage, desc, pkey, "" if p is None else format(p, ".4g"), mkey, "absent" if mval is None else format(mval, "g")))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "behaviour", "predicted_name", "predicted", "measured_name", "measured"])
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| stage | behaviour | predicted | measured |", "|---|---|---|---|"]
    for stage, desc, pkey, p, mkey, mval in rows:
        lines.append(f"| {stage} | {desc} | {pkey} = {p or '-'} | {mkey} = {mval} |")
    extra = (
        f"\nkey/query noise flip (median crossing after t={flip_reference:g}): "
        f"{trans['t_key_flip']} / {trans['t_query_flip']}"
    )
    return "\n".join(lines) + extra


def summary_report(rows: Sequence[dict], fmt: str = "md") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        write_summary(rows, buf)
        return buf.getvalue()
    cols = ["run_id", "seed", "grid", "status", "final_train_loss", "final_test_loss", "mixed_fraction_t10", "stageII", "stageIII"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_short(r.get(c)) for c in cols) + " |")
    plus = sum(int(r["opp_plus"]) for r in rows if r.get("opp_plus") not in (None, ""))
    pairs = sum(int(r["opp_pairs"]) for r in rows if r.get("opp_pairs") not in (None, ""))
    if pairs:
        chk = binomial_half_test(plus, pairs)
        lines.append(
            f"\ninitially opposite pairs resolving to +: {plus}/{pairs} = {chk.fraction:.4f} "
            f"(z = {chk.z:.2f}, {'within' if chk.passed else 'outside'} 3 standard errors of 1/2)"
        )
    return "\n".join(lines)


def _short(v) -> str:
    if v in (None, ""):
        return ""
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    return f"{f:.4g}"


def write_report(kind: str, path: str | Path, fmt: str, out_dir: str | Path | None, t_ref: float = 0, t: float = 10) -> dict[str, str]:
    """Render the report files for a trace or a sweep summary; returns name -> text."""
    outputs: dict[str, str] = {}
    if kind == "summary":
        outputs[f"summary.{fmt}"] = summary_report(read_summary(path), fmt)
    else:
        tf = read_trace(path)
        a, b = at_or_after(tf.snapshots, t_ref), at_or_after(tf.snapshots, t)
        if a is not None and b is not None:
            outputs[f"sign_table.{fmt}"] = sign_table_markdown(a, b) if fmt == "md" else sign_table_csv(a, b)
        outputs["loss.csv"] = loss_csv(tf.snapshots)
        outputs[f"stages.{fmt}"] = stage_timeline(tf, fmt)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            (Path(out_dir) / name).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return outputs


def detect_input_kind(path: str | Path) -> str:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("{"):
        return "trace"
    if first.startswith("run_id"):
        return "summary"
    raise TraceFormatError(f"{path}: neither a trace nor a sweep summary")


def cpu_count() -> int:
    return os.cpu_count() or 1


def load_dataset_for(manifest: RunManifest, path: str | Path) -> Dataset:
    ds = load_dataset(path)
    if ds.config.d != manifest.data.d or ds.config.L != manifest.data.L:
        raise ConfigError(f"dataset {path} (d={ds.config.d}, L={ds.config.L}) does not match the manifest")
    return ds
