"""Command line: ``signgd-attn generate | train | verify | sweep | report``.

Exit codes: 0 ok, 1 verification failed, 2 config error, 3 I/O error,
4 non-finite numbers, 5 outside the low-SNR regime, 6 inconclusive.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import ConfigError, generate_dataset, save_dataset, supports_disjoint
from .harness import (
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_INCONCLUSIVE,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_REGIME,
    TraceFormatError,
    ZoomSettings,
    detect_input_kind,
    execute_run,
    load_dataset_for,
    manifest_from_values,
    read_config_file,
    read_sweep_file,
    read_trace,
    run_sweep,
    verify_trace,
    write_report,
)
from .optim import Cadence, NumericalError
from .theory import FAIL, INCONCLUSIVE, RegimeError, predicted_times
from .probes import beta_stats
from .transformer import init_params

log = logging.getLogger("signgd_attn")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _apply_seed(values: dict, seed: int | None) -> dict:
    if seed is None:
        return values
    return {**values, "seed": seed, "init_seed": seed}


def _parse_cadence(text: str) -> Cadence:
    """``N`` (every N steps after the default dense window) or ``D,N``."""
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"--probe-cadence: expected N or D,N, got {text!r}") from None
    if len(parts) == 1:
        return Cadence(Cadence().dense_until, parts[0])
    if len(parts) == 2:
        return Cadence(parts[0], parts[1])
    raise ConfigError(f"--probe-cadence: expected N or D,N, got {text!r}")


def _parse_stage_times(text: str | None) -> dict | None:
    if not text:
        return None
    out = {}
    for item in text.split(","):
        key, _, val = item.partition("=")
        if key.strip() not in ("T2_sgn", "T3"):
            raise ConfigError(f"--stage-times: unknown key {key!r} (use T2_sgn, T3)")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"--stage-times: bad value in {item!r}") from None
    return out


def cmd_generate(args) -> int:
    values, _ = read_config_file(args.config)
    m = manifest_from_values(_apply_seed(values, args.seed), require_model=False)
    ds = generate_dataset(m.data)
    save_dataset(ds, args.out)
    _say(args, f"n = {m.data.n}, s = {m.data.s}, d = {m.data.d}, L = {m.data.L}")
    _say(args, f"supports disjoint: {'true' if supports_disjoint(ds) else 'false'}")
    return EXIT_OK


def cmd_train(args) -> int:
    values, _ = read_config_file(args.config)
    values = _apply_seed(values, args.seed)
    for key, attr in (("iters", "iters"), ("eta", "eta"), ("beta1", "beta1"), ("beta2", "beta2"), ("epsilon", "eps")):
        if getattr(args, attr) is not None:
            values[key] = getattr(args, attr)
    if args.optimizer:
        values["optimizer"] = args.optimizer
    if args.no_bias_correction:
        values["bias_correction"] = False
    if args.joint_head:
        values["joint_head"] = True
    m = manifest_from_values(values)
    if args.probe_cadence:
        m = replace(m, cadence=_parse_cadence(args.probe_cadence))
    if args.zoom is not None:
        m = replace(m, zoom=ZoomSettings(args.zoom, m.zoom.span, m.zoom.every))
    dataset = None
    if args.dataset:
        dataset = load_dataset_for(m, args.dataset)
        m = replace(m, data=dataset.config)
    if m.optimizer.kind == "signgd" and not args.no_theory:
        ds = dataset if dataset is not None else generate_dataset(m.data)
        predicted_times(m.data, m.model, m.optimizer.eta, beta_stats(init_params(m.model), ds))
    res = execute_run(m, args.out, dataset)
    end = res.trace.end
    _say(args, f"final training loss L_S = {end['final_train_loss']:.6g}")
    if "final_test_loss" in end:
        _say(args, f"final test loss L_D = {end['final_test_loss']:.6g} (0-1: {end['final_zero_one']:.4g}, n_test = {end['n_test']})")
    _say(args, f"wrote {Path(args.out) / 'trace.jsonl'} ({len(res.trace.snapshots)} snapshots, {res.seconds:.1f} s)")
    return EXIT_OK


def cmd_verify(args) -> int:
    tf = read_trace(args.trace)
    if not tf.complete:
        _say(args, "trace is truncated (no end marker): inconclusive")
        return EXIT_INCONCLUSIVE
    res = verify_trace(tf, _parse_stage_times(args.stage_times), args.epsilon, args.flip_reference)
    text = res.text()
    if args.report:
        base = Path(args.report)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(json.dumps(res.to_dict(), indent=2) + "\n", encoding="utf-8")
        base.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    _say(args, text)
    if res.status == INCONCLUSIVE:
        return EXIT_INCONCLUSIVE
    return EXIT_FAIL if res.status == FAIL else EXIT_OK


def cmd_sweep(args) -> int:
    plan = read_sweep_file(args.sweep)
    if args.seed is not None:
        plan = replace(plan, base=_apply_seed(plan.base, args.seed))
    rows = run_sweep(plan, args.out, args.jobs)
    errors = [r for r in rows if r["status"] == "error"]
    _say(args, f"{len(rows)} runs, {len(errors)} errors; summary at {Path(args.out) / 'summary.csv'}")
    for r in errors:
        _say(args, f"  {r['run_id']}: {r['error']}")
    return EXIT_FAIL if errors else EXIT_OK


def cmd_report(args) -> int:
    kind = detect_input_kind(args.input)
    outputs = write_report(kind, args.input, args.format, args.out, args.t_ref, args.t)
    if args.out is None or not args.quiet:
        for name, text in outputs.items():
            if args.out is None:
                print(f"## {name}\n{text}")
            else:
                print(f"wrote {Path(args.out) / name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override data and init seed")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="signgd-attn", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override data and init seed")
    p.add_argument("--quiet", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a dataset file")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train and write a trace")
    t.add_argument("config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--optimizer", choices=["signgd", "gd", "gd_momentum", "adam"])
    t.add_argument("--iters", type=int)
    t.add_argument("--eta", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--eps", type=float)
    t.add_argument("--no-bias-correction", action="store_true")
    t.add_argument("--joint-head", action="store_true", help="also train the linear head")
    t.add_argument("--probe-cadence", help="N or D,N: every step up to D, then every N")
    t.add_argument("--zoom", type=int, help="prepend a segment with eta/ZOOM for ZOOM*2 steps")
    t.add_argument("--dataset", help="use a dataset file instead of generating")
    t.add_argument("--no-theory", action="store_true", help="skip the regime check")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", parents=[common], help="check stage predicates on a trace")
    v.add_argument("trace")
    v.add_argument("--report", help="write REPORT.json and REPORT.txt")
    v.add_argument("--stage-times", help="override check times, e.g. T2_sgn=10,T3=40")
    v.add_argument("--epsilon", type=float, default=0.01)
    v.add_argument("--flip-reference", type=float, help="time at which negative noise is classified")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", parents=[common], help="run a grid of manifests")
    s.add_argument("sweep")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", parents=[common], help="tables from a trace or sweep summary")
    r.add_argument("input")
    r.add_argument("--format", choices=["md", "csv"], default="md")
    r.add_argument("--out", help="output directory (default: stdout)")
    r.add_argument("--t-ref", type=float, default=0.0)
    r.add_argument("--t", type=float, default=10.0)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TraceFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error at iteration {exc.iteration} in {exc.tensor}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RegimeError as exc:
        print(f"regime error: {exc}", file=sys.stderr)
        return EXIT_REGIME


if __name__ == "__main__":
    sys.exit(main())
