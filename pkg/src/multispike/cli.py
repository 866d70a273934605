"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (one-line cause on stderr),
2 configuration or usage error.  Every command's CSV output is a pure
function of (config, seed).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import bptt, config as config_mod, experiments
from .dynamics import SpikeMode
from .errors import ConfigError, EngineError


def _common_flags(sub):
    sub.add_argument("--config", metavar="PATH",
                     help="JSON experiment config")
    sub.add_argument("--seed", type=int, metavar="N",
                     help="override train seed (init seed becomes N + 1000)")
    sub.add_argument("--out", default=".", metavar="DIR",
                     help="directory for CSV and checkpoint output")
    sub.add_argument("--threads", type=int, default=1, metavar="N",
                     help="worker processes for sweep cells (default 1)")


def _load_config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg = config_mod.apply_seed_override(cfg, args.seed)
    return cfg


def _parse_drive(text: str, steps):
    """Drive schedule: a JSON number (needs --steps), JSON list, or @file."""
    if text.startswith("@"):
        try:
            with open(text[1:], "r", encoding="utf-8") as fh:
                value = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read drive schedule {text[1:]}: {exc}")
    else:
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"drive must be JSON (number or list): {exc}")
    if isinstance(value, (int, float)):
        if not steps:
            raise ConfigError("a constant drive needs --steps")
        return [float(value)] * steps
    if isinstance(value, list) and value and \
            all(isinstance(x, (int, float)) for x in value):
        return [float(x) for x in value]
    raise ConfigError("drive must be a number or a non-empty list of numbers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multispike",
        description="Train and probe multi-spike networks on event data.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model from a config")
    _common_flags(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the rolling checkpoint")

    p = subs.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common_flags(p)
    p.add_argument("--checkpoint", metavar="PATH",
                   help="checkpoint file (default: the config's output path)")

    p = subs.add_parser("sweep-dt",
                        help="train one model per (step length, pattern) cell")
    _common_flags(p)
    p.add_argument("--dt-list", default="1,2,4,8", metavar="MS,MS,...",
                   help="comma-separated step lengths in ms (default 1,2,4,8)")

    p = subs.add_parser("compare-sfa",
                        help="twin run: adaptive vs non-adaptive spiking")
    _common_flags(p)

    p = subs.add_parser("compare-plasticity",
                        help="twin run: trainable vs frozen synapse kernels")
    _common_flags(p)

    p = subs.add_parser("trace-neuron",
                        help="step a single neuron and dump its trace CSV")
    p.add_argument("--mode", choices=[m.value for m in SpikeMode],
                   default="sfa")
    p.add_argument("--v-threshold", type=float, default=1.0)
    p.add_argument("--tau-decay", type=float, default=0.7)
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--drive", required=True, metavar="JSON|@FILE",
                   help="per-step input current: number, list, or @file")
    p.add_argument("--steps", type=int,
                   help="length of a constant drive schedule")
    p.add_argument("--kernel", metavar="A,B,DELAY",
                   help="attach a response kernel to the output column")
    p.add_argument("--out", default="trace.csv", metavar="PATH",
                   help="trace CSV path (default trace.csv)")

    p = subs.add_parser("gradcheck",
                        help="finite-difference check on random micro-networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nets", type=int, default=10,
                   help="micro-networks per mode (default 10)")

    p = subs.add_parser("convert-check",
                        help="validate event files or dataset directories")
    p.add_argument("paths", nargs="+", metavar="PATH")
    p.add_argument("--format", choices=["portable", "aer"], default="portable")
    p.add_argument("--split-polarity", action="store_true",
                   help="keep raw-sensor polarities as separate units")
    return parser


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    rows = experiments.run_train(cfg, out_dir=args.out, resume=args.resume)
    err = experiments.final_test_error(rows)
    print(f"final test error_rate {err:.4f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    err, loss_val = experiments.run_eval(cfg, out_dir=args.out,
                                         checkpoint_path=args.checkpoint)
    print(f"test error_rate {err:.4f} loss {loss_val:.6f}")
    return 0


def _cmd_sweep_dt(args) -> int:
    cfg = _load_config(args)
    try:
        dt_list = [float(x) for x in args.dt_list.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --dt-list: {exc}")
    results, path = experiments.sweep_dt(cfg, dt_list, out_dir=args.out,
                                         threads=args.threads)
    for dt, pattern, err in results:
        print(f"dt={dt:g}ms pattern={pattern} final_error={err:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_compare_sfa(args) -> int:
    cfg = _load_config(args)
    summary, path = experiments.compare_sfa(cfg, out_dir=args.out)
    print(f"adaptive:     error {summary['sfa_error']:.4f} "
          f"spikes/sample {summary['sfa_spikes']:.1f}")
    print(f"non-adaptive: error {summary['linear_error']:.4f} "
          f"spikes/sample {summary['linear_spikes']:.1f}")
    print(f"spike ratio (non-adaptive / adaptive): "
          f"{summary['spike_ratio']:.3f}")
    print(f"wrote {path}")
    return 0


def _cmd_compare_plasticity(args) -> int:
    cfg = _load_config(args)
    summary, path = experiments.compare_plasticity(cfg, out_dir=args.out)
    for variant in ("trainable", "frozen"):
        s = summary[variant]
        print(f"{variant}: half-budget loss {s['half_loss']:.6f}, "
              f"final loss {s['final_loss']:.6f}, "
              f"final error {s['final_error']:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_trace_neuron(args) -> int:
    drive = _parse_drive(args.drive, args.steps)
    kernel = None
    if args.kernel:
        parts = args.kernel.split(",")
        if len(parts) != 3:
            raise ConfigError("--kernel expects A,B,DELAY")
        try:
            kernel = tuple(float(x) for x in parts)
        except ValueError as exc:
            raise ConfigError(f"bad --kernel: {exc}")
    rows = experiments.trace_neuron(SpikeMode(args.mode), args.v_threshold,
                                    args.tau_decay, args.q, args.dt, drive,
                                    kernel=kernel)
    experiments.write_trace_csv(rows, args.out)
    total = sum(r["spikes"] for r in rows)
    print(f"traced {len(rows)} steps, total spikes {total:g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = bptt.gradcheck_suite(num_nets=args.nets, seed=args.seed)
    ok = True
    for report in reports:
        print(bptt.format_report(report))
        ok = ok and report.passed
    print("gradcheck PASSED" if ok else "gradcheck FAILED")
    return 0 if ok else 1


def _cmd_convert_check(args) -> int:
    results = experiments.convert_check(
        args.paths, fmt=args.format,
        merge_polarity=not args.split_polarity)
    ok = True
    for path, good, note in results:
        print(f"{'OK  ' if good else 'FAIL'} {path}: {note}")
        ok = ok and good
    return 0 if ok else 1


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-dt": _cmd_sweep_dt,
    "compare-sfa": _cmd_compare_sfa,
    "compare-plasticity": _cmd_compare_plasticity,
    "trace-neuron": _cmd_trace_neuron,
    "gradcheck": _cmd_gradcheck,
    "convert-check": _cmd_convert_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EngineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
