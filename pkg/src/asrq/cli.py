"""Command-line driver: ``asrq <subcommand> [flags]``.

Every subcommand also accepts ``--config file.json`` holding flag values
(keyed by flag name, with dashes or underscores); flags given on the command
line win. Exit codes: 0 success, 1 usage error, 2 data or model error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import container
from .autodiff import NumericError
from .data import toy_batches
from .experiments import AblationConfig, ablation, synthetic_wins
from .int_runtime import compile, forward_int, forward_sim, quantized_from_container, save_quantized
from .model import ToyConfig, build_toy, forward_f, model_from_container, populate_stats, save_model
from .quantizer import QuantConfig, fold_model, make_config
from .reporting import compare, evaluate, greedy_decode, write_report
from .zeroshot import (GenConfig, GenerationError, PipelineError, generate, random_baseline, read_amel,
                       sidecar_for, write_amel)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _classify(exc) -> int:
    if isinstance(exc, PipelineError):
        exc = exc.cause
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NumericError, GenerationError, FloatingPointError, OverflowError)):
        return EXIT_NUMERIC
    return EXIT_DATA


@contextlib.contextmanager
def _stage(stage, path=None):
    try:
        yield
    except CliError:
        raise
    except Exception as exc:
        where = f" {path}" if path is not None else ""
        raise CliError(_classify(exc), f"[{stage}]{where}: {type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# I/O helpers


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_any(path):
    with _stage("load model", path):
        header, tensors = container.read(path)
        if header.get("format") == "quantized":
            return quantized_from_container(header, tensors)
        return model_from_container(header, tensors)


def _load_float(path):
    m = _load_any(path)
    if not hasattr(m, "bn_layers"):
        raise CliError(EXIT_DATA, f"[load model] {path}: expected a float model, got a quantized one")
    return m


def _amel_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.amel")) if p.is_dir() else [p])
    if not files:
        raise CliError(EXIT_DATA, f"[read data] no .amel files found in {[str(p) for p in paths]}")
    return files


def _read_data(paths):
    out = []
    for f in _amel_files(paths):
        with _stage("read data", f):
            out.append(read_amel(f).astype(np.float64))
    return out


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _toy_config(args) -> ToyConfig:
    cfg = ToyConfig(
        mel_bins=args.mel_bins, frames=args.frames, channels=_int_list(args.channels),
        kernel_sizes=_int_list(args.kernel_sizes), separable=args.separable, residual=args.residual,
        attention=args.attention, mlp_hidden=args.mlp_hidden, vocab=None if args.vocab == 0 else args.vocab,
    )
    with _stage("config"):
        cfg.validate()
    return cfg


def _gen_config(args, **extra) -> GenConfig:
    with _stage("config"):
        return GenConfig(batch_size=args.batch_size, num_batches=args.batches, iters=args.iters, lr=args.lr,
                         seed=args.seed, running_sigma=args.running_sigma, **extra)


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_toy(args):
    _need(args, "out")
    model = build_toy(_toy_config(args), seed=args.seed)
    with _stage("write model", args.out):
        save_model(model, args.out)
    print(f"wrote {args.out} ({len(model.layers)} layers)")


def cmd_stats(args):
    _need(args, "model", "out")
    model = _load_float(args.model)
    if args.data:
        data = _read_data(args.data)
    else:
        mel, frames = model.input_shape
        data = toy_batches(args.seed, args.batches, args.batch_size, mel, frames)
    with _stage("populate statistics"):
        model = populate_stats(model, data, momentum=args.momentum)
    with _stage("write model", args.out):
        save_model(model, args.out)
    print(f"wrote {args.out} (statistics from {len(data)} batches)")


def cmd_gensynth(args):
    _need(args, "model", "out_dir")
    model = _load_float(args.model)
    cfg = _gen_config(args)
    with _stage("generate"):
        batches = generate(model, cfg, threads=args.threads)
    out = Path(args.out_dir)
    with _stage("write data", out):
        out.mkdir(parents=True, exist_ok=True)
        for b in batches:
            write_amel(out / f"synth_{b.index:03d}.amel", b.data, sidecar_for(b, cfg))
    ok = [b for b in batches if b.ok]
    print(f"wrote {len(batches)} batches to {out} ({len(ok)} converged); "
          f"mean loss {np.mean([b.initial_loss for b in ok]):.4g} -> {np.mean([b.final_loss for b in ok]):.4g}")


def cmd_calibrate(args):
    _need(args, "model", "out")
    model = _load_float(args.model)
    if args.data:
        data = _read_data(args.data)
    elif args.random:
        mel, frames = model.input_shape
        data = [b.data for b in random_baseline((args.batch_size, mel, frames), *args.random_range,
                                                 seed=args.seed, num_batches=args.batches)]
    else:
        raise UsageError("calibrate: give --data or --random")
    with _stage("fold"):
        folded = fold_model(model)
    with _stage("calibrate"):
        cfg = make_config(folded, data, args.observer, args.weight_bits, args.act_bits)
    with _stage("write config", args.out):
        cfg.save(args.out)
    for w in cfg.meta.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {args.out} (W{args.weight_bits}A{args.act_bits}, {args.observer})")


def cmd_quantize(args):
    _need(args, "model", "qconfig", "out")
    model = _load_float(args.model)
    with _stage("read config", args.qconfig):
        cfg = QuantConfig.load(args.qconfig)
    with _stage("fold"):
        folded = fold_model(model)
    with _stage("compile"):
        qm = compile(folded, cfg)
    with _stage("write model", args.out):
        save_quantized(qm, args.out)
    print(f"wrote {args.out} ({len(qm.layers)} integer layers)")


def cmd_infer(args):
    _need(args, "model", "input")
    model = _load_any(args.model)
    x = _read_data([args.input])[0]
    quantized = not hasattr(model, "bn_layers")
    if args.engine == "integer":
        if not quantized:
            raise CliError(EXIT_DATA, f"[infer] {args.model}: the integer engine needs a quantized model")
        with _stage("infer"):
            logits, trace = forward_int(model, x)
    else:
        if quantized:
            raise CliError(EXIT_DATA, f"[infer] {args.model}: the {args.engine} engine needs a float model")
        if args.engine == "simulated":
            _need(args, "qconfig")
            with _stage("read config", args.qconfig):
                cfg = QuantConfig.load(args.qconfig)
            with _stage("infer"):
                logits = forward_sim(model, cfg, x)
        else:
            with _stage("infer"):
                logits = forward_f(model, x)[0]
    if args.out:
        with _stage("write logits", args.out):
            write_amel(args.out, logits)
    for i, seq in enumerate(greedy_decode(logits)):
        print(f"{i}\t{' '.join(map(str, seq))}")


def cmd_report(args):
    _need(args, "float_model", "data", "out")
    ref = _load_float(args.float_model)
    data = _read_data(args.data)
    with _stage("evaluate", args.float_model):
        recs = [evaluate(Path(args.float_model).stem, ref, ref, data, args.dataset)]
    for path in args.quantized or []:
        qm = _load_any(path)
        if hasattr(qm, "bn_layers"):
            raise CliError(EXIT_DATA, f"[report] {path}: expected a quantized model")
        with _stage("evaluate", path):
            recs.append(evaluate(Path(path).stem, qm, ref, data, args.dataset, qm.weight_bits, qm.act_bits))
    with _stage("compare"):
        rep = compare(*recs)
    with _stage("write report", args.out):
        write_report(rep, args.out)
    for row in rep["rows"]:
        print(f"{row['model']}\tW{row['bits_w']}A{row['bits_a']}\tsize={row['size_bytes']:.0f}B"
              f"\tbops={row['bops']}\tmse={row['mse']:.4g}\ttoken_error={row['token_error']:.4f}")


def cmd_ablate(args):
    _need(args, "out")
    cfg = AblationConfig(
        seeds=_int_list(args.seeds), toy=_toy_config(args), gen=_gen_config(args),
        stats_batches=args.stats_batches, eval_batches=args.eval_batches, observer=args.observer,
    )
    with _stage("ablate"):
        res = ablation(cfg)
    res["synthetic_wins"] = synthetic_wins(res)
    res["config"] = json.loads(json.dumps(asdict(cfg)))
    with _stage("write report", args.out):
        Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True))
    print("bits\tcalibration\tmse\ttoken_error")
    for r in res["summary"]:
        print(f"W{r['bits_w']}A{r['bits_a']}\t{r['calibration']}\t{r['mse_mean']:.4g} +- {r['mse_std']:.2g}"
              f"\t{r['token_error_mean']:.4f}")


# ---------------------------------------------------------------------------
# parser


def _toy_flags(p):
    d = ToyConfig()
    p.add_argument("--mel-bins", type=int, default=d.mel_bins)
    p.add_argument("--frames", type=int, default=d.frames)
    p.add_argument("--channels", type=_int_list, default=d.channels, help="comma-separated widths")
    p.add_argument("--kernel-sizes", type=_int_list, default=d.kernel_sizes)
    p.add_argument("--separable", action="store_true")
    p.add_argument("--residual", action="store_true")
    p.add_argument("--attention", action="store_true")
    p.add_argument("--mlp-hidden", type=int, default=None)
    p.add_argument("--vocab", type=int, default=d.vocab, help="0 drops the output head")


def _gen_flags(p, seed_default=0):
    d = GenConfig()
    p.add_argument("--batches", type=int, default=d.num_batches)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--iters", type=int, default=d.iters)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--running-sigma", choices=("std", "var"), default=d.running_sigma)


def _quant_flags(p):
    p.add_argument("--observer", default="minmax", help="minmax or percentile:<p>")
    p.add_argument("--weight-bits", type=int, default=8)
    p.add_argument("--act-bits", type=int, default=8)


def build_parser():
    parser = _Parser(prog="asrq", description="Integer-only quantization with data-free calibration.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    subs = {}

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of flag values; command-line flags override it")
        p.set_defaults(func=fn)
        subs[name] = p
        return p

    p = add("build-toy", cmd_build_toy, "build a MiniQuartz toy model")
    _toy_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = add("stats", cmd_stats, "populate BatchNorm running statistics")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--data", nargs="+", help=".amel files or directories; default: structured toy data")
    p.add_argument("--batches", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--momentum", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = add("gensynth", cmd_gensynth, "generate synthetic calibration batches")
    p.add_argument("--model")
    p.add_argument("--out-dir")
    _gen_flags(p)
    p.add_argument("--threads", type=int, default=None, help="default: ASRQ_THREADS or all cores")

    p = add("calibrate", cmd_calibrate, "derive a quantization config from calibration data")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--data", nargs="+")
    p.add_argument("--random", action="store_true", help="calibrate on uniform random batches instead")
    p.add_argument("--random-range", type=float, nargs=2, default=(-3.0, 3.0))
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    _quant_flags(p)

    p = add("quantize", cmd_quantize, "fold BatchNorm and compile to an integer model")
    p.add_argument("--model")
    p.add_argument("--qconfig", help="quantization config from 'calibrate'")
    p.add_argument("--out")

    p = add("infer", cmd_infer, "run a model on an .amel input")
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--engine", choices=("integer", "simulated", "float"), default="integer")
    p.add_argument("--qconfig", help="quantization config, for the simulated engine")
    p.add_argument("--out", help="write logits as .amel")

    p = add("report", cmd_report, "compare quantized models against the float model")
    p.add_argument("--float-model")
    p.add_argument("--quantized", nargs="+")
    p.add_argument("--data", nargs="+")
    p.add_argument("--dataset", default="toy")
    p.add_argument("--out", help="report JSON; a CSV mirror is written next to it")

    p = add("ablate", cmd_ablate, "synthetic versus random calibration over several seeds")
    _toy_flags(p)
    _gen_flags(p)
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3))
    p.add_argument("--stats-batches", type=int, default=30)
    p.add_argument("--eval-batches", type=int, default=8)
    p.add_argument("--observer", default="minmax")
    p.add_argument("--out")
    return parser, subs


def parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage() + "asrq: error: a subcommand is required")
    if args.config:
        sp = subs[args.command]
        with _stage("read config", args.config):
            values = json.loads(Path(args.config).read_text())
        if not isinstance(values, dict):
            raise UsageError(f"{args.config}: expected a JSON object of flag values")
        dests = {a.dest for a in sp._actions} - {"help", "config", "func"}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - dests)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys for {args.command}: {unknown}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"asrq: error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return EXIT_OK


def main():
    sys.exit(run())
