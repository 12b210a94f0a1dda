"""Command line entry point.

    minidist run      --strategy ddp --world 2 --epochs 5 --out runs/ddp
    minidist compare  --manifest runs.txt --out runs/cmp
    minidist selftest

Exit codes: 0 success, 1 bad arguments or config, 2 runtime failure.
Flags may also come from a config file of `key = value` lines (keys match
the long flag names); explicit flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ValidationError
from .harness import RunConfig, compare_strategies, run_experiment
from .model import ModelConfig


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract here is 1
    def error(self, message):
        raise _ArgumentError(message)


_CONFIG_KEYS = {
    "strategy": str, "world": int, "epochs": int, "batch": int,
    "seq-len": int, "lr": float, "optimizer": str, "bucket-cap": int,
    "accum": int, "seed": int, "corpus": str, "synthetic-tokens": int,
    "tokenizer": str, "timing": str, "out": str,
    "d-model": int, "n-heads": int, "d-ff": int, "n-layers": int,
    "vocab-size": int, "max-seq-len": int,
}


def read_config_file(path):
    """`key = value` lines; '#' starts a comment; blank lines skipped."""
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return values


def _add_run_flags(p):
    p.add_argument("--config", help="key = value file of defaults for these flags")
    p.add_argument("--strategy", choices=("single", "ddp", "fsdp"))
    p.add_argument("--world", type=int, help="number of simulated workers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="global batch size (sequences)")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--bucket-cap", type=int, help="ddp bucket size in elements")
    p.add_argument("--accum", type=int, help="gradient accumulation steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="text file, csv, or directory of .txt")
    p.add_argument("--synthetic-tokens", type=int)
    p.add_argument("--tokenizer", choices=("bytes", "words"))
    p.add_argument("--timing", choices=("simulated", "wall"))
    p.add_argument("--out", help="directory for metrics.csv and model.ckpt")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-seq-len", type=int)


_FLAG_TO_FIELD = {
    "strategy": "strategy", "world": "world_size", "epochs": "epochs",
    "batch": "global_batch", "seq_len": "seq_len", "lr": "learning_rate",
    "optimizer": "optimizer", "bucket_cap": "bucket_cap", "accum": "accumulation",
    "seed": "seed", "corpus": "corpus", "synthetic_tokens": "synthetic_tokens",
    "tokenizer": "tokenizer", "timing": "timing", "out": "out_dir",
}
_MODEL_FLAGS = ("d_model", "n_heads", "d_ff", "n_layers", "vocab_size", "max_seq_len")


def config_from_values(values):
    """Merged flag dict (underscore keys) -> RunConfig."""
    kwargs = {}
    for flag, fld in _FLAG_TO_FIELD.items():
        if values.get(flag) is not None:
            kwargs[fld] = values[flag]
    model_kwargs = {k: values[k] for k in _MODEL_FLAGS if values.get(k) is not None}
    if model_kwargs:
        kwargs["model"] = ModelConfig(**{
            **{k: getattr(ModelConfig(), k) for k in _MODEL_FLAGS},
            **model_kwargs,
        })
    return RunConfig(**kwargs).validate()


def _merge(args):
    values = {}
    if args.config:
        for key, val in read_config_file(args.config).items():
            values[key.replace("-", "_")] = val
    for flag in list(_FLAG_TO_FIELD) + list(_MODEL_FLAGS):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    return values


def _cmd_run(args):
    config = config_from_values(_merge(args))
    result = run_experiment(config)
    print(f"strategy={config.strategy} world={config.world_size} "
          f"params={result.final_params.total_parameter_count}")
    print(f"initial loss {result.initial_loss:.6f}")
    for rec in result.records:
        print(f"epoch {rec.epoch}: loss {rec.loss:.6f}  grad_norm {rec.grad_norm:.6f}  "
              f"throughput {rec.throughput:.1f} tok/s  peak_mem {rec.peak_mem_bytes} B  "
              f"wall {rec.wall_time_s:.6f} s")
    if result.csv_path:
        print(f"metrics: {result.csv_path}")
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_compare(args):
    manifest = args.manifest or args.manifest_pos
    if manifest:
        with open(manifest) as f:
            paths = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
        if len(paths) < 2:
            raise ValidationError("manifest must list at least two config files")
        configs = [config_from_values(
            {k.replace("-", "_"): v for k, v in read_config_file(p).items()})
            for p in paths]
        if args.out is None:
            # keep artifacts beside the manifest by default
            args.out = str(Path(manifest).resolve().parent)
    else:
        base = _merge(args)
        base.pop("strategy", None)
        names = args.strategies.split(",") if args.strategies else ["single", "ddp", "fsdp"]
        configs = []
        for name in names:
            name = name.strip()
            cfg = dict(base)
            cfg["strategy"] = name
            if name == "single":
                cfg["world"] = 1
            elif cfg.get("world") in (None, 1):
                cfg["world"] = 2
            configs.append(config_from_values(cfg))
    comparison = compare_strategies(configs, out_dir=args.out)
    print(comparison.table)
    for key, value in sorted(comparison.flags.items()):
        print(f"{key}: {value}")
    if comparison.csv_path:
        print(f"combined metrics: {comparison.csv_path}")
    return 0


def _cmd_selftest(args):
    from .selftest import run_selftest
    return run_selftest(quick=args.quick)


def build_parser():
    parser = _Parser(prog="minidist",
                     description="deterministic data-parallel training testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train with one strategy")
    _add_run_flags(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = sub.add_parser("compare", help="train several strategies on the same data")
    _add_run_flags(p_cmp)
    p_cmp.add_argument("manifest_pos", nargs="?", metavar="manifest",
                       help="file with one run-config path per line")
    p_cmp.add_argument("--strategies", help="comma list, default single,ddp,fsdp")
    p_cmp.add_argument("--manifest", help="same as the positional manifest argument")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_self = sub.add_parser("selftest", help="check gradients, collectives, and parity")
    p_self.add_argument("--quick", action="store_true", help="skip the slower parity checks")
    p_self.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
