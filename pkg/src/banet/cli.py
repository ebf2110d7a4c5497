"""Command-line entry point: count, train, eval, compare, export-attention,
importance.

Exit codes: 0 success, 1 usage error, 2 runtime error. All file outputs are
written atomically (temp file + rename).
"""
import os
import sys

# Cap math library threads before numpy comes in.
if "BANET_THREADS" in os.environ:
    _cap = os.environ["BANET_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse

import numpy as np

from .attention import BridgeSourceConfig, ConfigError
from .analysis import (SamplingError, branch_importance, capture_traces,
                       class_mean_weights, filtered_labels, mean_weights_csv)
from .backbones import (build_network, count_flops, count_params,
                        load_checkpoint, resolve_arch)
from .training import (FormatError, TrainConfig, TrainingDiverged,
                       atomic_write_text, evaluate, load_cifar10, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="banet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def arch_flags(sp, attention_default="none"):
        sp.add_argument("--arch", required=True,
                        help="builtin name (resnet20/resnet50/resnet101) or JSON file")
        sp.add_argument("--attention", default=attention_default,
                        choices=["none", "se", "ba", "all"])
        sp.add_argument("--bridge-sources", default=None,
                        help="e.g. conv1 or conv1+conv2 (ba only; default: all)")
        sp.add_argument("--reduction", type=int, default=16)

    sp = sub.add_parser("count", help="report parameter and FLOP counts")
    arch_flags(sp, attention_default="all")
    sp.add_argument("--input-shape", default=None, help="CxHxW, e.g. 3x224x224")

    sp = sub.add_parser("train", help="train a network on CIFAR-format data")
    arch_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None, help="JSON with TrainConfig fields")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-augment", action="store_true")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    arch_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    sp = sub.add_parser("compare", help="train several configurations on shared data")
    sp.add_argument("--archs", nargs="+", required=True,
                    help="configs like resnet20:se or arch.json:ba:conv1+conv2")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reduction", type=int, default=16)
    sp.add_argument("--no-augment", action="store_true")

    sp = sub.add_parser("export-attention",
                        help="per-class mean attention weights to CSV")
    arch_flags(sp, attention_default="se")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--classes", default=None, help="comma-separated labels")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("importance",
                        help="per-branch Gini importance of squeezed features to CSV")
    arch_flags(sp, attention_default="ba")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=None,
                    help="cap the number of analysis samples")
    return p


def _sources(args):
    if args.bridge_sources is None:
        return None
    return BridgeSourceConfig.parse(args.bridge_sources)


def _resolve(name: str):
    # a bad architecture name is a usage problem, not a runtime failure
    try:
        return resolve_arch(name)
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _make_net(args, attention, cfg_dtype=np.float32, seed=0):
    arch = _resolve(args.arch)
    return build_network(arch, attention=attention, bridge_sources=_sources(args),
                         reduction=args.reduction, seed=seed, dtype=cfg_dtype)


def _load_config(path) -> TrainConfig:
    return TrainConfig.from_json(path) if path else TrainConfig()


def _fmt_cost(params: int, flops: int) -> str:
    return f"{params / 1e6:.2f}M / {flops / 1e9:.2f}G"


def cmd_count(args) -> int:
    arch = _resolve(args.arch)
    input_shape = None
    if args.input_shape:
        dims = tuple(int(v) for v in args.input_shape.lower().split("x"))
        if len(dims) == 3:
            dims = (1,) + dims
        if len(dims) != 4:
            raise UsageError(f"bad --input-shape {args.input_shape!r}")
        input_shape = dims
    kinds = ["none", "se", "ba"] if args.attention == "all" else [args.attention]
    print(f"arch {arch.name}")
    for kind in kinds:
        net = build_network(arch, attention=kind, bridge_sources=_sources(args),
                            reduction=args.reduction, dtype=np.float32)
        print(f"{kind:>4s}: {_fmt_cost(count_params(net), count_flops(net, input_shape))}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_set, test_set = load_cifar10(args.data)
    attention = None if args.attention == "all" else args.attention
    net = _make_net(args, attention, cfg.dtype, seed=cfg.seed)
    history = train(net, train_set, test_set, cfg, out_dir=args.out,
                    augment_data=not args.no_augment, log=print)
    final = history.records[-1]
    print(f"final: loss {final.train_loss:.4f} top1 {final.test_top1:.4f} "
          f"top5 {final.test_top5:.4f}")
    return 0


def cmd_eval(args) -> int:
    _, test_set = load_cifar10(args.data)
    net = _make_net(args, args.attention)
    load_checkpoint(net, args.checkpoint)
    top1, top5 = evaluate(net, test_set)
    print(f"top1 {top1:.4f} top5 {top5:.4f}")
    return 0


def _parse_compare_spec(spec: str):
    parts = spec.split(":")
    if len(parts) < 2 or len(parts) > 3:
        raise UsageError(f"bad config spec {spec!r}; want arch:attention[:sources]")
    arch, attention = parts[0], parts[1]
    if attention not in ("none", "se", "ba"):
        raise UsageError(f"bad attention in config spec {spec!r}")
    sources = BridgeSourceConfig.parse(parts[2]) if len(parts) == 3 else None
    return arch, attention, sources


def cmd_compare(args) -> int:
    if len(args.archs) < 2:
        raise UsageError("compare needs at least 2 configurations")
    cfg = _load_config(args.config)
    train_set, test_set = load_cifar10(args.data)
    rows = []
    hashes = None
    for spec in args.archs:
        arch_name, attention, sources = _parse_compare_spec(spec)
        arch = _resolve(arch_name)
        net = build_network(arch, attention=attention, bridge_sources=sources,
                            reduction=args.reduction, seed=cfg.seed, dtype=cfg.dtype)
        label = f"{arch.name}:{attention}"
        if attention == "ba":
            label += f":{net.blocks[0].spec.bridge_sources}"
        print(f"== {label}")
        history = train(net, train_set, test_set, cfg,
                        augment_data=not args.no_augment, log=print)
        if hashes is None:
            hashes = history.order_hashes
        elif hashes != history.order_hashes:
            raise ConfigError("data order diverged between configurations "
                              "despite shared seed")
        rows.append((label, history.records[-1].test_top1))
    os.makedirs(args.out, exist_ok=True)
    csv = "config,top1\n" + "\n".join(f"{c},{t:.4f}" for c, t in rows) + "\n"
    atomic_write_text(os.path.join(args.out, "compare.csv"), csv)
    print(f"shared data order verified (hash {hashes[0]})")
    for c, t in rows:
        print(f"{c}: top1 {t:.4f}")
    return 0


def cmd_export_attention(args) -> int:
    _, test_set = load_cifar10(args.data)
    net = _make_net(args, args.attention)
    load_checkpoint(net, args.checkpoint)
    classes = None
    if args.classes:
        classes = [int(v) for v in args.classes.split(",")]
    traces = capture_traces(net, test_set, class_filter=classes)
    labels = filtered_labels(test_set, classes)
    rows = class_mean_weights(traces, labels)
    atomic_write_text(args.out, mean_weights_csv(rows))
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_importance(args) -> int:
    _, test_set = load_cifar10(args.data)
    if args.samples:
        test_set = test_set.subset(args.samples)
    net = _make_net(args, args.attention)
    load_checkpoint(net, args.checkpoint)
    traces = capture_traces(net, test_set)
    report = branch_importance(traces, seed=args.seed)
    atomic_write_text(args.out, report.to_csv())
    print(f"wrote {args.out} ({len(report.blocks)} blocks)")
    return 0


_COMMANDS = {
    "count": cmd_count,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "export-attention": cmd_export_attention,
    "importance": cmd_importance,
}


def main(argv=None) -> int:
    from .tensor import enable_malloc_reuse
    enable_malloc_reuse()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ConfigError, FormatError, SamplingError, TrainingDiverged,
            OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
