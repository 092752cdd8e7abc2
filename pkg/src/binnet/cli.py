"""Command-line entry points: train, eval, sweep, bench, inspect, synth-data.

Tables go to stdout as tab-separated UTF-8; logs go to stderr. Exit status
0 on success, 2 for usage/geometry errors, 3 when training diverges.
Flag precedence: command-line flags > --config key=value file > defaults.
"""

import argparse
import os
import sys
import time
from dataclasses import fields

from binnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from binnet.data import DataFormatError, load_cifar10, load_mnist, write_synthetic_mnist
from binnet.training import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    distribution_report,
    evaluate,
    near_zero_fraction,
)

VERSION = "0.1.0"

USAGE_ERROR = 2
DIVERGED = 3


def log(msg):
    print(msg, file=sys.stderr)


def read_config_file(path):
    values = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.rstrip()}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_CFG_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_FLAG_TO_CFG = {
    "lam": "lam", "tau": "tau", "eta1": "eta1", "eta2": "eta2", "eta3": "eta3",
    "estimator": "estimator", "regularizer": "regularizer", "epochs": "epochs",
    "batch_size": "batch_size", "seed": "seed", "lr_schedule": "lr_schedule",
}


def resolve_config(args):
    """Merge defaults, the optional config file, and explicit flags."""
    values = {}
    if getattr(args, "config", None):
        raw = read_config_file(args.config)
        for key, text in raw.items():
            if key not in _CFG_TYPES:
                raise ValueError(f"unknown config key {key!r}")
            kind = _CFG_TYPES[key]
            values[key] = int(text) if kind == "int" else (
                text if kind == "str" else float(text))
    for flag, key in _FLAG_TO_CFG.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[key] = flag_value
    return TrainConfig(**values).validate()


def load_dataset(name, directory):
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    if name == "synthetic":
        needed = os.path.join(directory, "train-images-idx3-ubyte")
        if not os.path.exists(needed):
            log(f"generating synthetic digit dataset in {directory}")
            write_synthetic_mnist(directory)
        return load_mnist(directory)
    raise ValueError(f"unknown dataset {name!r}")


def write_manifest(path, cfg, args, out_dir):
    lines = [f"version={VERSION}", f"started={time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    lines += [f"dataset={args.dataset}", f"data={args.data}", f"out={out_dir}"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_train(args):
    try:
        cfg = resolve_config(args)
        train, test = load_dataset(args.dataset, args.data)
    except (ValueError, DataFormatError, FileNotFoundError) as exc:
        log(f"error: {exc}")
        return USAGE_ERROR
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(os.path.join(out_dir, "manifest.txt"), cfg, args, out_dir)
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    with open(metrics_path, "w") as metrics:
        def log_line(line):
            metrics.write(line + "\n")

        trainer = Trainer(cfg, train.images, train.labels, test.images,
                          test.labels, baseline=args.baseline,
                          assert_invariants=args.assert_invariants,
                          log_fn=log_line)
        if args.resume:
            try:
                trainer.net = load_checkpoint(args.resume)
            except CheckpointError as exc:
                log(f"error: {exc}")
                return USAGE_ERROR
        best = -1.0
        try:
            for epoch in range(cfg.epochs):
                trainer.run_epoch(epoch)
                acc = evaluate(trainer.net, test.images, test.labels)
                log_line(f"{trainer.step_count}\t\t\t{acc:.4f}\t")
                log(f"epoch {epoch + 1}/{cfg.epochs} accuracy {acc:.4f}")
                if acc > best:
                    best = acc
                    save_checkpoint(trainer.net, os.path.join(out_dir, "best.ckpt"))
        except NonFiniteLossError as exc:
            log(f"training diverged: {exc}")
            return DIVERGED
        save_checkpoint(trainer.net, os.path.join(out_dir, "final.ckpt"))
    print(f"final\t{best:.4f}")
    return 0


def cmd_eval(args):
    try:
        net = load_checkpoint(args.checkpoint)
        _, test = load_dataset(args.dataset, args.data)
        acc = evaluate(net, test.images, test.labels)
    except (CheckpointError, DataFormatError, ValueError, FileNotFoundError) as exc:
        log(f"error: {exc}")
        return USAGE_ERROR
    print(f"{acc:.4f}")
    return 0


def cmd_sweep(args):
    try:
        lambdas = [float(v) for v in args.lambdas.split(",")]
        taus = [float(v) for v in args.taus.split(",")]
        train, test = load_dataset(args.dataset, args.data)
    except (ValueError, DataFormatError, FileNotFoundError) as exc:
        log(f"error: {exc}")
        return USAGE_ERROR
    print("lambda\ttau\taccuracy")
    for lam in lambdas:
        for tau in taus:
            args.lam, args.tau = lam, tau
            try:
                cfg = resolve_config(args)
                trainer = Trainer(cfg, train.images, train.labels,
                                  test.images, test.labels)
                acc = trainer.run()
                print(f"{lam:g}\t{tau:g}\t{acc:.4f}")
            except (ValueError, NonFiniteLossError) as exc:
                log(f"cell lambda={lam:g} tau={tau:g} failed: {exc}")
                print(f"{lam:g}\t{tau:g}\tfailed")
            sys.stdout.flush()
    return 0


def cmd_bench(args):
    from binnet.bench import bench_geometry

    geometries = []
    for size_text in args.sizes:
        parts = size_text.split(",")
        if len(parts) != 4:
            log(f"error: bad geometry {size_text!r}, expected C_out,C_in,K,IMAGE")
            return USAGE_ERROR
        geometries.append(tuple(int(p) for p in parts))
    print("c_out\tc_in\tk\timage\tfloat_ms\tpacked_incl_ms\tpacked_kernel_ms"
          "\tspeedup_incl\tspeedup_kernel\tweight_storage_ratio")
    for c_out, c_in, k, image in geometries:
        r = bench_geometry(c_out, c_in, k, image, repeats=args.repeats)
        print(f"{r.c_out}\t{r.c_in}\t{r.kernel}\t{r.image}"
              f"\t{r.float_s * 1e3:.3f}\t{r.packed_incl_s * 1e3:.3f}"
              f"\t{r.packed_kernel_s * 1e3:.3f}"
              f"\t{r.speedup_incl:.2f}\t{r.speedup_kernel:.2f}"
              f"\t{r.storage_ratio:.0f}")
        sys.stdout.flush()
    return 0


def cmd_inspect(args):
    try:
        net = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        log(f"error: {exc}")
        return USAGE_ERROR
    if args.layer is not None:
        binaries = [i for i, l in enumerate(net.layers) if l.kind == "binary-conv"]
        if args.layer not in binaries:
            log(f"error: layer {args.layer} is not a binary layer "
                f"(binary layers: {binaries})")
            return USAGE_ERROR
        net.layers = [net.layers[args.layer]]
    print(distribution_report(net))
    print(f"near_zero_fraction\t{near_zero_fraction(net):.6f}")
    return 0


def cmd_synth_data(args):
    write_synthetic_mnist(args.out, args.n_train, args.n_test, args.seed)
    log(f"wrote synthetic IDX dataset to {args.out}")
    return 0


def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"],
                   default="mnist")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--eta3", type=float)
    p.add_argument("--estimator", choices=["ste", "approxsign"])
    p.add_argument("--regularizer", choices=["none", "l1", "l2"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=["constant", "cosine"])


def build_parser():
    parser = argparse.ArgumentParser(prog="binnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the desk-scale binary net")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--baseline", action="store_true",
                   help="plain estimator BNN path (no coupled updates)")
    p.add_argument("--assert-invariants", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"],
                   default="mnist")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="lambda/tau grid at desk scale")
    _add_train_flags(p)
    p.add_argument("--lambdas", required=True, help="comma-separated values")
    p.add_argument("--taus", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bench", help="float vs packed conv micro-benchmark")
    p.add_argument("--sizes", nargs="+", required=True,
                   help="geometries as C_out,C_in,K,IMAGE")
    p.add_argument("--repeats", type=int, default=30)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="weight/scale distribution report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("synth-data", help="write a synthetic IDX digit dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=1600)
    p.add_argument("--seed", type=int, default=12345)
    p.set_defaults(fn=cmd_synth_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
