"""Command-line front end: train / embed / analyze / gradcheck.

Configuration is a flat key=value file; command-line flags override file
values. Every run writes its resolved configuration next to its outputs so
results are reproducible from artifacts alone.

Exit codes: 0 ok, 1 check failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, data_io, training
from .blocks import BranchSpec, NetworkSpec, build_network
from .shaking import ShakeConfig
from .verify import TOL, run_gradcheck

USAGE_ERROR = 2
CHECK_FAILURE = 1

DEFAULTS = {
    "depth": 20,
    "cardinality": 2,
    "width": 4,
    "layout": "PreActBN",
    "head": "softmax",
    "embed_dim": 0,              # 0 = no embedding layer
    "gamma0": 1.0,
    "classes": 10,
    "shake": "on",
    "shake.forward": "shake",
    "shake.backward": "shake",
    "shake.granularity": "image",
    "shake.subbands": 1,
    "shake.p_off": 0.0,
    "dataset": "digits",         # digits | mnist | cifar10 | blobs
    "data_dir": "",
    "train_samples": 10000,
    "valid_samples": 2000,
    "epochs": 20,
    "batch": 32,
    "lr0": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "augment": "none",
    "seeds": "1",
    "out": "runs",
    "precision": 32,
}

_INT_KEYS = {"depth", "cardinality", "width", "embed_dim", "classes",
             "shake.subbands", "train_samples", "valid_samples", "epochs",
             "batch", "precision"}
_FLOAT_KEYS = {"gamma0", "shake.p_off", "lr0", "momentum", "weight_decay"}


class ConfigError(ValueError):
    pass


def parse_config_file(path):
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return values


def resolve_config(file_values=None, overrides=None):
    cfg = dict(DEFAULTS)
    for source in (file_values or {}), (overrides or {}):
        for key, val in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if val is None:
                continue
            if key in _INT_KEYS:
                cfg[key] = int(val)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(val)
            else:
                cfg[key] = str(val)
    if cfg["layout"] not in ("PostAct", "RPreAct", "PreAct", "PreActBN", "BNShake"):
        raise ConfigError(f"unknown layout {cfg['layout']!r}")
    if cfg["shake"] not in ("on", "off"):
        raise ConfigError("shake must be on or off")
    if cfg["precision"] not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    if cfg["shake.granularity"] not in ("batch", "image"):
        raise ConfigError("shake.granularity must be batch or image")
    return cfg


def config_text(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def seeds_list(cfg):
    try:
        return [int(s) for s in str(cfg["seeds"]).split(",") if s != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seeds list {cfg['seeds']!r}") from exc


def network_spec(cfg):
    if cfg["shake"] == "off":
        shake = ShakeConfig(n_branches=cfg["cardinality"],
                            forward_mode="even", backward_mode="even")
    else:
        shake = ShakeConfig(
            n_branches=cfg["cardinality"],
            forward_mode=cfg["shake.forward"],
            backward_mode=cfg["shake.backward"],
            granularity="per_image" if cfg["shake.granularity"] == "image" else "per_batch",
            subbands=cfg["shake.subbands"],
            p_off=cfg["shake.p_off"],
        )
    in_channels = 3 if cfg["dataset"] == "cifar10" else 1
    return NetworkSpec(
        depth=cfg["depth"], cardinality=cfg["cardinality"], base_width=cfg["width"],
        layout=cfg["layout"], classes=cfg["classes"], in_channels=in_channels,
        embed_dim=cfg["embed_dim"] or None, head=cfg["head"], gamma0=cfg["gamma0"],
        shake=shake, branch_spec=BranchSpec())


def load_datasets(cfg):
    name = cfg["dataset"]
    if name == "mnist":
        d = cfg["data_dir"]
        train = data_io.load_mnist_idx(os.path.join(d, "train-images-idx3-ubyte"),
                                       os.path.join(d, "train-labels-idx1-ubyte"))
        valid = data_io.load_mnist_idx(os.path.join(d, "t10k-images-idx3-ubyte"),
                                       os.path.join(d, "t10k-labels-idx1-ubyte"))
        train = train.subset(np.arange(min(cfg["train_samples"], len(train))))
        valid = valid.subset(np.arange(min(cfg["valid_samples"], len(valid))))
    elif name == "cifar10":
        d = cfg["data_dir"]
        paths = [os.path.join(d, f"data_batch_{i}.bin") for i in range(1, 6)]
        train = data_io.load_cifar10_bin([p for p in paths if os.path.exists(p)])
        valid = data_io.load_cifar10_bin([os.path.join(d, "test_batch.bin")])
        train = train.subset(np.arange(min(cfg["train_samples"], len(train))))
        valid = valid.subset(np.arange(min(cfg["valid_samples"], len(valid))))
    elif name == "digits":
        train = data_io.render_digits(cfg["train_samples"] // 10, seed=90001)
        valid = data_io.render_digits(cfg["valid_samples"] // 10, seed=90002)
    elif name == "blobs":
        train = data_io.make_blobs(cfg["classes"], cfg["train_samples"] // cfg["classes"],
                                   (1, 8, 8), spread=0.3, seed=90001)
        valid = data_io.make_blobs(cfg["classes"], cfg["valid_samples"] // cfg["classes"],
                                   (1, 8, 8), spread=0.3, seed=90002)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    return data_io.standardize(train, valid)


def cmd_train(cfg):
    dtype = np.float64 if cfg["precision"] == 64 else np.float32
    train_ds, valid_ds = load_datasets(cfg)
    spec = network_spec(cfg)
    tcfg = training.TrainConfig(epochs=cfg["epochs"], batch=cfg["batch"],
                                lr0=cfg["lr0"], momentum=cfg["momentum"],
                                weight_decay=cfg["weight_decay"], augment=cfg["augment"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(config_text(cfg))

    finals = []
    for seed in seeds_list(cfg):
        metrics, network = training.train_run(spec, train_ds, valid_ds, tcfg, seed,
                                              dtype=dtype)
        with open(os.path.join(out_dir, f"metrics_seed{seed}.csv"), "w") as fh:
            fh.write(training.metrics_csv(metrics))
        training.save_checkpoint(os.path.join(out_dir, f"checkpoint_seed{seed}.bin"),
                                 training.checkpoint_table(network))
        finals.append((metrics.valid_ua, metrics.gap))
        print(f"seed {seed}: valid UA {metrics.valid_ua:.3f}%  gap {metrics.gap:.3f}%")
    mean_ua = float(np.mean([f[0] for f in finals]))
    mean_gap = float(np.mean([f[1] for f in finals]))
    with open(os.path.join(out_dir, "aggregate.csv"), "w") as fh:
        fh.write("mean_valid_ua,mean_gap\n")
        fh.write(f"{mean_ua:.10g},{mean_gap:.10g}\n")
    print(f"mean over {len(finals)} seed(s): valid UA {mean_ua:.3f}%  gap {mean_gap:.3f}%")
    return 0


def cmd_embed(cfg, checkpoint, mode, out_path):
    if not os.path.exists(checkpoint):
        print(f"error: checkpoint not found: {checkpoint}", file=sys.stderr)
        return USAGE_ERROR
    dtype = np.float64 if cfg["precision"] == 64 else np.float32
    train_ds, _ = load_datasets(cfg)
    spec = network_spec(cfg)
    if spec.embed_dim is None:
        print("error: config has no embed_dim; nothing to extract", file=sys.stderr)
        return USAGE_ERROR
    network = build_network(spec, np.random.default_rng(0), dtype=dtype)
    try:
        training.restore_network(network, training.load_checkpoint(checkpoint))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    rng = np.random.default_rng(seeds_list(cfg)[0])
    es = analysis.extract_embeddings(network, train_ds, mode, rng=rng)
    with open(out_path, "w") as fh:
        fh.write(analysis.embeddings_csv(es))
    print(f"wrote {len(es.labels)} embeddings to {out_path}")
    return 0


def cmd_analyze(train_csv, eval_csv, out_path, fmt):
    train_es = analysis.read_embeddings_csv(train_csv)
    eval_es = analysis.read_embeddings_csv(eval_csv)
    if len(train_es.labels) != len(eval_es.labels):
        print("error: row counts differ between embedding files", file=sys.stderr)
        return USAGE_ERROR
    if np.any(train_es.labels != eval_es.labels):
        print("error: labels differ between embedding files", file=sys.stderr)
        return USAGE_ERROR
    report = analysis.build_report(train_es, eval_es)
    analysis.export_report(report, out_path, fmt=fmt)
    print(f"wrote report to {out_path}")
    return 0


def cmd_gradcheck(target):
    results = run_gradcheck(target)
    failures = []
    for name in sorted(results):
        err = results[name]
        status = "pass" if err < TOL else "FAIL"
        print(f"{status}  {name:28s} max rel err {err:.3e}")
        if err >= TOL:
            failures.append(name)
    if failures:
        print(f"{len(failures)} gradient check(s) failed: {', '.join(failures)}",
              file=sys.stderr)
        return CHECK_FAILURE
    print(f"all {len(results)} gradient checks passed (tol {TOL:g})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="shakebn")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", default=None)
        p.add_argument("--layout", choices=["PostAct", "RPreAct", "PreAct",
                                            "PreActBN", "BNShake"])
        p.add_argument("--shake", choices=["on", "off"])
        p.add_argument("--gamma0", type=float)
        p.add_argument("--subbands", type=int, dest="shake.subbands")
        p.add_argument("--p-off", type=float, dest="shake.p_off")
        p.add_argument("--granularity", choices=["batch", "image"],
                       dest="shake.granularity")
        p.add_argument("--seeds")
        p.add_argument("--epochs", type=int)
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--dataset")
        p.add_argument("--out")
        p.add_argument("--precision", type=int, choices=[32, 64])
        p.add_argument("--embed-dim", type=int, dest="embed_dim")
        p.add_argument("--head")
        p.add_argument("--depth", type=int)
        p.add_argument("--width", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--train-samples", type=int, dest="train_samples")
        p.add_argument("--valid-samples", type=int, dest="valid_samples")

    p_train = sub.add_parser("train", help="train one or more seeds")
    add_config_flags(p_train)

    p_embed = sub.add_parser("embed", help="extract embeddings from a checkpoint")
    add_config_flags(p_embed)
    p_embed.add_argument("--checkpoint", required=True)
    p_embed.add_argument("--mode", choices=["train", "eval"], default="eval")
    p_embed.add_argument("--out-csv", default="embeddings.csv")

    p_an = sub.add_parser("analyze", help="dispersion report from embedding CSVs")
    p_an.add_argument("train_csv")
    p_an.add_argument("eval_csv")
    p_an.add_argument("--out-report", default="report.json")
    p_an.add_argument("--format", choices=["json", "csv"], default="json")

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--target", choices=["layer", "block", "cell", "all"],
                      default="all")
    return parser


def _resolve_from_args(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items()
                 if k in DEFAULTS and v is not None}
    return resolve_config(file_values, overrides)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        if args.command == "train":
            return cmd_train(_resolve_from_args(args))
        if args.command == "embed":
            return cmd_embed(_resolve_from_args(args), args.checkpoint,
                             args.mode, args.out_csv)
        if args.command == "analyze":
            return cmd_analyze(args.train_csv, args.eval_csv,
                               args.out_report, args.format)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.target)
    except (ConfigError, data_io.DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
