"""Command-line entry point.

Subcommands: gen-data, pretrain, adapt, analyze. Configuration comes
from an optional JSON file of flat dotted keys (for example
``{"adapt.alpha": 0.8}``) with command-line flags overriding file
values. Every report embeds the effective configuration, the seed, and
the package version.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric failure.

The environment variable CDTTA_THREADS caps internal parallelism; it is
applied to the numeric libraries' thread settings before they load, so
this module defers all heavy imports until after startup.
"""

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

KNOWN_KEYS = {
    "data.height": int, "data.width": int, "data.num_classes": int,
    "data.domains": list, "data.cycles": int, "data.segment_length": int,
    "data.source_train": int, "data.source_val": int,
    "data.eval_per_domain": int, "data.seed": int,
    "pretrain.epochs": int, "pretrain.learning_rate": float,
    "pretrain.batch_size": int, "pretrain.seed": int,
    "adapt.alpha": float, "adapt.eta": float, "adapt.delta": float,
    "adapt.k": int, "adapt.learning_rate": float, "adapt.batch_size": int,
    "adapt.loss_kind": str, "adapt.branch_mode": str, "adapt.metric": str,
    "adapt.clustering_layers": list, "adapt.denoise_layers": list,
    "adapt.seed": int,
    "analyze.alpha": float, "analyze.branch": int, "analyze.layers": list,
    "analyze.metrics": list, "analyze.denoise_layers": list,
}


def _cap_threads() -> None:
    raw = os.environ.get("CDTTA_THREADS")
    if not raw:
        return
    from .errors import ConfigError
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CDTTA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CDTTA_THREADS must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def load_config(path: str | None) -> dict:
    from .errors import ConfigError
    if path is None:
        return {}
    try:
        with open(path) as fp:
            cfg = json.load(fp)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    for key in cfg:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def _typed(cfg: dict, key: str, default):
    from .errors import ConfigError
    if key not in cfg:
        return default
    v = cfg[key]
    kind = KNOWN_KEYS[key]
    if isinstance(v, bool):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}")
    if kind is float and isinstance(v, (int, float)):
        return float(v)
    if kind is int and isinstance(v, int):
        return v
    if kind is str and isinstance(v, str):
        return v
    if kind is list and isinstance(v, list) and all(isinstance(x, str) for x in v):
        return list(v)
    raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}")


def _override(cfg: dict, key: str, value) -> None:
    if value is not None:
        cfg[key] = value


def _fresh_dir(path: Path, force: bool) -> None:
    from .errors import DataError
    if path.exists():
        if not force:
            raise DataError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)


def _fresh_file(path: Path, force: bool) -> None:
    from .errors import DataError
    if path.exists() and not force:
        raise DataError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _resolve_domains(cfg: dict):
    from .data import DOMAIN_PRESETS
    from .errors import ConfigError
    names = _typed(cfg, "data.domains", None)
    if names is None:
        return tuple(DOMAIN_PRESETS.values())
    if not names:
        raise ConfigError("data.domains: need at least one domain name")
    specs = []
    for name in names:
        if name not in DOMAIN_PRESETS:
            raise ConfigError(
                f"data.domains: unknown domain name {name!r}; "
                f"known: {sorted(DOMAIN_PRESETS)}")
        specs.append(DOMAIN_PRESETS[name])
    return tuple(specs)


def _data_config(cfg: dict):
    from .data import DataConfig, default_schedule
    domains = _resolve_domains(cfg)
    # Default epoch: 50 cycles x 3 domains x 40 samples = 6000 stream images.
    # No warmup tour at this scale; the cold-start segment is 2% of the stream.
    cycles = _typed(cfg, "data.cycles", 50)
    segment = _typed(cfg, "data.segment_length", 40)
    warmup = _typed(cfg, "data.warmup", 0)
    return DataConfig(
        height=_typed(cfg, "data.height", 64),
        width=_typed(cfg, "data.width", 64),
        num_classes=_typed(cfg, "data.num_classes", 5),
        domains=domains,
        schedule=default_schedule(cycles, segment, len(domains), warmup),
        source_train=_typed(cfg, "data.source_train", 400),
        source_val=_typed(cfg, "data.source_val", 48),
        eval_per_domain=_typed(cfg, "data.eval_per_domain", 20),
        seed=_typed(cfg, "data.seed", 0))


def _adapt_config(cfg: dict):
    from .adapt import AdaptConfig
    acfg = AdaptConfig(
        alpha=_typed(cfg, "adapt.alpha", 0.9),
        eta=_typed(cfg, "adapt.eta", 0.9),
        delta=_typed(cfg, "adapt.delta", 1.5),
        k=_typed(cfg, "adapt.k", 3),
        learning_rate=_typed(cfg, "adapt.learning_rate", 1e-3),
        batch_size=_typed(cfg, "adapt.batch_size", 4),
        loss_kind=_typed(cfg, "adapt.loss_kind", "entropy"),
        branch_mode=_typed(cfg, "adapt.branch_mode", "pseudo"),
        metric=_typed(cfg, "adapt.metric", "bhattacharyya"),
        clustering_layers=tuple(_typed(cfg, "adapt.clustering_layers", ["t0", "t1"])),
        denoise_layers=tuple(_typed(cfg, "adapt.denoise_layers",
                                    ["t0", "t1", "t2", "t3"])),
        seed=_typed(cfg, "adapt.seed", 0))
    acfg.validate()
    return acfg


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=1))


def cmd_gen_data(args) -> int:
    from . import __version__
    from .data import generate_dataset, save_dataset
    cfg = load_config(args.config)
    _override(cfg, "data.seed", args.seed)
    _override(cfg, "data.cycles", args.cycles)
    _override(cfg, "data.segment_length", args.segment_length)
    _override(cfg, "data.warmup", args.warmup)
    dcfg = _data_config(cfg)
    ds = generate_dataset(dcfg)
    save_dataset(args.out, ds, force=args.force)
    _emit({"version": __version__, "path": str(args.out),
           "config": {k: v for k, v in sorted(cfg.items())},
           "seed": dcfg.seed,
           "stream_samples": len(ds.stream),
           "source_train": len(ds.source_train),
           "source_val": len(ds.source_val),
           "eval_samples": len(ds.eval_split),
           "domains": [s.name for s in dcfg.domains]})
    return 0


def cmd_pretrain(args) -> int:
    from . import __version__
    from .adapt import pretrain
    from .data import load_dataset
    from .network import save_checkpoint
    cfg = load_config(args.config)
    _override(cfg, "pretrain.epochs", args.epochs)
    _override(cfg, "pretrain.learning_rate", args.lr)
    _override(cfg, "pretrain.batch_size", args.batch_size)
    _override(cfg, "pretrain.seed", args.seed)
    ds = load_dataset(args.data)
    out = Path(args.out)
    _fresh_file(out, args.force)
    curve = Path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    _fresh_file(curve, args.force)
    net, history = pretrain(
        ds.source_train, ds.config.num_classes,
        epochs=_typed(cfg, "pretrain.epochs", 32),
        learning_rate=_typed(cfg, "pretrain.learning_rate", 0.2),
        batch_size=_typed(cfg, "pretrain.batch_size", 4),
        seed=_typed(cfg, "pretrain.seed", 0),
        val_samples=ds.source_val)
    save_checkpoint(net, out)
    with open(curve, "w", newline="") as fp:
        fp.write("epoch,loss\n")
        for i, loss in enumerate(history["epoch_losses"]):
            fp.write(f"{i},{loss!r}\n")
    _emit({"version": __version__, "checkpoint": str(out), "curve": str(curve),
           "config": {k: v for k, v in sorted(cfg.items())},
           "seed": _typed(cfg, "pretrain.seed", 0),
           "epoch_losses": history["epoch_losses"],
           "val_miou": history.get("val_miou")})
    return 0


def cmd_adapt(args) -> int:
    from .adapt import (records_csv_bytes, report_json_bytes, run_stream)
    from .data import load_dataset
    from .network import load_checkpoint, save_checkpoint
    cfg = load_config(args.config)
    _override(cfg, "adapt.loss_kind", args.loss)
    _override(cfg, "adapt.alpha", args.alpha)
    _override(cfg, "adapt.eta", args.eta)
    _override(cfg, "adapt.delta", args.delta)
    _override(cfg, "adapt.k", args.k)
    _override(cfg, "adapt.learning_rate", args.lr)
    _override(cfg, "adapt.batch_size", args.batch_size)
    _override(cfg, "adapt.branch_mode", args.branch_mode)
    _override(cfg, "adapt.metric", args.metric)
    _override(cfg, "adapt.seed", args.seed)
    acfg = _adapt_config(cfg)
    ds = load_dataset(args.data)
    net = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _fresh_dir(out, args.force)
    adapted, bank, report = run_stream(net, ds.stream, acfg,
                                       eval_samples=ds.eval_split)
    report_bytes = report_json_bytes(report)
    (out / "report.json").write_bytes(report_bytes)
    (out / "records.csv").write_bytes(records_csv_bytes(report))
    _write_stream_features(out / "features.csv", report)
    save_checkpoint(adapted, out / "adapted.cdck")
    (out / "run_meta.json").write_text(json.dumps(
        {"wall_time_s": report.wall_time_s}, sort_keys=True, indent=1))
    sys.stdout.write(report_bytes.decode() + "\n")
    return 0


def _write_stream_features(path: Path, report) -> None:
    from .clustering import write_feature_csv
    entries = ((i, int(report.true_domains[i]), int(report.assignments[i]),
                report.features[i]) for i in range(len(report.features)))
    write_feature_csv(path, entries)


def cmd_analyze(args) -> int:
    from . import __version__
    from .analyze import (ddr_grid, domain_features, sample_signals,
                          signal_correlations)
    from .clustering import METRICS, write_feature_csv
    from .data import load_dataset
    from .errors import ConfigError
    from .network import TAPS, load_checkpoint, set_alpha
    cfg = load_config(args.config)
    _override(cfg, "analyze.alpha", args.alpha)
    ds = load_dataset(args.data)
    net = set_alpha(load_checkpoint(args.checkpoint),
                    _typed(cfg, "analyze.alpha", 0.9))
    layers = tuple(_typed(cfg, "analyze.layers", list(TAPS)))
    metrics = tuple(_typed(cfg, "analyze.metrics", list(METRICS)))
    denoise_layers = tuple(_typed(cfg, "analyze.denoise_layers", list(TAPS)))
    branch = _typed(cfg, "analyze.branch", 0)
    if not 0 <= branch < net.num_branches:
        raise ConfigError(f"analyze.branch must be in [0, {net.num_branches})")
    out = Path(args.out)
    _fresh_dir(out, args.force)
    samples = ds.eval_split
    rows = ddr_grid(net, samples, metrics=metrics, layers=layers, branch=branch)
    signals = sample_signals(net, samples, denoise_layers=denoise_layers,
                             branch=branch)
    corr = signal_correlations(signals)
    with open(out / "ddr.csv", "w", newline="") as fp:
        fp.write("layer,metric,ddr\n")
        for row in rows:
            fp.write(f"{row['layer']},{row['metric']},{row['ddr']!r}\n")
    with open(out / "correlations.csv", "w", newline="") as fp:
        fp.write("signal,pearson\n")
        for row in corr:
            fp.write(f"{row['signal']},{row['pearson']!r}\n")
    groups = domain_features(net, samples, layers, branch)
    entries = []
    i = 0
    for d in sorted(groups):
        for feat in groups[d]:
            entries.append((i, d, -1, feat))
            i += 1
    write_feature_csv(out / "features.csv", entries)
    payload = {"version": __version__,
               "config": {k: v for k, v in sorted(cfg.items())},
               "ddr": rows, "correlations": corr}
    (out / "analysis.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    _emit(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftseg",
        description="Streaming test-time adaptation on synthetic compound domains")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--segment-length", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a source checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--curve")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run streaming adaptation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--loss", choices=["entropy", "max_squares", "pseudo_label"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--branch-mode", choices=["pseudo", "oracle", "compound"])
    p.add_argument("--metric", choices=["bhattacharyya", "euclidean",
                                        "wasserstein2", "stats_divergence"])
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("analyze", help="DDR grid and signal correlations")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    from .errors import ConfigError, DriftsegError, NumericError
    try:
        _cap_threads()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DriftsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
