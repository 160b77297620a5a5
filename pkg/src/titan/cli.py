"""Command-line entry point: ``titan <subcommand>``.

Exit codes: 0 success, 2 configuration or input-format error, 3 numeric
divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import checkpoint, plotting
from .dataset import (
    NormStats,
    gen_synthetic,
    horizon_metrics,
    load_csv,
    node_metrics,
    persistence_forecast,
    write_csv,
    write_horizon_csv,
    write_node_csv,
)
from .errors import ConfigError, DivergenceError, TitanError, VersionError
from .model import VARIANTS
from .prior import build_prior, load_prior, save_prior
from .trainer import (
    TrainConfig,
    _restore,
    build_model,
    evaluate,
    prepare_data,
    train,
    write_history_csv,
    write_routing_log,
)

log = logging.getLogger("titan")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
SPLITS = ("train", "val", "test")


# -- helpers -------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def find_duplicate(out_dir: Path, cfg_hash: str, input_hash: dict) -> str | None:
    """Earlier run (this directory or a sibling) with the same config and input hashes."""
    candidates = [out_dir / "manifest.json"]
    if out_dir.parent.is_dir():
        candidates += sorted(p / "manifest.json" for p in out_dir.parent.iterdir() if p.is_dir() and p != out_dir)
    for path in candidates:
        if not path.is_file():
            continue
        try:
            prev = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if prev.get("config_hash") == cfg_hash and prev.get("input_hashes") == input_hash:
            return str(path.parent)
    return None


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (flag > --config file > default)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "ablation":
            continue
        if f.name in ("betas", "split_ratios"):
            group.add_argument(flag, dest=f.name, type=float, nargs="+", default=None)
        elif f.type in ("bool",):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.type in ("int", "int | None"):
            group.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type in ("float", "float | None"):
            group.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            group.add_argument(flag, dest=f.name, default=None)


def resolve_config(args, variant: str | None = None) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        data = TrainConfig.load(args.config).to_dict()
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    if variant is not None:
        data["ablation"] = variant
    cfg = TrainConfig.from_dict(data)
    cfg.validate()
    return cfg


def _load_series(path):
    return load_csv(path)


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    series = gen_synthetic(args.sensors, args.days, args.interval_min, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, out)
    print(f"wrote {out}: {series.n_steps} rows x {series.n_sensors} sensors")
    return EXIT_OK


def _prior_for(series, cfg: TrainConfig, kappa_quantile: float, threads: int, **kw):
    data = prepare_data(series, cfg)
    return build_prior(data.normalized, kappa_quantile, data.train_range, threads=threads, **kw), data


def cmd_compute_dtw(args) -> int:
    series = _load_series(args.data)
    cfg = TrainConfig(kappa_quantile=args.kappa_quantile)
    prior, _ = _prior_for(
        series, cfg, args.kappa_quantile, args.threads,
        full_resolution=args.full_resolution, max_days=args.max_days, band=args.band,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = save_prior(prior, out)
    print(f"wrote {out} and {side}: n={prior.n} kappa={prior.kappa:.6g} sigma={prior.sigma:.6g}")
    return EXIT_OK


def _run(args, cfg: TrainConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    inputs = {"data": sha256_file(args.data)}
    if getattr(args, "prior", None):
        inputs["prior"] = sha256_file(args.prior)
    cfg_hash = config_hash(cfg)
    duplicate = find_duplicate(out_dir, cfg_hash, inputs)
    if duplicate:
        log.warning("duplicate run: %s has identical config and input hashes", duplicate)
        print(f"duplicate run: matches {duplicate}")

    series = _load_series(args.data)
    data = prepare_data(series, cfg)
    prior = None
    needs_prior = cfg.ablation not in ("ensemble", "no_prior", "replaced_prior")
    if needs_prior:
        if getattr(args, "prior", None):
            prior = load_prior(args.prior)
            if prior.n != series.n_sensors:
                raise ConfigError(f"prior has n={prior.n} but data has {series.n_sensors} sensors")
        else:
            log.info("no --prior given; computing the DTW prior from the training rows")
            prior = build_prior(data.normalized, cfg.kappa_quantile, data.train_range, threads=args.threads)
            save_prior(prior, out_dir / "prior.csv")

    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    extra = {
        "norm": {"mean": data.stats.mean.tolist(), "std": data.stats.std.tolist()},
        "sensor_ids": data.sensor_ids,
        "interval": series.interval,
    }
    ckpt = out_dir / "checkpoint.titn"
    try:
        result = train(cfg, data, prior)
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        if exc.last_good is not None:
            model = build_model(cfg, len(data.sensor_ids), data.n_features)
            _restore(model, exc.last_good)
            checkpoint.save(ckpt, model, {**extra, "train_config": cfg.to_dict(), "diverged": True})
            print(f"diverged; last good checkpoint written to {ckpt}")
        return EXIT_DIVERGED

    checkpoint.save(ckpt, result.model, {**extra, "train_config": result.config.to_dict(), "best_epoch": result.best_epoch})
    history_csv = out_dir / "metrics_history.csv"
    write_history_csv(result.history, history_csv)
    write_routing_log(result.routing_log, out_dir / "routing_log.jsonl")
    test = evaluate(result.model, data.test, data.stats)
    write_horizon_csv(test.rows, out_dir / "metrics_test.csv")
    outputs = ["config.json", "checkpoint.titn", "metrics_history.csv", "routing_log.jsonl", "metrics_test.csv"]
    if args.figures:
        if result.history:
            plotting.plot_history(result.history, out_dir / "history.png")
            outputs.append("history.png")
        if result.routing_log and result.model.spec.ablation != "ensemble":
            plotting.plot_selections(result.routing_log, result.model.expert_names, out_dir / "selections.png")
            outputs.append("selections.png")
        base = horizon_metrics(
            data.stats.inverse(persistence_forecast(data.test)), test.target, data.test.y_mask
        )
        plotting.plot_horizons(test.rows, out_dir / "horizons_test.png", baseline=base)
        outputs.append("horizons_test.png")
    _print_rows(f"test ({cfg.ablation})", test.rows)
    manifest = {
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "input_hashes": inputs,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
        "duplicate_of": duplicate,
        "best_epoch": result.best_epoch,
        "steps": result.steps,
        "train_seconds": round(result.seconds, 3),
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    print(f"run written to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run(args, resolve_config(args))


def cmd_ablate(args) -> int:
    return _run(args, resolve_config(args, variant=args.variant))


def _print_rows(title: str, rows) -> None:
    print(f"{title}")
    print(f"{'step':>6} {'MAE':>9} {'RMSE':>9} {'MAPE%':>9}")
    for step, m in rows:
        print(f"{step:>6} {m.mae:9.4f} {m.rmse:9.4f} {m.mape:9.3f}")


def cmd_eval(args) -> int:
    model, header = checkpoint.load(args.checkpoint)
    cfg = TrainConfig.from_dict(header["train_config"])
    series = _load_series(args.data)
    if series.n_sensors != model.spec.n_nodes:
        raise VersionError(
            f"config field 'n_nodes': checkpoint has {model.spec.n_nodes}, data has {series.n_sensors} sensors"
        )
    stats = NormStats(header["norm"]["mean"], header["norm"]["std"])
    data = prepare_data(series, cfg, stats=stats)
    ws = getattr(data, args.split)
    result = evaluate(model, ws, stats)
    ckpt_dir = Path(args.checkpoint).parent
    out = Path(args.out) if args.out else ckpt_dir / f"metrics_{args.split}.csv"
    write_horizon_csv(result.rows, out)
    nodes = out.with_name(f"node_errors_{args.split}.csv")
    write_node_csv(node_metrics(result.pred, result.target, result.mask, data.sensor_ids), nodes)
    if args.figures:
        base = horizon_metrics(stats.inverse(persistence_forecast(ws)), result.target, ws.y_mask)
        plotting.plot_horizons(result.rows, out.with_name(f"horizons_{args.split}.png"), baseline=base)
    _print_rows(f"{args.split} ({model.spec.ablation})", result.rows)
    if result.tally is not None:
        print("selections:", dict(zip(model.expert_names, result.tally.samples.tolist())))
    print(f"wrote {out} and {nodes}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="titan", description="Heterogeneous mixture-of-experts traffic forecaster.")
    p.add_argument("--log-level", default="WARNING", help="DEBUG, INFO, WARNING, ERROR")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for DTW")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic sensor CSV")
    g.add_argument("--sensors", type=int, required=True)
    g.add_argument("--days", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--interval-min", type=int, default=5)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_synth)

    d = sub.add_parser("compute-dtw", help="build the DTW prior graph")
    d.add_argument("--data", required=True)
    d.add_argument("--kappa-quantile", type=float, default=0.7)
    d.add_argument("--out", required=True)
    d.add_argument("--full-resolution", action="store_true", help="skip hourly downsampling")
    d.add_argument("--max-days", type=float, default=14.0)
    d.add_argument("--band", type=int, default=None, help="Sakoe-Chiba band width")
    d.set_defaults(func=cmd_compute_dtw)

    for name, func, help_ in (("train", cmd_train, "train the full model"), ("ablate", cmd_ablate, "train one ablation variant")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--prior")
        t.add_argument("--out-dir", required=True)
        t.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
        if name == "ablate":
            t.add_argument("--variant", required=True, choices=VARIANTS)
        else:
            t.add_argument("--ablation", dest="ablation", choices=VARIANTS, default=None)
        _config_flags(t)
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out")
    e.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fmt = "%(levelname)s %(name)s: %(message)s"
    if not os.environ.get("NO_COLOR") and sys.stderr.isatty():
        fmt = "\033[2m%(levelname)s %(name)s:\033[0m %(message)s"
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format=fmt, force=True)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TitanError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
