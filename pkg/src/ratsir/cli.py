"""Command-line entry points: dataset generation, training, evaluation,
ablation sweeps, and plot emission.

Exit codes: 0 success, 2 config error (including unknown keys), 3 missing
input, 4 empty or invalid data. The environment variable RATSIR_SEED
overrides the config seed; an explicit --seed flag beats both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, plots, synthdata, trainer
from .losses import LossWeights
from .net import NetConfig
from .synthdata import DataIntegrityError, DatasetConfig, RenderConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    exit_code = 2


class MissingInputError(Exception):
    exit_code = 3


class EmptyDataError(Exception):
    exit_code = 4


_NESTED = {"render": RenderConfig, "net": NetConfig, "loss_weights": LossWeights}


def _build_config(cls, data: dict, path: str = ""):
    """Construct a config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        if key in _NESTED and isinstance(val, dict):
            kwargs[key] = _build_config(_NESTED[key], val, path=f"{path}{key}.")
        elif isinstance(val, list):
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config for {cls.__name__}: {e}") from e


def _load_json(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON ({path}): {e}") from e


def _resolve_seed(config_seed: int, cli_seed) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get("RATSIR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"RATSIR_SEED must be an integer, got {env!r}") from e
    return config_seed


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_hash(data_dir: Path) -> str:
    manifest = Path(data_dir) / "manifest.json"
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def _write_run_manifest(out: Path, command: str, args: argparse.Namespace,
                        config_obj, extra: dict) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": dataclasses.asdict(config_obj) if config_obj is not None else None,
        "config_sha256": hashlib.sha256(
            json.dumps(dataclasses.asdict(config_obj), sort_keys=True).encode()
        ).hexdigest() if config_obj is not None else None,
    }
    doc.update(extra)
    (Path(out) / "run_manifest.json").write_text(json.dumps(doc, indent=1))


def _open_dataset(path) -> synthdata.Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"dataset not found: {path}")
    try:
        return synthdata.load_dataset(path)
    except FileNotFoundError as e:
        raise MissingInputError(str(e)) from e
    except DataIntegrityError as e:
        raise EmptyDataError(str(e)) from e


def cmd_generate(args) -> int:
    cfg = _build_config(DatasetConfig, _load_json(args.config)) if args.config else DatasetConfig()
    cfg = dataclasses.replace(cfg, seed=_resolve_seed(cfg.seed, args.seed))
    out = _prepare_out(args.out, args.force)
    synthdata.make_dataset(cfg, out)
    manifest = json.loads((out / "manifest.json").read_text())
    _write_run_manifest(out, "generate", args, cfg, {"dataset_sha256": _dataset_hash(out)})
    print(f"wrote {manifest['count']} sequences to {out}")
    print(f"  T={manifest['T']} gap={manifest['gap']} fps={manifest['fps']} "
          f"interaction={tuple(cfg.interaction)} seed={cfg.seed}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(TrainConfig, _load_json(args.config)) if args.config else TrainConfig()
    cfg = dataclasses.replace(cfg, seed=_resolve_seed(cfg.seed, args.seed))
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    if args.variant is not None:
        cfg = dataclasses.replace(cfg, variant=args.variant)
    ds = _open_dataset(args.data)
    out = _prepare_out(args.out, args.force or args.resume is not None)
    result = trainer.train(cfg, ds, out_dir=out,
                           resume_from=Path(args.resume) if args.resume else None)
    _write_run_manifest(out, "train", args, cfg, {
        "dataset": str(args.data), "dataset_sha256": _dataset_hash(args.data),
        "steps": result.step,
        "outputs": [str(result.log_path), str(result.checkpoint) + ".json",
                    str(result.checkpoint) + ".bin"],
    })
    final = result.logs[-1] if result.logs else {"total": float("nan")}
    print(f"trained {cfg.variant} to step {result.step}; final loss {final['total']:.4f}")
    print(f"checkpoint: {result.checkpoint}.bin")
    return 0


def _rebuild_model(ckpt_prefix: Path):
    from . import net as net_mod

    meta_path = Path(str(ckpt_prefix) + ".json")
    if not meta_path.exists():
        raise MissingInputError(f"checkpoint not found: {meta_path}")
    meta = json.loads(meta_path.read_text()).get("meta", {})
    variant = meta.get("variant", "cross_s_seq")
    net_cfg = NetConfig(**meta["net"]) if "net" in meta else NetConfig()
    model = trainer.build_variant(variant, net_cfg, seed=0)
    net_mod.load_checkpoint(model, ckpt_prefix)
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _rebuild_model(Path(args.ckpt))
    ds = _open_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    report, records = trainer.evaluate(model, ds, occlude_middle=args.occlude_middle,
                                       tau=meta.get("tau", 2.0))
    (out / "report.json").write_text(json.dumps(
        {"mean": report.to_dict(), "per_sequence": records, "variant": meta.get("variant")},
        indent=1))
    with open(out / "report.csv", "w", newline="") as f:
        keys = ["index", "mpjpe_mm", "mpvpe_mm", "mrrpe_mm", "accel_e_mm_s2", "auc"]
        writer = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        for r in records:
            writer.writerow(r)
    fig = plots.plot_frame_traces(records, ds.manifest["T"], out / "frame_errors.png")
    _write_run_manifest(out, "eval", args, None, {
        "checkpoint": str(args.ckpt), "dataset_sha256": _dataset_hash(args.data),
        "outputs": ["report.json", "report.csv", str(fig.name)],
    })
    print("evaluation mean:")
    for k, v in report.to_dict().items():
        print(f"  {k:16s} {v:10.4f}")
    return 0


def _format_table(summary: dict, variants, keys=("mpjpe_mm", "mpvpe_mm", "mrrpe_mm")) -> str:
    header = f"{'variant':18s}" + "".join(f"{k:>12s}" for k in keys)
    lines = [header, "-" * len(header)]
    for v in variants:
        lines.append(f"{v:18s}" + "".join(f"{summary[v][k]:12.3f}" for k in keys))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _build_config(TrainConfig, _load_json(args.config)) if args.config else TrainConfig()
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    ds = _open_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    result = trainer.run_ablation(ds, cfg, seeds, out_dir=out)
    variants = result["variants"]
    table = _format_table(result["summary"], variants)
    (out / "table.txt").write_text(table + "\n")
    (out / "table.json").write_text(json.dumps(result, indent=1))
    with open(out / "table.csv", "w", newline="") as f:
        keys = ["variant", "mpjpe_mm", "mpvpe_mm", "mrrpe_mm",
                "delta_mpjpe_mm", "delta_mpvpe_mm", "delta_mrrpe_mm"]
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for v in variants:
            writer.writerow({"variant": v, **{k: result["summary"][v].get(k) for k in keys[1:]}})
    plots.plot_metric_bars(result["summary"], out / "ablation_metrics.png")
    _write_run_manifest(out, "ablate", args, cfg, {
        "dataset_sha256": _dataset_hash(args.data), "seeds": seeds,
        "outputs": ["table.txt", "table.json", "table.csv", "ablation_metrics.png"],
    })
    print(table)
    return 0


def cmd_plot(args) -> int:
    log_path = Path(args.logs)
    if log_path.is_dir():
        log_path = log_path / "log.jsonl"
    if not log_path.exists():
        raise MissingInputError(f"log file not found: {log_path}")
    logs = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    if not logs:
        raise EmptyDataError(f"log file {log_path} has no records")
    panels = [p.strip() for p in args.panels.split(",") if p.strip()]
    out = _prepare_out(args.out, args.force)
    written = []
    for panel in panels:
        if panel == "loss":
            written.append(plots.plot_loss_curves(logs, out / "loss_curves.png"))
        elif panel == "lr":
            written.append(plots.plot_lr_grad(logs, out / "lr_grad.png"))
        elif panel == "frames":
            if not args.eval_report:
                raise ConfigError("panel 'frames' needs --eval-report pointing at report.json")
            report = json.loads(Path(args.eval_report).read_text())
            records = report["per_sequence"]
            if not records:
                raise EmptyDataError("evaluation report has no per-sequence records")
            T = len(records[0]["mpjpe_frames"])
            written.append(plots.plot_frame_traces(records, T, out / "frame_errors.png"))
        else:
            raise ConfigError(f"unknown panel {panel!r} (choose from loss, lr, frames)")
    for p in written:
        print(f"wrote {p}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratsir",
                                     description="Two-hand mesh recovery desk pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--config", type=Path, help="dataset config JSON")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant on a dataset")
    t.add_argument("--config", type=Path, help="train config JSON")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--variant", choices=sorted(trainer.VARIANTS))
    t.add_argument("--resume", type=Path, help="checkpoint prefix to resume from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True, help="checkpoint prefix (no extension)")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--occlude-middle", action="store_true",
                   help="black out the left hand at the middle frame before inference")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare all variants")
    a.add_argument("--config", type=Path, help="train config JSON")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--steps", type=int)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from training logs")
    p.add_argument("--logs", type=Path, required=True, help="log.jsonl or a run directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--panels", default="loss,lr")
    p.add_argument("--eval-report", type=Path, help="report.json for the frames panel")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingInputError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 3
    except (EmptyDataError, DataIntegrityError) as e:
        print(f"invalid data: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
