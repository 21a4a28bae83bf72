"""Command-line entry point: ``tame {synth,train,eval,ablate,check}``.

Configuration precedence is defaults < ``--config`` JSON file < ``--set``
dotted overrides < explicit flags. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from tame.errors import ConfigError, ContractError, IngestionError, TameError
from tame.evaluate import EvalReport, emit_confusion_csv, emit_trajectory_csv, evaluate
from tame.frontend import load_dataset, parse_manifest, preset
from tame.model import Variant, init_params
from tame.synth import DEFAULT_CLASSES, Volume, make_dataset
from tame.training import TrainConfig, TrainedModel, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

ABLATION_ROWS = [
    ("TMamba", Variant.TMAMBA_ONLY),
    ("SMamba", Variant.SMAMBA_ONLY),
    ("SFE", Variant.SFE),
    ("TFE", Variant.TFE),
]

SYNTH_DEFAULTS = {
    "n_train": 2000,
    "n_test": 500,
    "snr_db": 10.0,
    "seed": 0,
    "volume": asdict(Volume()),
}


class UsageError(TameError):
    pass


# -- configuration ----------------------------------------------------------------
def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, update: dict, where: str) -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, dotted: str) -> dict:
    if "=" not in dotted:
        raise UsageError(f"override {dotted!r} is not of the form key=value")
    key, raw = dotted.split("=", 1)
    nested: dict = {}
    cursor = nested
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = _parse_value(raw)
    return _merge(cfg, nested, "")


def effective_config(section: str, defaults: dict, args, flags: dict) -> dict:
    cfg = {section: defaults}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON ({exc})") from exc
        cfg = _merge(cfg, {k: v for k, v in file_cfg.items() if k == section}, "")
        unknown = set(file_cfg) - {"train", "synth"}
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
    for item in getattr(args, "set", None) or []:
        cfg = _apply_override(cfg, item if item.startswith(section + ".") else f"{section}.{item}")
    explicit = {k: v for k, v in flags.items() if v is not None}
    return _merge(cfg, {section: explicit}, "")[section]


def _train_config(args) -> TrainConfig:
    flags = {
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "gamma": getattr(args, "gamma", None),
        "seed": getattr(args, "seed", None),
        "variant": getattr(args, "variant", None),
        "preset": getattr(args, "preset", None),
        "max_steps": getattr(args, "max_steps", None),
    }
    cfg = effective_config("train", TrainConfig().to_dict(), args, flags)
    try:
        tc = TrainConfig.from_dict(cfg)
        tc.model_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    return tc


def _manifest(data_dir) -> Path:
    path = Path(data_dir) / "manifest.jsonl"
    if not path.is_file():
        raise UsageError(f"no manifest at {path}")
    return path


def _scene_volume(data_dir, fallback: Volume) -> Volume:
    meta = Path(data_dir) / "scene.json"
    if meta.is_file():
        v = json.loads(meta.read_text())["volume"]
        return Volume(tuple(v["lo"]), tuple(v["hi"]))
    return fallback


# -- subcommands --------------------------------------------------------------------
def cmd_synth(args) -> int:
    flags = {"n_train": args.n_train, "n_test": args.n_test, "snr_db": args.snr_db, "seed": args.seed}
    cfg = effective_config("synth", SYNTH_DEFAULTS, args, flags)
    try:
        volume = Volume(tuple(cfg["volume"]["lo"]), tuple(cfg["volume"]["hi"]))
    except (ConfigError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid volume: {exc}") from exc
    out = Path(args.out)
    manifest = make_dataset(int(cfg["n_train"]), int(cfg["n_test"]), DEFAULT_CLASSES, None,
                            float(cfg["snr_db"]), int(cfg["seed"]), out, volume)
    (out / "config.json").write_text(json.dumps({"synth": cfg}, indent=2))
    print(f"wrote {int(cfg['n_train']) + int(cfg['n_test'])} segments to {manifest}")
    return EXIT_OK


def dry_run_report(tc: TrainConfig) -> str:
    params = init_params(tc.model_config(), tc.seed)
    lines = [f"total parameters: {params.count():,} ({params.count() / 1e6:.2f} M)"]
    lines += [f"  {group:<8s} {count:>10,}" for group, count in params.breakdown().items()]
    return "\n".join(lines)


def cmd_train(args) -> int:
    tc = _train_config(args)
    if args.dry_run:
        print(dry_run_report(tc))
        return EXIT_OK
    if not args.data:
        raise UsageError("--data is required unless --dry-run is given")
    manifest = _manifest(args.data)
    tc = TrainConfig.from_dict({**tc.to_dict(), "volume": asdict(_scene_volume(args.data, tc.volume))})
    samples = load_dataset(manifest, tc.frontend, split="train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"train": tc.to_dict()}, indent=2))
    result = train(samples, tc, log_path=out / "metrics.csv",
                   on_epoch=lambda m: print(f"epoch {m.epoch}: L_total={m.l_total:.4f} "
                                            f"L_cls={m.l_cls:.4f} L_pos={m.l_pos:.4f}", flush=True))
    save_checkpoint(out / "checkpoint.tame", result.checkpoint)
    print(f"checkpoint written to {out / 'checkpoint.tame'}")
    return EXIT_OK


def run_eval(model, test_set, trajectory=None, confusion=None, class_names=None) -> EvalReport:
    report = evaluate(model, test_set)
    print(report.table_line())
    if trajectory:
        emit_trajectory_csv(model, test_set, trajectory)
    if confusion:
        names = class_names or [f"class{i}" for i in range(report.confusion.shape[0])]
        emit_confusion_csv(report, names, confusion)
    return report


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise UsageError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    model = TrainedModel.from_checkpoint(ckpt)
    test_set = load_dataset(_manifest(args.data), ckpt.train_config.frontend, split=args.split)
    run_eval(model, test_set, args.emit_trajectory, args.emit_confusion)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _train_config(args)
    manifest = _manifest(args.data)
    base = TrainConfig.from_dict({**base.to_dict(), "volume": asdict(_scene_volume(args.data, base.volume))})
    train_set = load_dataset(manifest, base.frontend, split="train")
    test_set = load_dataset(manifest, base.frontend, split="test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"train": base.to_dict()}, indent=2))
    rows, failed = run_ablation(base, train_set, test_set)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "APE", "Acc"])
        w.writerows(rows)
    print(f"{'variant':<8s} {'APE':>8s} {'Acc(%)':>8s}")
    for name, ape, acc in rows:
        print(f"{name:<8s} {ape:>8s} {acc:>8s}")
    return EXIT_RUNTIME if failed else EXIT_OK


def run_ablation(base: TrainConfig, train_set, test_set, trainer=None):
    """Train and evaluate every variant; failures become ``FAILED`` rows."""
    trainer = trainer or train
    rows, failed = [], False
    for name, variant in ABLATION_ROWS:
        try:
            cfg = TrainConfig.from_dict({**base.to_dict(), "variant": variant.value})
            result = trainer(train_set, cfg)
            report = evaluate(result.model, test_set)
            rows.append((name, f"{report.ape:.4f}", f"{100.0 * report.acc:.2f}"))
        except Exception as exc:  # noqa: BLE001 - one variant failing must not stop the table
            print(f"variant {name} failed: {exc}", file=sys.stderr)
            rows.append((name, "FAILED", "FAILED"))
            failed = True
    return rows, failed


def cmd_check(args) -> int:
    import pytest

    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        raise UsageError(f"test suite not found at {tests}")
    return int(pytest.main([str(tests), *args.pytest_args]))


# -- parser ---------------------------------------------------------------------------
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--seed", type=int)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["default", "J16"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--out", default="ckpt")
    p.add_argument("--dry-run", action="store_true", help="print parameter counts and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--emit-trajectory", metavar="CSV")
    p.add_argument("--emit-confusion", metavar="CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all four variants")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check", help="run the property and oracle test suites")
    p.add_argument("pytest_args", nargs=argparse.REMAINDER)
    p.set_defaults(func=cmd_check)
    return parser


def _limit_threads():
    threads = os.environ.get("TAME_THREADS")
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except TameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
