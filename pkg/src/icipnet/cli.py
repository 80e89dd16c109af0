"""Command-line entry point: ``icipnet <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command appends one JSON record to the run log (``--manifest``).
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, inject_sign_flip
from .checks import run_checks
from .experiments import ablate, evaluate_model, sweep_prompts
from .metrics import evaluate, write_category_csv, write_report_csv
from .pipeline import ConfigError, ICIPNet, ModelConfig, format_config, load_checkpoint, load_config
from .synthdata import GenerationError, MaskFormatError, SynthConfig, decode_mask, encode_mask, \
    generate, load_dataset, save_dataset
from .training import OptimConfig, TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
DEFAULT_MANIFEST = "icip_runs.jsonl"

log = logging.getLogger("icipnet")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _model_config(path: str | None) -> ModelConfig:
    return ModelConfig() if path is None else load_config(path)


def _synth_config(cfg: ModelConfig) -> SynthConfig:
    return SynthConfig(image_size=cfg.image_size, grid=cfg.patch_size, text_len=cfg.text_len,
                       vocab_size=cfg.vocab_size)


def _training(args, steps: int) -> tuple[OptimConfig, TrainConfig]:
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    optim = OptimConfig(lr=args.lr, weight_decay=args.wd, total_steps=max(steps, 1), power=args.power)
    return optim, TrainConfig(steps=steps, batch_size=args.batch_size, seed=args.seed)


def _load_data(path: str):
    if not (Path(path) / "manifest.csv").is_file():
        raise UsageError(f"{path} is not a dataset directory (no manifest.csv)")
    data = load_dataset(path)
    if not data:
        raise UsageError(f"{path} holds no samples")
    return data


# -- commands ------------------------------------------------------------------------

def cmd_gen(args) -> dict:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = _model_config(args.config)
    samples = generate(args.count, _synth_config(cfg), seed=args.seed)
    save_dataset(samples, args.out)
    return {"config": format_config(cfg), "seed": args.seed, "outputs": [str(args.out)]}


def cmd_train(args) -> dict:
    cfg = _model_config(args.config)
    data = _load_data(args.data)
    optim, tcfg = _training(args, args.steps)
    model = ICIPNet(cfg)
    history = train(data, model, optim, cfg=tcfg, out=args.out)
    if history.losses:
        print(f"trained {tcfg.steps} steps: loss {history.losses[0]:.6f} -> {history.losses[-1]:.6f}")
    return {"config": format_config(cfg), "seed": args.seed,
            "training": dataclasses.asdict(optim) | dataclasses.asdict(tcfg),
            "outputs": [str(Path(args.out) / "history.csv"), str(Path(args.out) / "checkpoint")]}


def _self_check(data) -> None:
    for k, s in enumerate(data):
        if not np.array_equal(decode_mask(encode_mask(s.mask)), s.mask):
            raise MaskFormatError(f"sample {k}: mask does not round-trip")
    print(f"self-check: {len(data)} masks round-trip")


def cmd_eval(args) -> dict:
    data = _load_data(args.data)
    if args.self_check:
        _self_check(data)
    if args.use_ground_truth:
        report = evaluate([s.mask for s in data], [s.mask for s in data], [s.category for s in data])
        config_text = None
    elif args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        report = evaluate_model(model, data)
        config_text = format_config(model.config)
    elif args.self_check:
        return {"outputs": []}
    else:
        raise UsageError("eval needs --checkpoint, --use-ground-truth or --self-check")
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "metrics.csv")
    write_category_csv(report, out / "categories.csv")
    cells = ", ".join(f"P@{t}={v:.4f}" for t, v in report.precision_at.items())
    print(f"{report.n_samples} samples: mIoU={report.mIoU:.4f} oIoU={report.oIoU:.4f} {cells}")
    return {"config": config_text, "outputs": [str(out / "metrics.csv"), str(out / "categories.csv")]}


def cmd_gradcheck(args) -> dict:
    only = set(args.only.split(",")) if args.only else None
    if args.inject_sign_flip:
        with inject_sign_flip(args.inject_sign_flip):
            results = run_checks(step=args.step, only=only)
    else:
        results = run_checks(step=args.step, only=only)
    failed = [r.name for r in results if not r.passed(args.tolerance)]
    for r in results:
        status = "PASS" if r.passed(args.tolerance) else "FAIL"
        print(f"{status} {r.name:<32} max_rel_err={r.error:.3e} ({r.seconds:.2f}s)")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed at tolerance {args.tolerance:g}")
    record = {"tolerance": args.tolerance, "failed": failed, "outputs": []}
    if failed:
        record["exit"] = EXIT_NUMERIC
    return record


def cmd_ablate(args) -> dict:
    cfg = _model_config(args.config)
    data = _load_data(args.data)
    optim, tcfg = _training(args, args.steps)
    results = ablate(cfg, data, optim, tcfg, out=args.out)
    for r in results:
        print(f"{r.label:<18} loss {r.initial_loss:.5f} -> {r.final_loss:.5f}  train mIoU {r.report.mIoU:.4f}")
    return {"config": format_config(cfg), "seed": args.seed,
            "variants": {r.label: format_config(r.config) for r in results},
            "outputs": [str(Path(args.out) / "ablation.csv")]}


def cmd_sweep_prompts(args) -> dict:
    try:
        values = [int(v) for v in args.values.split(",")]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values or min(values) < 1:
        raise UsageError("prompt counts must be >= 1")
    cfg = _model_config(args.config)
    data = _load_data(args.data)
    optim, tcfg = _training(args, args.steps)
    results = sweep_prompts(cfg, values, data, optim, tcfg, out=args.out)
    for r in results:
        print(f"{r.label:<18} loss {r.initial_loss:.5f} -> {r.final_loss:.5f}  train mIoU {r.report.mIoU:.4f}")
    return {"config": format_config(cfg), "seed": args.seed,
            "variants": {r.label: format_config(r.config) for r in results},
            "outputs": [str(Path(args.out) / "prompt_sweep.csv")]}


# -- parser ------------------------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser, steps: int) -> None:
    p.add_argument("--config", help="model config file (key = value lines)")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--lr", type=float, default=3e-5)
    p.add_argument("--wd", type=float, default=0.01, help="decoupled weight decay")
    p.add_argument("--power", type=float, default=0.9, help="polynomial decay exponent")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0, help="data-order seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icipnet", description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", default=DEFAULT_MANIFEST, help="run log to append to")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_training_flags(p, steps=300)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--report", default="report")
    p.add_argument("--use-ground-truth", action="store_true",
                   help="score the ground-truth masks against themselves")
    p.add_argument("--self-check", action="store_true", help="verify mask round-trips")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", help="accepted for symmetry; checks use the tiny config")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--only", help="comma-separated check names")
    p.add_argument("--inject-sign-flip", metavar="OP", help="negate OP's backward (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="ICIP/BIF on-off matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_training_flags(p, steps=300)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-prompts", help="prompt-count sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--values", default="3,5,8")
    _add_training_flags(p, steps=300)
    p.set_defaults(func=cmd_sweep_prompts)
    return parser


def _append_manifest(path: str, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    record = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "start": _now(), "version": _version()}
    code = EXIT_OK
    try:
        result = args.func(args)
        code = result.pop("exit", EXIT_OK)
        record.update(result)
    except (UsageError, ConfigError, GenerationError, MaskFormatError, ValueError, OSError) as exc:
        print(f"icipnet {args.command}: error: {exc}", file=sys.stderr)
        if args.command == "gen" and isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        code = EXIT_USAGE
        record["error"] = str(exc)
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"icipnet {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
        record["error"] = str(exc)
    record.update(end=_now(), exit=code)
    _append_manifest(args.manifest, record)
    return code


if __name__ == "__main__":
    sys.exit(main())
