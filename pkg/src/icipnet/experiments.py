"""Ablation matrix and prompt-count sweep over the synthetic data."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .metrics import MetricsReport, evaluate, write_report_csv
from .pipeline import ICIPNet, ModelConfig, format_config
from .training import LossConfig, OptimConfig, TrainConfig, stack_batch, train

ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class VariantResult:
    label: str
    config: ModelConfig
    report: MetricsReport
    initial_loss: float
    final_loss: float


def evaluate_model(model: ICIPNet, samples, batch_size: int = 16) -> MetricsReport:
    preds, gts, cats = [], [], []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images, ids, masks = stack_batch(chunk)
        preds.extend(model.predict(images, ids))
        gts.extend(masks)
        cats.extend(s.category for s in chunk)
    return evaluate(preds, gts, cats)


def run_variant(label: str, config: ModelConfig, train_set, eval_set, optim: OptimConfig,
                train_cfg: TrainConfig, out: str | os.PathLike | None = None) -> VariantResult:
    model = ICIPNet(config)
    history = train(train_set, model, optim, LossConfig(loss_lambda=config.loss_lambda), train_cfg, out)
    return VariantResult(label, config, evaluate_model(model, eval_set or train_set),
                         history.losses[0], history.losses[-1])


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ICIP_THREADS", "1")))
    except ValueError:
        return 1


def _run_all(jobs) -> list[VariantResult]:
    workers = min(_workers(), len(jobs))
    if workers == 1:
        return [run_variant(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_variant, *zip(*jobs)))


def ablate(config: ModelConfig, train_set, optim: OptimConfig, train_cfg: TrainConfig,
           eval_set=None, out: str | os.PathLike | None = None) -> list[VariantResult]:
    """Train the four ICIP/BIF on-off variants with shared seed and data.

    Rows come back in the order (off, off), (on, off), (off, on), (on, on).
    """
    jobs = []
    for use_icip, use_bif in ABLATION_GRID:
        label = f"icip={'on' if use_icip else 'off'},bif={'on' if use_bif else 'off'}"
        sub = None if out is None else Path(out) / label.replace(",", "_").replace("=", "-")
        jobs.append((label, config.replace(use_icip=use_icip, use_bif=use_bif),
                     train_set, eval_set, optim, train_cfg, sub))
    results = _run_all(jobs)
    if out is not None:
        write_ablation(results, out)
    return results


def sweep_prompts(config: ModelConfig, values, train_set, optim: OptimConfig,
                  train_cfg: TrainConfig, eval_set=None,
                  out: str | os.PathLike | None = None) -> list[VariantResult]:
    """One full-model run per prompt count, the count applied to every stage."""
    jobs = []
    for m in values:
        sub = None if out is None else Path(out) / f"prompts-{m}"
        jobs.append((f"+ICIP (M_i={m})", config.replace(prompt_counts=(m,) * 4),
                     train_set, eval_set, optim, train_cfg, sub))
    results = _run_all(jobs)
    if out is not None:
        write_sweep(results, out)
    return results


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def write_ablation(results: list[VariantResult], out: str | os.PathLike) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {(_mark(r.config.use_icip), _mark(r.config.use_bif)): r.report for r in results}
    write_report_csv(rows, out / "ablation.csv", label_columns=("ICIP", "BIF"))
    _write_losses(results, out / "ablation_training.csv")
    _write_configs(results, out / "variants.txt")


def write_sweep(results: list[VariantResult], out: str | os.PathLike) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv({r.label: r.report for r in results}, out / "prompt_sweep.csv",
                     label_columns=("Options",))
    _write_losses(results, out / "prompt_sweep_training.csv")
    _write_configs(results, out / "variants.txt")


def _write_losses(results, path: Path) -> None:
    lines = ["variant,initial_loss,final_loss,train_mIoU"]
    lines += [f"{r.label.replace(',', ';')},{r.initial_loss:.17g},{r.final_loss:.17g},{r.report.mIoU:.17g}"
              for r in results]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_configs(results, path: Path) -> None:
    blocks = [f"# {r.label}\n{format_config(r.config)}" for r in results]
    path.write_text("\n".join(blocks), encoding="utf-8")
