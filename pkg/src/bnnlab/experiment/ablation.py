"""Normalizer x init-variance grid runner."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

from ..harness import worker_count
from .config import dataset_spec, read_kv, split_list, train_config
from .data import Dataset, load_dataset
from .train import train

log = logging.getLogger(__name__)

ABLATION_HEADER = ("normalizer", "variance", "seeds", "best_accuracy", "seed_best_accuracies",
                   "final_accuracy", "status")


@dataclass(frozen=True)
class Cell:
    normalizer: str
    variance: float


def suite_cells(kv: dict[str, str]) -> list[Cell]:
    norms = split_list(kv.get("normalizers", ""))
    variances = [float(v) for v in split_list(kv.get("variances", ""))]
    return [Cell(n, v) for n in norms for v in variances]


def suite_seeds(kv: dict[str, str]) -> list[int]:
    return [int(s) for s in split_list(kv.get("seeds", "0,1,2"))]


def run_cell(kv: dict[str, str], data: Dataset, seeds: list[int], cell: Cell) -> dict:
    """Train one cell for every seed; report the best accuracy over seeds and
    epochs, and epoch-0 gradient telemetry from the first seed."""
    row = {"normalizer": cell.normalizer, "variance": cell.variance,
           "seeds": ";".join(map(str, seeds))}
    try:
        records = [train(train_config(kv, cell.normalizer, cell.variance, s), data) for s in seeds]
    except Exception as exc:  # a broken cell must not stop the suite
        log.warning("cell %s failed: %s", cell, exc)
        row.update(best_accuracy="", seed_best_accuracies="", final_accuracy="",
                   status=f"error: {type(exc).__name__}: {exc}")
        return row
    best = [r.best_accuracy for r in records]
    diverged = sum(r.status != "ok" for r in records)
    row.update(
        best_accuracy=max(best),
        seed_best_accuracies=";".join(repr(b) for b in best),
        final_accuracy=max(r.final_accuracy for r in records),
        status="ok" if not diverged else f"diverged {diverged}/{len(records)}",
    )
    if records[0].grad_var is not None:
        for l, v in enumerate(records[0].grad_var, 1):
            row[f"grad_var_l{l}"] = v
    return row


def run_ablation(suite: dict[str, str] | str, data: Dataset | None = None,
                 workers: int | None = None) -> list[dict]:
    """Run every (normalizer, variance) cell with the same seeds. ``suite`` is
    a parsed key=value mapping or a path to one."""
    kv = read_kv(suite) if not isinstance(suite, dict) else suite
    cells = suite_cells(kv)
    if not cells:
        return []
    if data is None:
        data = load_dataset(dataset_spec(kv, prefix="data."))
    seeds = suite_seeds(kv)
    fn = partial(run_cell, kv, data, seeds)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(cells) == 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def best_by_normalizer(rows: list[dict]) -> dict[str, float]:
    """Best accuracy per normalizer across variances (the ablation table view)."""
    out: dict[str, float] = {}
    for r in rows:
        if r["best_accuracy"] == "":
            continue
        out[r["normalizer"]] = max(out.get(r["normalizer"], 0.0), r["best_accuracy"])
    return out
