"""Ablation ladder: fixed vs. deformed mesh, single- vs. multi-view, plus the
supervised upper bound, trained with shared seeds and step budget."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import load_dataset
from ..metrics import ALPHAS, PckReport, evaluate_model, report_rows, write_report
from ..model import load_checkpoint
from .config import RunConfig
from .data import TensorDataset
from .train import train

log = logging.getLogger(__name__)

# (cell name, table label, config overrides)
CELLS = (
    ("fixed_single", "Fixed mesh, single-view", {"mode": "fixed_mesh", "multiview": False}),
    ("fixed_multi", "Fixed mesh, multi-view", {"mode": "fixed_mesh", "multiview": True}),
    ("deformed_single", "Deformed mesh, single-view", {"mode": "deformed", "multiview": False}),
    ("deformed_multi", "Deformed mesh, multi-view", {"mode": "deformed", "multiview": True}),
    ("supervised", "Fully supervised", {"mode": "supervised", "multiview": False}),
)


@dataclass
class AblationResult:
    reports: dict  # cell -> median PckReport over seeds
    seed_reports: dict  # cell -> [PckReport per seed]
    checkpoints: dict  # cell -> [checkpoint path per seed]
    table: Path
    meta: dict = field(default_factory=dict)

    def metric(self, cell: str, key: str = "uv", alpha: float = 0.1) -> float:
        r = self.reports[cell]
        return (r.uv_pck if key == "uv" else r.posmap_pck)[alpha]


def median_report(reports: list[PckReport]) -> PckReport:
    """Element-wise median of every metric across seeds."""
    med = lambda xs: float(np.median(xs))  # noqa: E731
    return PckReport(
        uv_pck={a: med([r.uv_pck[a] for r in reports]) for a in ALPHAS},
        uv_auc=med([r.uv_auc for r in reports]),
        posmap_pck={a: med([r.posmap_pck[a] for r in reports]) for a in ALPHAS},
        n_pixels=reports[0].n_pixels,
        n_instances=reports[0].n_instances,
        posmap_auc=med([r.posmap_auc for r in reports]),
        meta={**reports[0].meta, "aggregate": "median", "n_seeds": len(reports)},
    )


def _finished_run(cfg: RunConfig):
    """Checkpoint of a completed run with exactly this config, if one exists."""
    out = Path(cfg.out_dir)
    ckpt, saved = out / "checkpoint_final.zip", out / "config.json"
    if ckpt.exists() and saved.exists() and json.loads(saved.read_text()) == cfg.to_json():
        return ckpt
    return None


def run_ablation_suite(base: RunConfig, cells=None, ds=None, resume: bool = False) -> AblationResult:
    """Train every cell for every seed of ``base.ablation_seeds``; evaluate on
    ``base.eval_split`` and write per-cell reports plus one merged table.

    With ``resume``, runs whose output directory already holds a final
    checkpoint trained from the identical config are evaluated, not retrained.
    """
    names = [c[0] for c in CELLS] if cells is None else list(cells)
    spec = {c[0]: c for c in CELLS}
    unknown = set(names) - set(spec)
    if unknown:
        raise ValueError(f"unknown ablation cells: {sorted(unknown)}")
    ds = ds or load_dataset(base.dataset_path)
    tds = TensorDataset(ds)
    root = Path(base.out_dir)
    root.mkdir(parents=True, exist_ok=True)

    reports, seed_reports, checkpoints, seconds = {}, {}, {}, {}
    for name in names:
        _, label, overrides = spec[name]
        seed_reports[name], checkpoints[name], seconds[name] = [], [], []
        for seed in base.ablation_seeds:
            cfg = base.replace(**overrides, seed=int(seed), out_dir=str(root / name / f"seed_{seed}"))
            ckpt = _finished_run(cfg) if resume else None
            timing = Path(cfg.out_dir) / "train_seconds.json"
            if ckpt is not None:
                log.info("ablation cell %s seed %s: reusing %s", name, seed, ckpt)
                model = load_checkpoint(ckpt)[0]
                train_s = json.loads(timing.read_text()) if timing.exists() else float("nan")
            else:
                log.info("ablation cell %s seed %s", name, seed)
                t0 = time.perf_counter()
                res = train(cfg, tds=tds)
                train_s = time.perf_counter() - t0
                timing.write_text(json.dumps(train_s))
                ckpt, model = res.checkpoint, res.model
            report = evaluate_model(model, ds, cfg.eval_split)
            report.meta.update({"cell": name, "seed": int(seed)})
            write_report(report, cfg.out_dir, cfg.hash(), ckpt.name, label)
            seed_reports[name].append(report)
            checkpoints[name].append(ckpt)
            seconds[name].append(train_s)
        reports[name] = median_report(seed_reports[name])
        write_report(reports[name], root / name, base.hash(), "median", label)

    lines = [
        f"# Ablation ({base.eval_split} split, {base.steps} steps per cell, "
        f"median of seeds {list(base.ablation_seeds)})",
        "",
    ]
    lines += report_rows({spec[n][1]: reports[n] for n in names})
    table = root / "ablation.md"
    table.write_text("\n".join(lines) + "\n")
    summary = {n: reports[n].to_json() for n in names}
    (root / "ablation.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return AblationResult(reports, seed_reports, checkpoints, table, meta={"cells": names, "seconds": seconds})
