"""Training loop for the ablation cells and single-image prediction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..dataset import MultiViewDataset, load_dataset
from ..geometry import PositionMap
from ..losses import total_loss
from ..model import ModelOutput, SurfaceMapNet, build_model, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import TensorDataset, sample_pair_batch

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss; ``dump`` names the diagnostic file."""

    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_log: Path
    model: SurfaceMapNet
    final: dict


def _dump_batch(out_dir: Path, step: int, rows, breakdown) -> Path:
    path = out_dir / f"nonfinite_step{step}.json"
    path.write_text(json.dumps({
        "step": step,
        "rows": np.asarray(rows).tolist(),
        "terms": {k: float(v.detach()) for k, v in breakdown.terms.items()},
    }, indent=1))
    return path


def train(cfg: RunConfig, ds: MultiViewDataset | None = None, tds: TensorDataset | None = None) -> TrainResult:
    """Optimise the network for ``cfg.steps`` steps; returns the final checkpoint.

    Writes ``metrics.jsonl`` (one LossBreakdown per step) and checkpoints to
    ``cfg.out_dir``. Raises :class:`NumericError` on a non-finite loss.
    """
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    if tds is None:
        ds = ds or load_dataset(cfg.dataset_path)
        tds = TensorDataset(ds)
    ds = tds.ds

    model = build_model(cfg.seed, cfg.model_config())
    fixed = cfg.mode == "fixed_mesh"
    if fixed:
        for p in model.residual_head.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1)) if cfg.lr_schedule == "cosine" else None
    weights = cfg.loss_weights()
    uv_opts = cfg.uv_options()
    loss_mode = "supervised" if cfg.mode == "supervised" else "weak"
    rng = np.random.default_rng(cfg.seed)
    train_ids = ds.split_ids("train")
    log_path = out_dir / "metrics.jsonl"
    ckpt = out_dir / "checkpoint_final.zip"
    final = {}

    model.train()
    with open(log_path, "w") as logf:
        for step in range(1, cfg.steps + 1):
            rows = sample_pair_batch(ds, cfg.batch_pairs, rng, train_ids, cfg.max_azimuth_deg)
            images, batch = tds.batch(rows, with_labels=cfg.mode == "supervised")
            if not cfg.multiview:
                batch.pairs = None
            if cfg.visibility == "chart":
                batch.avg_depth = None
            out = model(images)
            if step <= cfg.residual_warmup:
                # the UV head settles on the average mesh before the residual can absorb its errors
                out = out._replace(residual=torch.zeros_like(out.residual))
            bd = total_loss(out, batch, tds.avg, tds.validity, weights, loss_mode, cfg.use_seg, uv_opts)
            if not torch.isfinite(bd.total):
                dump = _dump_batch(out_dir, step, rows, bd)
                raise NumericError(f"non-finite loss at step {step}; batch dumped to {dump}", dump)
            if fixed:
                assert float(out.residual.detach().abs().max()) == 0.0, "fixed_mesh residual left zero"
            if not cfg.multiview:
                assert float(bd.terms["uv"]) == 0.0
            opt.zero_grad(set_to_none=True)
            bd.total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            logf.write(bd.to_json(step) + "\n")
            if step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.zip", model, step, ds.avg_posmap,
                                {"config_hash": cfg.hash(), "dataset": str(cfg.dataset_path)})
            final = json.loads(bd.to_json(step))
    save_checkpoint(ckpt, model, cfg.steps, ds.avg_posmap, {"config_hash": cfg.hash(), "dataset": str(cfg.dataset_path)})
    model.eval()
    return TrainResult(ckpt, log_path, model, final)


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- prediction ---------------------------------------------------------------


@dataclass
class Prediction:
    output: ModelOutput  # single-image tensors
    mask: np.ndarray  # (H, W) bool from the segmentation head
    posmap: PositionMap  # avg + residual, clamped to the unit cube


def predict_with(model, avg_posmap: PositionMap, image) -> Prediction:
    """Single-image inference; ``image`` is (H, W, 3) uint8 or floats in [0, 1]."""
    img = np.asarray(image)
    x = torch.from_numpy(img.astype(np.float32) / (255.0 if img.dtype == np.uint8 else 1.0))
    with torch.no_grad():
        out = model(x)
    posmap = PositionMap(np.asarray(avg_posmap.grid, np.float64) + out.residual.double().numpy(), avg_posmap.validity)
    return Prediction(out, out.seg_logits[..., 0].numpy() > 0, posmap.clamped())


def predict(checkpoint, image) -> Prediction:
    model, _, avg = load_checkpoint(checkpoint)
    if avg is None:
        raise ValueError("checkpoint carries no average position map")
    size = model.cfg.image_size
    if np.asarray(image).shape[:2] != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {np.asarray(image).shape[:2]}")
    return predict_with(model, avg, image)


def untrained_model(cfg: RunConfig) -> SurfaceMapNet:
    return build_model(cfg.seed, cfg.model_config()).eval()

