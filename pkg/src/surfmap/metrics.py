"""PCK / AUC evaluation against the generator's ground truth, report files and
qualitative images."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import PositionMap

ALPHAS = (0.01, 0.03, 0.1)
AUC_ALPHAS = np.linspace(0.01, 1.0, 100)
HEATMAP_RANGE = 0.25


class EmptyEvaluationError(ValueError):
    pass


def uv_distances(pred, gt, mask, seam_aware: bool = True) -> np.ndarray:
    """UV errors of the foreground pixels; u wraps modulo 1 when ``seam_aware``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyEvaluationError("empty mask")
    d = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(gt, dtype=np.float64)[mask]
    if seam_aware:
        du = np.abs(d[:, 0]) % 1.0
        d[:, 0] = np.minimum(du, 1.0 - du)
    return np.sqrt((d**2).sum(-1))


def pck_from_distances(d: np.ndarray, alpha: float) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(d) == 0:
        raise EmptyEvaluationError("no points to evaluate")
    return 100.0 * float(np.count_nonzero(d <= alpha)) / len(d)


def pck_uv(pred, gt, mask, alpha: float, seam_aware: bool = True) -> float:
    """Percentage of foreground pixels whose UV error is <= alpha."""
    return pck_from_distances(uv_distances(pred, gt, mask, seam_aware), alpha)


def posmap_distances(pred: PositionMap, gt: PositionMap) -> np.ndarray:
    if not np.array_equal(pred.validity, gt.validity):
        raise ValueError("position maps have different validity masks")
    diff = np.asarray(pred.grid, np.float64)[gt.validity] - np.asarray(gt.grid, np.float64)[gt.validity]
    return np.sqrt((diff**2).sum(-1))


def pck_posmap(pred: PositionMap, gt: PositionMap, alpha: float) -> float:
    return pck_from_distances(posmap_distances(pred, gt), alpha)


def auc(pck_fn, alphas=None) -> float:
    """Area under ``pck_fn`` over (0, alphas[-1]], normalised by that range.

    Trapezoid rule between thresholds; below the first threshold the curve is
    held at its first value, since PCK at alpha = 0 is undefined.
    """
    alphas = AUC_ALPHAS if alphas is None else np.asarray(alphas, dtype=np.float64)
    values = np.array([pck_fn(a) for a in alphas], dtype=np.float64)
    area = alphas[0] * values[0] + np.trapezoid(values, alphas)
    return float(area / alphas[-1])


@dataclass
class PckReport:
    uv_pck: dict
    uv_auc: float
    posmap_pck: dict
    n_pixels: int
    n_instances: int
    posmap_auc: float = float("nan")
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["uv_pck"] = {str(k): v for k, v in self.uv_pck.items()}
        d["posmap_pck"] = {str(k): v for k, v in self.posmap_pck.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PckReport":
        d = dict(d)
        d["uv_pck"] = {float(k): v for k, v in d["uv_pck"].items()}
        d["posmap_pck"] = {float(k): v for k, v in d["posmap_pck"].items()}
        return cls(**d)


def _curve(d: np.ndarray):
    s = np.sort(d)

    def fn(a):
        if a <= 0:
            raise ValueError("alpha must be positive")
        return 100.0 * np.searchsorted(s, a, side="right") / len(s)

    return fn


def evaluate_predictions(pred_uvs, pred_residuals, ds, split: str = "test", weighting: str = "pixel",
                         seam_aware: bool = True) -> PckReport:
    """Score predictions for every view of ``split``.

    ``pred_uvs[i]`` / ``pred_residuals[i]`` hold the (V, H, W, 2) and
    (V, S, S, 3) predictions of the i-th instance of the split (any indexable).
    ``weighting`` is ``"pixel"`` (pool all foreground pixels) or
    ``"instance"`` (average per-instance PCK).
    """
    if weighting not in ("pixel", "instance"):
        raise ValueError(f"unknown weighting {weighting!r}")
    ids = ds.split_ids(split)
    if not ids:
        raise EmptyEvaluationError(f"split {split!r} is empty")
    avg = ds.avg_posmap
    uv_d, pos_d = [], []
    for k, inst in enumerate(ids):
        d_inst = [uv_distances(pred_uvs[k][v], ds.uvs[inst, v], ds.masks[inst, v], seam_aware) for v in range(ds.n_views)]
        uv_d.append(np.concatenate(d_inst))
        gt = PositionMap(ds.gt_posmaps[inst], avg.validity)
        res = np.asarray(pred_residuals[k])
        pos_d.append([posmap_distances(PositionMap(avg.grid + res[v], avg.validity), gt) for v in range(ds.n_views)])

    def uv_pck(a):
        if weighting == "pixel":
            return pck_from_distances(np.concatenate(uv_d), a)
        return float(np.mean([pck_from_distances(d, a) for d in uv_d]))

    def pos_pck(a):
        # per-view PCK averaged over the instance's views, then over instances
        return float(np.mean([np.mean([pck_from_distances(d, a) for d in views]) for views in pos_d]))

    if weighting == "pixel":
        curve = _curve(np.concatenate(uv_d))
    else:
        curves = [_curve(d) for d in uv_d]
        curve = lambda a: float(np.mean([c(a) for c in curves]))  # noqa: E731
    pos_curves = [[_curve(d) for d in views] for views in pos_d]
    pos_curve = lambda a: float(np.mean([np.mean([c(a) for c in cs]) for cs in pos_curves]))  # noqa: E731
    return PckReport(
        uv_pck={a: uv_pck(a) for a in ALPHAS},
        uv_auc=auc(curve),
        posmap_pck={a: pos_pck(a) for a in ALPHAS},
        n_pixels=int(sum(len(d) for d in uv_d)),
        n_instances=len(ids),
        posmap_auc=auc(pos_curve),
        meta={"split": split, "weighting": weighting, "seam_aware": seam_aware},
    )


@torch.no_grad()
def predict_split(model, ds, split: str = "test"):
    """Run ``model`` over every view of the split; returns (uvs, residuals) lists."""
    uvs, residuals = [], []
    for inst in ds.split_ids(split):
        images = torch.from_numpy(ds.images[inst]).float() / 255.0
        out = model(images)
        uvs.append(out.uv.numpy())
        residuals.append(out.residual.numpy())
    return uvs, residuals


def evaluate_model(model, ds, split: str = "test", **kw) -> PckReport:
    model.eval()
    uvs, residuals = predict_split(model, ds, split)
    return evaluate_predictions(uvs, residuals, ds, split, **kw)


def evaluate_checkpoint(checkpoint, ds, split: str = "test", **kw) -> PckReport:
    from .dataset import load_dataset
    from .model import load_checkpoint

    if isinstance(ds, (str, Path)):
        ds = load_dataset(ds)
    model, state, _ = load_checkpoint(checkpoint)
    report = evaluate_model(model, ds, split, **kw)
    report.meta["checkpoint"] = str(checkpoint)
    report.meta["step"] = state.get("step")
    return report


# --- report files ----------------------------------------------------------


def _fmt(x):
    return f"{x:.1f}"


def report_rows(reports: dict) -> list[str]:
    """Markdown table with UV-PCK@{alphas}, AUC and PosMap-PCK@{alphas} columns."""
    head = ["Approach"] + [f"UV@{a}" for a in ALPHAS] + ["UV AUC"] + [f"PosMap@{a}" for a in ALPHAS]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, r in reports.items():
        cells = [name] + [_fmt(r.uv_pck[a]) for a in ALPHAS] + [_fmt(r.uv_auc)] + [_fmt(r.posmap_pck[a]) for a in ALPHAS]
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def write_report(report: PckReport, out_dir, config_hash: str = "", checkpoint_id: str = "", name: str = "model") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"report": report.to_json(), "config_hash": config_hash, "checkpoint": checkpoint_id}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    md = [f"# Evaluation ({report.meta.get('split', '?')} split, {report.n_instances} instances, {report.n_pixels} pixels)", ""]
    md += report_rows({name: report})
    (out / "report.md").write_text("\n".join(md) + "\n")
    return out / "report.json"


# --- qualitative -------------------------------------------------------------


def overlay_uv(image, uv, mask, alpha: float = 0.6) -> np.ndarray:
    """Blend a (u, v) -> (R, G) coloring over the foreground of ``image``."""
    img = np.asarray(image, dtype=np.uint8)
    mask = np.asarray(mask, dtype=bool)
    out = img.copy()
    if not mask.any():
        return out
    uv = np.clip(np.asarray(uv, dtype=np.float64), 0.0, 1.0)
    color = np.zeros(img.shape, dtype=np.float64)
    color[..., 0] = uv[..., 0] * 255.0
    color[..., 1] = uv[..., 1] * 255.0
    blend = alpha * color + (1.0 - alpha) * img.astype(np.float64)
    out[mask] = np.clip(np.round(blend[mask]), 0, 255).astype(np.uint8)
    return out


def heat_color(t: np.ndarray) -> np.ndarray:
    """Scalar colormap on [0, 1]: blue (0, 0, 255) at 0 ramping linearly to red (255, 0, 0) at 1."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.stack([255.0 * t, np.zeros_like(t), 255.0 * (1.0 - t)], axis=-1)


def deformation_heatmap(posmap: PositionMap, avg: PositionMap) -> np.ndarray:
    """Per-texel deformation magnitude over [0, 0.25]; invalid texels black."""
    if posmap.grid.shape != avg.grid.shape:
        raise ValueError("position maps differ in shape")
    mag = np.linalg.norm(np.asarray(posmap.grid, np.float64) - np.asarray(avg.grid, np.float64), axis=-1)
    rgb = np.round(heat_color(mag / HEATMAP_RANGE)).astype(np.uint8)
    rgb[~avg.validity] = 0
    return rgb
