"""Weak-supervision losses: reprojection, visibility, deformation regularizer and
multi-view UV consistency, plus the dense losses of the supervised baseline.

All functions accept a single view (``uv`` of shape (H, W, 2)) or a batch
(``(B, H, W, 2)`` with batched cameras) and return a scalar tensor; batched
inputs are reduced per view first and then averaged over views.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .geometry import (
    EPS_DEPTH,
    CameraLike,
    CameraPose,
    CameraTensors,
    bilinear_corners,
    compose_posmap,
    pixel_grid,
    pixels_to_coords,
    project,
    sample_bilinear,
)
from .model import ModelOutput

log = logging.getLogger(__name__)


class EmptyMaskError(ValueError):
    """A loss that averages over foreground pixels received an empty mask."""


def _batch(uv, mask, *grids):
    single = uv.dim() == 3
    if single:
        uv = uv.unsqueeze(0)
        mask = mask.unsqueeze(0)
    B = uv.shape[0]
    out = []
    for g in grids:
        if g is None:
            out.append(None)
            continue
        out.append(g.expand(B, *g.shape[-3:]) if g.dim() == 3 else g)
    return uv, mask.bool(), out


def _cam(cam: CameraLike, like: torch.Tensor, B: int) -> CameraTensors:
    if isinstance(cam, CameraPose):
        cam = cam.tensors(dtype=like.dtype, device=like.device)
    if cam.R.dim() == 2:
        cam = CameraTensors(*(x.unsqueeze(0).expand(B, *x.shape) for x in cam))
    return cam


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-view mean over the mask, then mean over views. values/mask: (B, N)."""
    n = mask.sum(1)
    if bool((n == 0).any()):
        raise EmptyMaskError("loss requires at least one foreground pixel per view")
    per_view = torch.where(mask, values, torch.zeros_like(values)).sum(1) / n
    return per_view.mean()


def _lift_and_project(uv, posmap, cam):
    B, H, W, _ = uv.shape
    points = sample_bilinear(posmap, uv.reshape(B, H * W, 2))
    return project(points, cam)


def reprojection_loss(uv, posmap, cam, mask) -> torch.Tensor:
    """Mean squared closure error of the pixel -> UV -> 3D -> pixel cycle.

    Displacements are divided by the image width. Points that land behind the
    camera cost a fixed ``(W^2 + H^2) / W^2``.
    """
    uv, mask, (posmap,) = _batch(uv, mask, posmap)
    B, H, W, _ = uv.shape
    cam = _cam(cam, uv, B)
    pix, depth = _lift_and_project(uv, posmap, cam)
    target = pixel_grid(H, W, dtype=uv.dtype, device=uv.device).reshape(1, H * W, 2)
    err = (((pix - target) / W) ** 2).sum(-1)
    penalty = torch.full_like(err, (W * W + H * H) / (W * W))
    err = torch.where(depth <= EPS_DEPTH, penalty, err)
    return _masked_mean(err, mask.reshape(B, H * W))


def visibility_loss(uv, posmap, avg_posmap, cam, mask) -> torch.Tensor:
    """Hinge on the depth of the predicted surface point behind the average
    surface point at the same UV: mean of max(0, z - z_avg)."""
    uv, mask, (posmap, avg_posmap) = _batch(uv, mask, posmap, avg_posmap)
    B, H, W, _ = uv.shape
    cam = _cam(cam, uv, B)
    _, z = _lift_and_project(uv, posmap, cam)
    _, z_avg = _lift_and_project(uv, avg_posmap, cam)
    return _masked_mean(F.relu(z - z_avg), mask.reshape(B, H * W))


def rendered_visibility_loss(uv, posmap, depth_map, cam, mask) -> torch.Tensor:
    """Hinge of the predicted point's depth behind the average mesh's rendered
    depth at the pixel it reprojects to: mean of max(0, z - depth_map(p')).

    ``depth_map`` is (H, W) or (B, H, W) with 0 marking background; points
    that reproject onto background are not penalised.
    """
    uv, mask, (posmap,) = _batch(uv, mask, posmap)
    B, H, W, _ = uv.shape
    cam = _cam(cam, uv, B)
    depth_map = depth_map.expand(B, H, W)
    pix, z = _lift_and_project(uv, posmap, cam)
    corners, weights = bilinear_corners(depth_map.unsqueeze(-1), pixels_to_coords(pix, H, W))
    corners = corners[..., 0].detach()
    covered = (corners > 0).all(-1) & (z > EPS_DEPTH)
    covered &= (pix[..., 0] >= 0) & (pix[..., 0] <= W - 1) & (pix[..., 1] >= 0) & (pix[..., 1] <= H - 1)
    z_render = (corners * weights).sum(-1)
    hinge = torch.where(covered, F.relu(z - z_render), torch.zeros_like(z))
    return _masked_mean(hinge, mask.reshape(B, H * W))


def deformation_reg(residual, validity) -> torch.Tensor:
    """Smoothness over 4-neighbour valid texel pairs plus L2 over valid texels."""
    if residual.dim() == 3:
        residual = residual.unsqueeze(0)
    valid = torch.as_tensor(validity, dtype=torch.bool, device=residual.device)
    pair_h = valid[:, 1:] & valid[:, :-1]
    pair_v = valid[1:, :] & valid[:-1, :]
    dh = ((residual[:, :, 1:] - residual[:, :, :-1]) ** 2).sum(-1)
    dv = ((residual[:, 1:, :] - residual[:, :-1, :]) ** 2).sum(-1)
    n_pairs = pair_h.sum() + pair_v.sum()
    smooth = (dh * pair_h).sum((1, 2)) + (dv * pair_v).sum((1, 2))
    smooth = smooth / n_pairs.clamp(min=1)
    l2 = ((residual**2).sum(-1) * valid).sum((1, 2)) / valid.sum().clamp(min=1)
    return (smooth + l2).mean()


def wrap_uv_diff(diff: torch.Tensor) -> torch.Tensor:
    """Wrap the u component of a UV difference into [-0.5, 0.5]."""
    du = diff[..., :1]
    return torch.cat([du - torch.round(du.detach()), diff[..., 1:]], dim=-1)


@dataclass
class UVConsistencyOptions:
    landing_mask: bool = True  # drop transports landing off-frame / on background
    occlusion_tol: float | None = 0.05  # None disables the average-mesh depth test
    seam_aware: bool = True


def _transport_terms(uv_a, res_a, mask_a, uv_b, mask_b, cam_b, avg, opts: UVConsistencyOptions):
    """Squared UV disagreement for every pixel of view a carried into view b.

    Returns (errors (B, HW), keep mask (B, HW)).
    """
    B, H, W, _ = uv_a.shape
    D_a = compose_posmap(res_a, avg)
    src = uv_a.reshape(B, H * W, 2)
    points = sample_bilinear(D_a, src)
    q, z = project(points, cam_b)
    coords = pixels_to_coords(q, H, W)
    corners, weights = bilinear_corners(uv_b, coords)
    if opts.seam_aware:
        diff = (wrap_uv_diff(src.unsqueeze(-2) - corners) * weights.unsqueeze(-1)).sum(-2)
    else:
        diff = src - (corners * weights.unsqueeze(-1)).sum(-2)
    err = (diff**2).sum(-1)

    keep = mask_a.reshape(B, H * W).clone()
    with torch.no_grad():
        in_front = z > EPS_DEPTH
        keep &= in_front
        if opts.landing_mask:
            inside = (q[..., 0] >= 0) & (q[..., 0] <= W - 1) & (q[..., 1] >= 0) & (q[..., 1] <= H - 1)
            fg = sample_bilinear(mask_b.to(uv_a.dtype).unsqueeze(-1), coords)[..., 0] > 1.0 - 1e-6
            keep &= inside & fg
        if opts.occlusion_tol is not None:
            uv_land = (corners * weights.unsqueeze(-1)).sum(-2)
            _, z_avg = project(sample_bilinear(avg.expand(B, *avg.shape[-3:]), uv_land), cam_b)
            keep &= z <= z_avg + opts.occlusion_tol
    return err, keep


def multiview_uv_loss(out1, out2, cam1, cam2, mask1, mask2, avg_posmap, opts: UVConsistencyOptions | None = None):
    """UV agreement between two views of one instance, both directions.

    ``out1``/``out2`` are ModelOutput-like (``.uv``, ``.residual``), single or
    batched over pairs. Returns the mean over pairs of mean(1->2) + mean(2->1).
    """
    opts = opts or UVConsistencyOptions()
    uv1, m1, (res1,) = _batch(out1.uv, mask1, out1.residual)
    uv2, m2, (res2,) = _batch(out2.uv, mask2, out2.residual)
    B = uv1.shape[0]
    c1, c2 = _cam(cam1, uv1, B), _cam(cam2, uv1, B)
    total = uv1.new_zeros(B)
    any_kept = torch.zeros(B, dtype=torch.bool)
    for err, keep in (
        _transport_terms(uv1, res1, m1, uv2, m2, c2, avg_posmap, opts),
        _transport_terms(uv2, res2, m2, uv1, m1, c1, avg_posmap, opts),
    ):
        n = keep.sum(1)
        s = torch.where(keep, err, torch.zeros_like(err)).sum(1)
        total = total + s / n.clamp(min=1)
        any_kept |= n > 0
    if not bool(any_kept.all()):
        log.warning("multiview_uv_loss: %d view pair(s) share no visible surface", int((~any_kept).sum()))
    return total.mean()


def segmentation_loss(seg_logits, mask) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(seg_logits[..., 0], mask.to(seg_logits.dtype))


def supervised_uv_loss(uv, gt_uv, mask, seam_aware: bool = True) -> torch.Tensor:
    """Masked mean squared UV error against dense labels."""
    uv, mask, (gt_uv,) = _batch(uv, mask, gt_uv)
    diff = uv - gt_uv
    if seam_aware:
        diff = wrap_uv_diff(diff)
    B = uv.shape[0]
    return _masked_mean((diff**2).sum(-1).reshape(B, -1), mask.reshape(B, -1))


def supervised_posmap_loss(posmap, gt_posmap, validity) -> torch.Tensor:
    """Mean squared 3D error over valid texels."""
    if posmap.dim() == 3:
        posmap, gt_posmap = posmap.unsqueeze(0), gt_posmap.unsqueeze(0)
    valid = torch.as_tensor(validity, dtype=torch.bool, device=posmap.device).reshape(1, -1)
    B = posmap.shape[0]
    err = ((posmap - gt_posmap) ** 2).sum(-1).reshape(B, -1)
    return _masked_mean(err, valid.expand(B, -1))


# --- combination -------------------------------------------------------------


@dataclass
class LossWeights:
    repr: float = 1.0
    vis: float = 1.0
    deform: float = 0.025
    uv: float = 1.0
    seg: float = 1.0
    sup_uv: float = 1.0
    sup_posmap: float = 1.0

    def __post_init__(self):
        if any(w < 0 for w in self.as_tuple()):
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return (self.repr, self.vis, self.deform, self.uv, self.seg, self.sup_uv, self.sup_posmap)


TERMS = ("repr", "vis", "deform", "uv", "seg", "sup_uv", "sup_posmap")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict  # name -> scalar tensor
    weights: LossWeights
    n_fg_pixels: int = 0
    extra: dict = field(default_factory=dict)

    def __getattr__(self, name):
        terms = self.__dict__.get("terms", {})
        if name in terms:
            return terms[name]
        raise AttributeError(name)

    def recombine(self) -> torch.Tensor:
        return sum(getattr(self.weights, k) * self.terms[k] for k in TERMS)

    def to_json(self, step: int | None = None) -> str:
        d = {"total": float(self.total.detach())}
        for k in TERMS:
            d["def" if k == "deform" else k] = float(self.terms[k].detach())
        d["weights"] = {("def" if k == "deform" else k): getattr(self.weights, k) for k in TERMS}
        d["n_fg_pixels"] = int(self.n_fg_pixels)
        if step is not None:
            d = {"step": step, **d}
        d.update(self.extra)
        return json.dumps(d, sort_keys=False)


@dataclass
class LossBatch:
    """Per-view tensors of one training batch; ``pairs`` index views of the
    same instance as (a, b) rows."""

    masks: torch.Tensor  # (B, H, W) bool
    cams: CameraTensors  # batched (B)
    pairs: torch.Tensor | None = None  # (P, 2) long
    gt_uv: torch.Tensor | None = None  # (B, H, W, 2)
    gt_posmap: torch.Tensor | None = None  # (B, S, S, 3)
    avg_depth: torch.Tensor | None = None  # (B, H, W) average surface depth, 0 = background


def total_loss(
    outputs,
    batch: LossBatch,
    avg_posmap: torch.Tensor,
    validity,
    weights: LossWeights | None = None,
    mode: str = "weak",
    use_seg: bool = True,
    uv_opts: UVConsistencyOptions | None = None,
) -> LossBreakdown:
    """Weighted sum of the loss terms for one batch.

    ``mode="weak"`` uses the reprojection, visibility, deformation and (if
    ``batch.pairs`` is given) multi-view terms; ``mode="supervised"`` replaces
    them with dense-label losses on UV and the composed position map.
    """
    w = weights or LossWeights()
    zero = outputs.uv.new_zeros(())
    terms = {k: zero for k in TERMS}
    posmap = compose_posmap(outputs.residual, avg_posmap)
    masks = batch.masks.bool()
    if mode == "weak":
        terms["repr"] = reprojection_loss(outputs.uv, posmap, batch.cams, masks)
        if batch.avg_depth is not None:
            terms["vis"] = rendered_visibility_loss(outputs.uv, posmap, batch.avg_depth, batch.cams, masks)
        else:
            terms["vis"] = visibility_loss(outputs.uv, posmap, avg_posmap, batch.cams, masks)
        terms["deform"] = deformation_reg(outputs.residual, validity)
        if batch.pairs is not None and len(batch.pairs):
            a, b = batch.pairs[:, 0], batch.pairs[:, 1]
            terms["uv"] = multiview_uv_loss(
                ModelOutput(outputs.uv[a], None, outputs.residual[a]),
                ModelOutput(outputs.uv[b], None, outputs.residual[b]),
                batch.cams.index(a),
                batch.cams.index(b),
                masks[a],
                masks[b],
                avg_posmap,
                uv_opts,
            )
    elif mode == "supervised":
        terms["sup_uv"] = supervised_uv_loss(outputs.uv, batch.gt_uv, masks)
        terms["sup_posmap"] = supervised_posmap_loss(posmap, batch.gt_posmap, validity)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    if use_seg:
        terms["seg"] = segmentation_loss(outputs.seg_logits, masks)
    total = sum(getattr(w, k) * terms[k] for k in TERMS)
    return LossBreakdown(total, terms, w, int(masks.sum()))

