"""Differentiable geometric kernels shared by the generator, losses and metrics.

Conventions used throughout the package:

* Pixel ``(x, y)`` addresses column ``x`` and row ``y``; integer coordinates are
  pixel centers.
* UV coordinate ``(u, v)`` addresses column ``u * (S - 1)`` and row
  ``v * (S - 1)`` of an ``S x S`` grid, so ``(0, 0)`` and ``(1, 1)`` sit on the
  corner texel centers.
* Cameras follow the usual computer-vision frame: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
import torch

EPS_DEPTH = 1e-6


class BehindCameraError(ValueError):
    """Raised by strict projection when a point has depth <= EPS_DEPTH."""


@dataclass
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    focal: tuple[float, float]
    principal: tuple[float, float]
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = (float(self.focal[0]), float(self.focal[1]))
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world (frontalized) coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def validate(self, tol: float = 1e-6) -> None:
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() >= tol or np.linalg.det(R) <= 0:
            raise ValueError("camera rotation is not a proper rotation matrix")
        if min(self.focal) <= 0 or min(self.image_size) <= 0:
            raise ValueError("camera focal lengths and image size must be positive")

    def to_json(self) -> dict:
        return {
            "R": [float(x) for x in self.rotation.reshape(-1)],
            "t": [float(x) for x in self.translation],
            "fx": self.focal[0],
            "fy": self.focal[1],
            "cx": self.principal[0],
            "cy": self.principal[1],
            "W": self.image_size[0],
            "H": self.image_size[1],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=d["t"],
            focal=(d["fx"], d["fy"]),
            principal=(d["cx"], d["cy"]),
            image_size=(d["W"], d["H"]),
        )

    def tensors(self, dtype=torch.float64, device=None) -> "CameraTensors":
        return stack_cameras([self], dtype=dtype, device=device).squeeze(0)


class CameraTensors(NamedTuple):
    """Tensor view of one camera (no leading dim) or a batch (leading dim B)."""

    R: torch.Tensor  # (..., 3, 3)
    t: torch.Tensor  # (..., 3)
    focal: torch.Tensor  # (..., 2)
    principal: torch.Tensor  # (..., 2)

    def squeeze(self, dim: int) -> "CameraTensors":
        return CameraTensors(*(x.squeeze(dim) for x in self))

    def index(self, idx) -> "CameraTensors":
        return CameraTensors(*(x[idx] for x in self))


def stack_cameras(cams: Sequence[CameraPose], dtype=torch.float32, device=None) -> CameraTensors:
    def mk(arrs):
        return torch.as_tensor(np.stack(arrs), dtype=dtype, device=device)

    return CameraTensors(
        R=mk([c.rotation for c in cams]),
        t=mk([c.translation for c in cams]),
        focal=mk([np.asarray(c.focal) for c in cams]),
        principal=mk([np.asarray(c.principal) for c in cams]),
    )


CameraLike = Union[CameraPose, CameraTensors]


def _as_tensors(cam: CameraLike, like: torch.Tensor) -> CameraTensors:
    if isinstance(cam, CameraPose):
        return cam.tensors(dtype=like.dtype, device=like.device)
    return cam


def project(points: torch.Tensor, cam: CameraLike, strict: bool = False):
    """Project frontalized 3D points into a camera.

    ``points`` has shape ``(..., N, 3)`` (or ``(3,)`` for a single point); a
    batched camera with leading dim ``B`` pairs with points of shape
    ``(B, N, 3)``. Returns ``(pixel, depth)`` with shapes ``(..., N, 2)`` and
    ``(..., N)``. Points with depth <= EPS_DEPTH get a finite but meaningless
    pixel; callers mask them via the returned depth. With ``strict=True`` they
    raise :class:`BehindCameraError` instead.
    """
    single = points.dim() == 1
    if single:
        points = points.unsqueeze(0)
    c = _as_tensors(cam, points)
    x_cam = torch.einsum("...ij,...nj->...ni", c.R, points) + c.t.unsqueeze(-2)
    depth = x_cam[..., 2]
    behind = depth <= EPS_DEPTH
    if strict and bool(behind.any()):
        raise BehindCameraError("point lies behind the camera")
    safe = torch.where(behind, torch.ones_like(depth), depth)
    pixel = x_cam[..., :2] / safe.unsqueeze(-1) * c.focal.unsqueeze(-2) + c.principal.unsqueeze(-2)
    if single:
        return pixel[0], depth[0]
    return pixel, depth


def unproject(pixel: torch.Tensor, depth: torch.Tensor, cam: CameraLike) -> torch.Tensor:
    """Inverse of :func:`project` for points in front of the camera."""
    c = _as_tensors(cam, pixel)
    xy = (pixel - c.principal.unsqueeze(-2)) / c.focal.unsqueeze(-2) * depth.unsqueeze(-1)
    x_cam = torch.cat([xy, depth.unsqueeze(-1)], dim=-1)
    # R^T (x_cam - t)
    return torch.einsum("...ji,...nj->...ni", c.R, x_cam - c.t.unsqueeze(-2))


def bilinear_corners(grid: torch.Tensor, coords: torch.Tensor):
    """Corner values ``(..., N, 4, C)`` and weights ``(..., N, 4)`` of a bilinear lookup.

    Same shapes and conventions as :func:`sample_bilinear`, which is the
    weighted sum of the corners.
    """
    batched = grid.dim() == 4
    if not batched:
        grid = grid.unsqueeze(0)
        coords = coords.unsqueeze(0)
    B, Hg, Wg, C = grid.shape
    x = coords[..., 0].clamp(0.0, 1.0) * (Wg - 1)
    y = coords[..., 1].clamp(0.0, 1.0) * (Hg - 1)
    # NaN coords pick corner 0 so the NaN reaches the weights, not the indices
    x0 = x.detach().nan_to_num(0.0).floor().clamp(0, max(Wg - 2, 0))
    y0 = y.detach().nan_to_num(0.0).floor().clamp(0, max(Hg - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=Wg - 1)
    y1 = (y0 + 1).clamp(max=Hg - 1)

    flat = grid.reshape(B * Hg * Wg, C)
    base = (torch.arange(B, device=grid.device) * (Hg * Wg)).view(B, *([1] * (x0.dim() - 1)))
    idx = torch.stack([y0 * Wg + x0, y0 * Wg + x1, y1 * Wg + x0, y1 * Wg + x1], dim=-1) + base.unsqueeze(-1)
    values = flat[idx.reshape(-1)].reshape(*idx.shape, C)
    weights = torch.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], dim=-1)
    if not batched:
        return values[0], weights[0]
    return values, weights


def sample_bilinear(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``grid`` at continuous UV ``coords``.

    grid: ``(S, S, C)`` or ``(B, S, S, C)``; coords: ``(N, 2)`` or ``(B, N, 2)``
    holding ``(u, v)`` with u indexing columns and v rows. Out-of-range coords
    are clamped to the grid border. Differentiable in both arguments.
    """
    values, weights = bilinear_corners(grid, coords)
    return (values * weights.unsqueeze(-1)).sum(-2)


def pixel_grid(H: int, W: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 2) tensor of pixel-center coordinates ``(x, y)``."""
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=dtype, device=device),
        torch.arange(W, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def pixels_to_coords(pixel: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Map pixel coordinates to the [0, 1] sampling convention of an H x W map."""
    scale = pixel.new_tensor([max(W - 1, 1), max(H - 1, 1)])
    return pixel / scale


@dataclass
class PositionMap:
    grid: np.ndarray  # (S, S, 3)
    validity: np.ndarray  # (S, S) bool

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.grid.shape[:2] != self.validity.shape or self.grid.shape[-1] != 3:
            raise ValueError(f"bad position map shapes {self.grid.shape} / {self.validity.shape}")

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    def clamped(self) -> "PositionMap":
        return PositionMap(np.clip(self.grid, -0.5, 0.5), self.validity.copy())


def compose_posmap(residual, avg):
    """Instance position map ``avg + residual``.

    Accepts a :class:`PositionMap` for ``avg`` (returns a PositionMap whose
    validity is copied from ``avg``) or raw arrays/tensors, in which case the
    texelwise sum is returned with broadcasting over leading batch dims. No
    clamping happens here; see :meth:`PositionMap.clamped` for export.
    """
    if isinstance(avg, PositionMap):
        res = residual.grid if isinstance(residual, PositionMap) else np.asarray(residual)
        if res.shape != avg.grid.shape:
            raise ValueError(f"residual shape {res.shape} != position map shape {avg.grid.shape}")
        return PositionMap(avg.grid + res, avg.validity.copy())
    if residual.shape[-3:] != avg.shape[-3:]:
        raise ValueError(f"residual shape {tuple(residual.shape)} != position map shape {tuple(avg.shape)}")
    return avg + residual


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ center


def generate_orbit_camera(
    index: int,
    n_views: int,
    radius: float = 2.0,
    elevation_deg: float = 0.0,
    image_size: tuple[int, int] = (64, 64),
    focal: float | tuple[float, float] = 80.0,
) -> CameraPose:
    """Camera ``index`` of ``n_views`` evenly spaced on a circle around the z axis."""
    if not 0 <= index < n_views:
        raise IndexError(f"view index {index} out of range for {n_views} views")
    if radius <= 0.87:
        raise ValueError("orbit radius must exceed the unit-cube circumsphere (0.87)")
    az = 2.0 * math.pi * index / n_views
    el = math.radians(elevation_deg)
    center = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    R, t = look_at(center)
    if np.isscalar(focal):
        focal = (float(focal), float(focal))
    W, H = image_size
    return CameraPose(R, t, focal, ((W - 1) / 2.0, (H - 1) / 2.0), (W, H))


@dataclass
class TemplateMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uv: np.ndarray  # (V, 2)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")


def normalize_mesh(mesh: TemplateMesh) -> TemplateMesh:
    """Center the bounding box at the origin and scale the largest extent to 1."""
    if len(mesh.vertices) == 0:
        raise ValueError("empty mesh")
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("degenerate mesh with zero extent")
    verts = (mesh.vertices - (lo + hi) / 2.0) / extent
    return TemplateMesh(verts, mesh.faces.copy(), mesh.uv.copy(), dict(mesh.meta))
