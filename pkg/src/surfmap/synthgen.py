"""Procedural category generator and z-buffered software rasterizer.

Instances are star-shaped blobs r(theta, phi) around the origin, charted with an
equirectangular UV map (u = phi / 2pi, v = theta / pi). The template mesh is the
position-map grid itself, triangulated, so mesh vertices and position-map
texels coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import EPS_DEPTH, CameraPose, PositionMap, TemplateMesh


@dataclass(frozen=True)
class InstanceSpec:
    seed: int
    n_harmonics: int = 3
    amplitude: float = 0.03
    base_radius: float = 0.35

    def __post_init__(self):
        if self.amplitude < 0 or self.amplitude > 0.3 * self.base_radius + 1e-12:
            raise ValueError("amplitude must lie in [0, 0.3 * base_radius]")
        if self.n_harmonics < 1:
            raise ValueError("need at least one harmonic")

    def harmonics(self) -> np.ndarray:
        """(K, 3) array of (a_k, p_k, q_k), deterministic in ``seed``."""
        rng = np.random.default_rng(self.seed)
        K = self.n_harmonics
        a = rng.uniform(-self.amplitude / K, self.amplitude / K, size=K)
        p = rng.uniform(0.0, 2 * math.pi, size=K)
        q = rng.uniform(0.0, 2 * math.pi, size=K)
        return np.stack([a, p, q], axis=1)


def radius_fn(spec: InstanceSpec, theta, phi):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    s = np.zeros(np.broadcast(theta, phi).shape)
    for k, (a, p, q) in enumerate(spec.harmonics(), start=1):
        s = s + a * np.sin(k * theta + p) * np.sin(k * phi + q)
    return spec.base_radius * (1.0 + s)


def surface_points(spec: InstanceSpec, u, v) -> np.ndarray:
    """3D surface point at chart coordinates (u, v); broadcasts, returns (..., 3)."""
    theta = math.pi * np.asarray(v, dtype=np.float64)
    phi = 2 * math.pi * np.asarray(u, dtype=np.float64)
    r = radius_fn(spec, theta, phi)
    return np.stack(
        [r * np.sin(theta) * np.cos(phi), r * np.sin(theta) * np.sin(phi), r * np.cos(theta)], axis=-1
    )


def chart_validity(S: int) -> np.ndarray:
    valid = np.ones((S, S), dtype=bool)
    valid[0] = False
    valid[-1] = False
    return valid


def grid_uv(S: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, 1.0, S)
    v, u = np.meshgrid(t, t, indexing="ij")
    return u, v


def grid_mesh(grid: np.ndarray) -> TemplateMesh:
    """Triangulate an (n, n, 3) chart grid; vertices sit at the texel centres."""
    n = grid.shape[0]
    u, v = grid_uv(n)
    uv = np.stack([u, v], axis=-1).reshape(-1, 2)
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)])
    return TemplateMesh(np.asarray(grid, np.float64).reshape(-1, 3), faces, uv, {"resolution": n})


def make_instance(
    spec: InstanceSpec, sphere_resolution: int = 64, posmap_resolution: int | None = None
) -> tuple[TemplateMesh, PositionMap]:
    """Build the instance mesh and its ground-truth position map."""
    n = sphere_resolution
    if n < 8:
        raise ValueError("sphere resolution must be at least 8")
    S = posmap_resolution or n
    u, v = grid_uv(n)
    mesh = grid_mesh(surface_points(spec, u, v))

    pu, pv = grid_uv(S)
    posmap = PositionMap(surface_points(spec, pu, pv), chart_validity(S))
    return mesh, posmap


def uv_albedo(uv: np.ndarray) -> np.ndarray:
    """Fixed UV colormap, continuous across the u seam and injective on the chart."""
    ang = 2 * math.pi * uv[..., 0]
    return np.stack([0.5 + 0.4 * np.cos(ang), 0.5 + 0.4 * np.sin(ang), 0.15 + 0.7 * uv[..., 1]], axis=-1)


@numba.njit(cache=True)
def _raster_kernel(px, depth, faces, H, W):
    zbuf = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = depth[i0], depth[i1], depth[i2]
        if z0 <= 1e-6 or z1 <= 1e-6 or z2 <= 1e-6:
            continue
        x0, y0 = px[i0, 0], px[i0, 1]
        x1, y1 = px[i1, 0], px[i1, 1]
        x2, y2 = px[i2, 0], px[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(math.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(math.floor(max(x0, x1, x2))), W - 1)
        ymin = max(int(math.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(math.floor(max(y0, y1, y2))), H - 1)
        for yi in range(ymin, ymax + 1):
            for xi in range(xmin, xmax + 1):
                l0 = ((x1 - xi) * (y2 - yi) - (x2 - xi) * (y1 - yi)) / area
                l1 = ((x2 - xi) * (y0 - yi) - (x0 - xi) * (y2 - yi)) / area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                w0, w1, w2 = l0 / z0, l1 / z1, l2 / z2
                z = 1.0 / (w0 + w1 + w2)
                if z < zbuf[yi, xi]:
                    zbuf[yi, xi] = z
                    fid[yi, xi] = f
                    bary[yi, xi, 0] = w0 * z
                    bary[yi, xi, 1] = w1 * z
                    bary[yi, xi, 2] = w2 * z
    return zbuf, fid, bary


def rasterize(mesh: TemplateMesh, cam: CameraPose, light_dir=None, shading: dict | None = None):
    """Render ``mesh`` with z-buffering and perspective-correct UV interpolation.

    Returns ``(rgb uint8 HxWx3, mask bool HxW, depth float32 HxW, gt_uv float32 HxWx2)``.
    ``light_dir`` is the direction light travels in; it defaults to the camera's
    viewing direction.
    """
    sh = {"ambient": 0.3, "diffuse": 0.7, "specular": 0.25, "shininess": 32.0}
    sh.update(shading or {})
    W, H = cam.image_size
    x_cam = mesh.vertices @ cam.rotation.T + cam.translation
    z = x_cam[:, 2]
    safe = np.where(z > EPS_DEPTH, z, 1.0)
    px = x_cam[:, :2] / safe[:, None] * np.asarray(cam.focal) + np.asarray(cam.principal)
    zbuf, fid, bary = _raster_kernel(px, z, mesh.faces, H, W)
    mask = fid >= 0
    if not mask.any():
        raise ValueError("empty projection: the mesh is not visible from this camera")

    tri = mesh.faces[fid[mask]]  # (P, 3)
    b = bary[mask]
    uv = np.einsum("pk,pkc->pc", b, mesh.uv[tri])
    uv[:, 0] = np.where(uv[:, 0] >= 1.0, uv[:, 0] - 1.0, uv[:, 0])
    uv = np.clip(uv, 0.0, 1.0)

    # flat Blinn-Phong shading with one directional light plus ambient
    v = mesh.vertices[tri]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    pts = np.einsum("pk,pkc->pc", b, v)
    view = cam.center - pts
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    n = np.where((n * view).sum(1, keepdims=True) < 0, -n, n)
    L = -np.asarray(cam.forward if light_dir is None else light_dir, dtype=np.float64)
    L = L / np.linalg.norm(L)
    half = view + L
    half /= np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-12)
    diff = np.clip(n @ L, 0.0, None)
    spec = np.clip((n * half).sum(1), 0.0, None) ** sh["shininess"]
    color = uv_albedo(uv) * (sh["ambient"] + sh["diffuse"] * diff)[:, None] + sh["specular"] * spec[:, None]

    rgb = np.zeros((H, W, 3), dtype=np.uint8)
    rgb[mask] = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    depth = np.zeros((H, W), dtype=np.float32)
    depth[mask] = zbuf[mask]
    gt_uv = np.zeros((H, W, 2), dtype=np.float32)
    gt_uv[mask] = uv
    return rgb, mask, depth, gt_uv


def render_depth(grid: np.ndarray, cam: CameraPose) -> np.ndarray:
    """Z-buffer depth (H, W) of the chart surface ``grid``; 0 off the surface."""
    mesh = grid_mesh(grid)
    W, H = cam.image_size
    x_cam = mesh.vertices @ cam.rotation.T + cam.translation
    z = x_cam[:, 2]
    safe = np.where(z > EPS_DEPTH, z, 1.0)
    px = x_cam[:, :2] / safe[:, None] * np.asarray(cam.focal) + np.asarray(cam.principal)
    zbuf, fid, _ = _raster_kernel(px, z, mesh.faces, H, W)
    return np.where(fid >= 0, zbuf, 0.0).astype(np.float32)
