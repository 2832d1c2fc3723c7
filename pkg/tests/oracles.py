"""Independent numpy reimplementations used as test oracles.

None of these call into the package's torch kernels; they loop or vectorize
plainly over pixels so that a shared bug cannot hide on both sides.
"""

import math

import numpy as np


def project_np(points, cam):
    """(N, 3) -> pixels (N, 2), depth (N,) for a CameraPose."""
    x = points @ cam.rotation.T + cam.translation
    z = x[:, 2]
    px = np.stack([cam.focal[0] * x[:, 0] / z + cam.principal[0], cam.focal[1] * x[:, 1] / z + cam.principal[1]], -1)
    return px, z


def bilinear_np(grid, u, v):
    """Scalar-loop bilinear lookup, (u -> column, v -> row), clamped."""
    H, W = grid.shape[:2]
    out = np.empty((len(u),) + grid.shape[2:])
    for n in range(len(u)):
        x = min(max(float(u[n]), 0.0), 1.0) * (W - 1)
        y = min(max(float(v[n]), 0.0), 1.0) * (H - 1)
        x0 = min(int(math.floor(x)), W - 2)
        y0 = min(int(math.floor(y)), H - 2)
        fx, fy = x - x0, y - y0
        out[n] = (grid[y0, x0] * (1 - fx) * (1 - fy) + grid[y0, x0 + 1] * fx * (1 - fy)
                  + grid[y0 + 1, x0] * (1 - fx) * fy + grid[y0 + 1, x0 + 1] * fx * fy)
    return out


def seam_uv_dist(a, b):
    d = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    du = d[..., 0] % 1.0
    du = np.minimum(du, 1.0 - du)
    return np.sqrt(du**2 + d[..., 1] ** 2)


def gt_cycle(ds, inst, view):
    """Pixel and depth closure errors of the ground-truth cycle on one view."""
    mask = ds.masks[inst, view]
    ys, xs = np.nonzero(mask)
    uv = ds.uvs[inst, view][mask].astype(np.float64)
    pts = bilinear_np(ds.gt_posmaps[inst].astype(np.float64), uv[:, 0], uv[:, 1])
    px, z = project_np(pts, ds.cameras[inst][view])
    pix_err = np.hypot(px[:, 0] - xs, px[:, 1] - ys)
    depth_err = np.abs(z - ds.depths[inst, view][mask])
    return pix_err, depth_err


POLE_CAP = 0.2  # sin(pi v) below this: one pixel spans more u than the tolerance


def gt_transport(ds, inst, a, b, depth_tol=0.01):
    """Carry every foreground pixel of view a into view b through the ground truth.

    Returns (uv_a, uv_b at the landing pixel, visible) for the pixels that land
    on a fully-foreground 2x2 neighbourhood of view b; ``visible`` marks those
    whose transported depth agrees with view b's depth buffer.
    """
    mask_a, mask_b = ds.masks[inst, a], ds.masks[inst, b]
    uv_a = ds.uvs[inst, a][mask_a].astype(np.float64)
    pts = bilinear_np(ds.gt_posmaps[inst].astype(np.float64), uv_a[:, 0], uv_a[:, 1])
    q, z = project_np(pts, ds.cameras[inst][b])
    H, W = mask_b.shape
    x0 = np.floor(q[:, 0]).astype(int)
    y0 = np.floor(q[:, 1]).astype(int)
    inside = (x0 >= 0) & (y0 >= 0) & (x0 < W - 1) & (y0 < H - 1) & (z > 0)
    x0, y0, q, z, uv_a = x0[inside], y0[inside], q[inside], z[inside], uv_a[inside]
    fg = mask_b[y0, x0] & mask_b[y0, x0 + 1] & mask_b[y0 + 1, x0] & mask_b[y0 + 1, x0 + 1]
    x0, y0, q, z, uv_a = x0[fg], y0[fg], q[fg], z[fg], uv_a[fg]
    xn = np.rint(q[:, 0]).astype(int)
    yn = np.rint(q[:, 1]).astype(int)
    uv_b = ds.uvs[inst, b][yn, xn].astype(np.float64)
    depth_b = ds.depths[inst, b]
    d_near = np.min(np.stack([depth_b[y0, x0], depth_b[y0, x0 + 1], depth_b[y0 + 1, x0], depth_b[y0 + 1, x0 + 1]]), 0)
    visible = z <= d_near + depth_tol
    return uv_a, uv_b, visible


def masked_mean_per_view(values, masks):
    """Mean over foreground pixels of each view, then mean over views."""
    return float(np.mean([v[m].mean() for v, m in zip(values, masks)]))


def off_pole(uv, cap=POLE_CAP):
    """True where the equirectangular chart is not degenerate at pixel scale."""
    return np.sin(np.pi * np.asarray(uv)[..., 1]) >= cap
