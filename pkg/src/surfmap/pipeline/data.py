"""Same-instance view-pair sampling and tensor batches for training."""

from __future__ import annotations

import json
import math

import numpy as np
import torch

from ..dataset import MultiViewDataset
from ..geometry import CameraTensors, stack_cameras
from ..losses import LossBatch
from ..synthgen import render_depth


def view_azimuths(ds: MultiViewDataset, instance: int = 0) -> np.ndarray:
    """Azimuth (degrees) of every camera center of ``instance`` around the z axis."""
    return np.array([math.degrees(math.atan2(c.center[1], c.center[0])) for c in ds.cameras[instance]])


def neighbour_table(azimuths: np.ndarray, max_deg: float) -> list[np.ndarray]:
    """For every view, the other views within ``max_deg`` of azimuth."""
    diff = np.abs(azimuths[:, None] - azimuths[None, :]) % 360.0
    diff = np.minimum(diff, 360.0 - diff)
    ok = diff <= max_deg + 1e-6
    np.fill_diagonal(ok, False)
    return [np.flatnonzero(row) for row in ok]


def sample_pair_batch(ds: MultiViewDataset, batch_size: int, rng: np.random.Generator,
                      instances=None, max_azimuth_deg: float = 45.0) -> np.ndarray:
    """Draw ``batch_size`` (instance, view_a, view_b) rows.

    Instances are uniform over ``instances``; ``view_a`` is uniform and
    ``view_b`` uniform among the distinct views within ``max_azimuth_deg``.
    """
    instances = np.arange(ds.n_instances) if instances is None else np.asarray(instances)
    if ds.n_views < 2:
        raise ValueError("multi-view pairs need at least 2 views per instance")
    table = neighbour_table(view_azimuths(ds), max_azimuth_deg)
    rows = np.empty((batch_size, 3), dtype=np.int64)
    for i in range(batch_size):
        inst = instances[rng.integers(len(instances))]
        a = int(rng.integers(ds.n_views))
        if len(table[a]) == 0:
            raise ValueError(f"view {a} has no partner within {max_azimuth_deg} degrees")
        b = int(table[a][rng.integers(len(table[a]))])
        rows[i] = (inst, a, b)
    return rows


def average_depth_maps(ds: MultiViewDataset) -> np.ndarray:
    """Depth of the average surface rendered from every (instance, view) camera."""
    cache, out = {}, []
    for row in ds.cameras:
        for cam in row:
            key = json.dumps(cam.to_json(), sort_keys=True)
            if key not in cache:
                cache[key] = render_depth(ds.avg_posmap.grid, cam)
            out.append(cache[key])
    H, W = ds.image_hw
    return np.stack(out).reshape(ds.n_instances, ds.n_views, H, W)


class TensorDataset:
    """Torch views of a loaded dataset, built once for fast batch assembly."""

    def __init__(self, ds: MultiViewDataset):
        self.ds = ds
        self.images = torch.from_numpy(ds.images).float().div_(255.0)
        self.masks = torch.from_numpy(ds.masks)
        self.uvs = torch.from_numpy(ds.uvs)
        self.gt_posmaps = torch.from_numpy(ds.gt_posmaps)
        cams = stack_cameras([c for row in ds.cameras for c in row], dtype=torch.float32)
        N, V = ds.n_instances, ds.n_views
        self.cams = CameraTensors(*(x.reshape(N, V, *x.shape[1:]) for x in cams))
        self.avg = torch.from_numpy(np.asarray(ds.avg_posmap.grid, dtype=np.float32))
        self.validity = torch.from_numpy(ds.avg_posmap.validity)
        self.avg_depth = torch.from_numpy(average_depth_maps(ds))

    def batch(self, rows: np.ndarray, with_labels: bool = False):
        """Views of all rows, a-views first then b-views; pairs index into them."""
        inst = torch.from_numpy(np.concatenate([rows[:, 0], rows[:, 0]]))
        view = torch.from_numpy(np.concatenate([rows[:, 1], rows[:, 2]]))
        P = len(rows)
        pairs = torch.stack([torch.arange(P), torch.arange(P, 2 * P)], dim=1)
        lb = LossBatch(
            masks=self.masks[inst, view],
            cams=CameraTensors(*(x[inst, view] for x in self.cams)),
            pairs=pairs,
            avg_depth=self.avg_depth[inst, view],
        )
        if with_labels:
            lb.gt_uv = self.uvs[inst, view]
            lb.gt_posmap = self.gt_posmaps[inst]
        return self.images[inst, view], lb
