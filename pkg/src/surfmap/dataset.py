"""On-disk multi-view dataset: generation driver, writer and in-memory loader."""

from __future__ import annotations

import base64
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraPose, PositionMap, generate_orbit_camera
from .synthgen import InstanceSpec, make_instance, rasterize

log = logging.getLogger(__name__)


class DataError(Exception):
    """Missing or malformed dataset files."""


@dataclass
class GenConfig:
    out_dir: str = "data/desk"
    n_instances: int = 64
    n_views: int = 24
    image_size: int = 64
    posmap_resolution: int = 64
    focal: float = 100.0
    orbit_radius: float = 2.0
    elevation_deg: float = 15.0
    n_harmonics: int = 3
    amplitude: float = 0.03
    base_radius: float = 0.35
    seed: int = 0
    split: tuple = (0.75, 0.125, 0.125)
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n_instances < 1 or self.n_views < 1:
            raise ValueError("need at least one instance and one view")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ValueError("split must be three fractions summing to 1")
        if self.orbit_radius <= 0.87:
            raise ValueError("orbit_radius must exceed 0.87")
        InstanceSpec(0, self.n_harmonics, self.amplitude, self.base_radius)

    def instance_spec(self, instance_id: int) -> InstanceSpec:
        seed = int(np.random.SeedSequence([self.seed, instance_id]).generate_state(1)[0])
        return InstanceSpec(seed, self.n_harmonics, self.amplitude, self.base_radius)

    def camera(self, view: int) -> CameraPose:
        return generate_orbit_camera(
            view, self.n_views, self.orbit_radius, self.elevation_deg, (self.image_size,) * 2, self.focal
        )

    def splits(self) -> dict[str, list[int]]:
        n = self.n_instances
        n_train = max(1, int(round(self.split[0] * n)))
        n_val = int(round(self.split[1] * n))
        if n_train + n_val > n:
            n_val = n - n_train
        ids = list(range(n))
        return {"train": ids[:n_train], "val": ids[n_train : n_train + n_val], "test": ids[n_train + n_val :]}


# --- raw array files -------------------------------------------------------


def write_f32(path: Path, arr: np.ndarray, extra: dict | None = None) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), "dtype": "f32le"}
    meta.update(extra or {})
    _write_json(path.with_suffix(".json"), meta)


def read_f32(path: Path) -> tuple[np.ndarray, dict]:
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise DataError(f"missing array file or sidecar: {path}")
    meta = json.loads(side.read_text())
    if meta.get("dtype") != "f32le":
        raise DataError(f"unsupported dtype in {side}")
    try:
        arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    except ValueError as e:
        raise DataError(f"{path}: size does not match sidecar shape") from e
    return arr.astype(np.float32), meta


def pack_validity(valid: np.ndarray) -> str:
    return base64.b64encode(np.packbits(valid.astype(np.uint8).ravel()).tobytes()).decode("ascii")


def unpack_validity(s: str, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(base64.b64decode(s), dtype=np.uint8))
    return bits[: int(np.prod(shape))].reshape(shape).astype(bool)


def write_posmap(path: Path, pm: PositionMap) -> None:
    write_f32(path, pm.grid, {"validity": pack_validity(pm.validity), "resolution": pm.resolution})


def read_posmap(path: Path) -> PositionMap:
    grid, meta = read_f32(path)
    return PositionMap(grid, unpack_validity(meta["validity"], grid.shape[:2]))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- generation -----------------------------------------------------------


def _render_instance(cfg: GenConfig, inst: int):
    spec = cfg.instance_spec(inst)
    mesh, posmap = make_instance(spec, cfg.posmap_resolution, cfg.posmap_resolution)
    views = []
    for k in range(cfg.n_views):
        cam = cfg.camera(k)
        views.append((cam,) + rasterize(mesh, cam))
    return posmap, views


def _write_instance(root: Path, inst: int, posmap: PositionMap, views) -> None:
    d = root / f"inst_{inst:04d}"
    d.mkdir(parents=True, exist_ok=True)
    write_posmap(d / "gt_posmap.f32", posmap)
    for k, (cam, rgb, mask, depth, uv) in enumerate(views):
        Image.fromarray(rgb, "RGB").save(d / f"view_{k:03d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(d / f"view_{k:03d}_mask.png")
        write_f32(d / f"view_{k:03d}_depth.f32", depth)
        write_f32(d / f"view_{k:03d}_uv.f32", uv)
        _write_json(d / f"view_{k:03d}_cam.json", cam.to_json())


def generate_dataset(cfg: GenConfig) -> Path:
    """Render every instance/view to ``cfg.out_dir`` and write the average position map."""
    cfg.validate()
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    splits = cfg.splits()
    ids = list(range(cfg.n_instances))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_render_instance, [cfg] * len(ids), ids))
    else:
        results = [_render_instance(cfg, i) for i in ids]

    posmaps = {}
    for inst, (posmap, views) in zip(ids, results):
        _write_instance(root, inst, posmap, views)
        posmaps[inst] = posmap

    train = np.stack([posmaps[i].grid for i in splits["train"]]).astype(np.float64)
    avg = PositionMap(train.mean(axis=0), posmaps[splits["train"][0]].validity)
    write_posmap(root / "avg_posmap.f32", avg)
    meta = {
        "category": "procedural_blob",
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items() if k not in ("out_dir", "workers")},
        "image_size": [cfg.image_size, cfg.image_size],
        "posmap_resolution": cfg.posmap_resolution,
        "n_instances": cfg.n_instances,
        "n_views": cfg.n_views,
        "splits": splits,
    }
    _write_json(root / "meta.json", meta)
    log.info("wrote %d instances x %d views to %s", cfg.n_instances, cfg.n_views, root)
    return root


# --- loading ---------------------------------------------------------------


@dataclass
class MultiViewDataset:
    """All views of all instances held in memory, indexed [instance, view]."""

    root: Path
    images: np.ndarray  # (N, V, H, W, 3) uint8
    masks: np.ndarray  # (N, V, H, W) bool
    depths: np.ndarray  # (N, V, H, W) float32
    uvs: np.ndarray  # (N, V, H, W, 2) float32
    cameras: list  # N lists of V CameraPose
    gt_posmaps: np.ndarray  # (N, S, S, 3) float32
    avg_posmap: PositionMap
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return self.images.shape[0]

    @property
    def n_views(self) -> int:
        return self.images.shape[1]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def validity(self) -> np.ndarray:
        return self.avg_posmap.validity

    def split_ids(self, split: str) -> list[int]:
        if split == "all":
            return list(range(self.n_instances))
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return list(self.splits[split])


def load_dataset(root, instances=None) -> MultiViewDataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{root} is not a dataset (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    n, V = meta["n_instances"], meta["n_views"]
    ids = list(range(n)) if instances is None else list(instances)
    imgs, masks, depths, uvs, cams, gts = [], [], [], [], [], []
    for inst in ids:
        d = root / f"inst_{inst:04d}"
        gts.append(read_posmap(d / "gt_posmap.f32").grid)
        row_i, row_m, row_d, row_u, row_c = [], [], [], [], []
        for k in range(V):
            try:
                row_i.append(np.asarray(Image.open(d / f"view_{k:03d}.png").convert("RGB")))
                row_m.append(np.asarray(Image.open(d / f"view_{k:03d}_mask.png")) > 127)
                row_c.append(CameraPose.from_json(json.loads((d / f"view_{k:03d}_cam.json").read_text())))
            except FileNotFoundError as e:
                raise DataError(str(e)) from e
            row_d.append(read_f32(d / f"view_{k:03d}_depth.f32")[0])
            row_u.append(read_f32(d / f"view_{k:03d}_uv.f32")[0])
        imgs.append(row_i)
        masks.append(row_m)
        depths.append(row_d)
        uvs.append(row_u)
        cams.append(row_c)
    splits = meta["splits"]
    if instances is not None:
        remap = {old: new for new, old in enumerate(ids)}
        splits = {k: [remap[i] for i in v if i in remap] for k, v in splits.items()}
    return MultiViewDataset(
        root=root,
        images=np.asarray(imgs, dtype=np.uint8),
        masks=np.asarray(masks, dtype=bool),
        depths=np.asarray(depths, dtype=np.float32),
        uvs=np.asarray(uvs, dtype=np.float32),
        cameras=cams,
        gt_posmaps=np.asarray(gts, dtype=np.float32),
        avg_posmap=read_posmap(root / "avg_posmap.f32"),
        splits=splits,
        meta=meta,
    )


def dataset_files(root) -> list[str]:
    root = Path(root)
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())
