"""Run configuration: one JSON document, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..dataset import GenConfig
from ..losses import LossWeights, UVConsistencyOptions
from ..model import ModelConfig

MODES = ("fixed_mesh", "deformed", "supervised")
VISIBILITY = ("rendered", "chart")
LR_SCHEDULES = ("cosine", "constant")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""  # defaults to data.out_dir
    mode: str = "deformed"
    multiview: bool = True
    # desk-scale training weights; anything not named falls back to LossWeights
    weights: dict = field(default_factory=lambda: {"def": 1.0, "uv": 0.1})
    use_seg: bool = True
    visibility: str = "rendered"
    uv_landing_mask: bool = True
    uv_occlusion_tol: float | None = 0.05
    seam_aware: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"  # cosine decay to 0 over `steps`, or constant
    residual_warmup: int = 400  # steps with the residual held at zero before it trains
    steps: int = 2000
    batch_pairs: int = 4
    max_azimuth_deg: float = 45.0
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    eval_split: str = "test"
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # -- derived views --------------------------------------------------------

    @property
    def dataset_path(self) -> str:
        return self.dataset or self.gen_config().out_dir

    def gen_config(self) -> GenConfig:
        try:
            return GenConfig.from_dict(self.data)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def model_config(self) -> ModelConfig:
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(self.model) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return ModelConfig.from_json(self.model)

    def loss_weights(self) -> LossWeights:
        """Weights after applying the mode invariants."""
        kw = {("deform" if k == "def" else k): v for k, v in self.weights.items()}
        try:
            w = LossWeights(**kw)
        except TypeError as e:
            raise ConfigError(f"unknown loss weight: {e}") from e
        if not self.multiview:
            w.uv = 0.0
        if self.mode == "fixed_mesh":
            w.deform = 0.0
        if not self.use_seg:
            w.seg = 0.0
        return w

    def uv_options(self) -> UVConsistencyOptions:
        return UVConsistencyOptions(self.uv_landing_mask, self.uv_occlusion_tol, self.seam_aware)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.visibility not in VISIBILITY:
            raise ConfigError(f"visibility must be one of {VISIBILITY}, got {self.visibility!r}")
        if self.steps < 0 or self.batch_pairs < 1:
            raise ConfigError("steps must be >= 0 and batch_pairs >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.max_azimuth_deg <= 0:
            raise ConfigError("max_azimuth_deg must be positive")
        if self.residual_warmup < 0:
            raise ConfigError("residual_warmup must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        self.gen_config()
        self.model_config()
        self.loss_weights()

    # -- io -------------------------------------------------------------------

    def to_json(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        d = self.to_json()
        d.update(kw)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)
