"""Small encoder with three decoder heads: per-pixel UV, segmentation and a
position-map residual."""

from __future__ import annotations

import io
import math
import json
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 48, 64)
    decoder_channels: tuple = (48, 32, 16)
    seg_channels: tuple = (24, 16, 8)
    posmap_resolution: int = 64
    residual_grid: int = 16
    residual_hidden: int = 128
    r_max: float = 0.25
    image_size: int = 64
    uv_param: str = "sphere"  # "sphere": direction -> chart angles; "sigmoid": squashed logits

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
        return cls(**kw)


class ModelOutput(NamedTuple):
    uv: torch.Tensor  # (B, H, W, 2) in [0, 1]
    seg_logits: torch.Tensor  # (B, H, W, 1)
    residual: torch.Tensor  # (B, S, S, 3) in [-r_max, r_max]


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class Decoder(nn.Module):
    """Upsampling path with skip connections back to input resolution."""

    def __init__(self, enc_channels, dec_channels, out_channels):
        super().__init__()
        skips = list(enc_channels[:-1])[::-1]
        cin = enc_channels[-1]
        self.ups = nn.ModuleList()
        for skip, c in zip(skips, dec_channels):
            self.ups.append(
                nn.Sequential(nn.Conv2d(cin + skip, c, 3, padding=1), nn.ReLU(inplace=True))
            )
            cin = c
        self.out = nn.Conv2d(cin, out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, skip in zip(self.ups, feats[-2::-1]):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, skip], dim=1))
        return self.out(x)


class ResidualHead(nn.Module):
    """Bottleneck -> coarse residual grid -> bilinear upsample to S x S."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels[-1]
        bottleneck = cfg.image_size // cfg.stride
        self.reduce = nn.Sequential(nn.Conv2d(c, 16, 1), nn.ReLU(inplace=True))
        self.fc = nn.Sequential(nn.Linear(16 * bottleneck * bottleneck, cfg.residual_hidden), nn.ReLU(inplace=True))
        self.out = nn.Linear(cfg.residual_hidden, 3 * cfg.residual_grid**2)
        self.grid = cfg.residual_grid
        self.S = cfg.posmap_resolution
        self.r_max = cfg.r_max

    def forward(self, x):
        B = x.shape[0]
        h = self.fc(self.reduce(x).flatten(1))
        g = self.out(h).view(B, 3, self.grid, self.grid)
        g = F.interpolate(g, size=(self.S, self.S), mode="bilinear", align_corners=True)
        return self.r_max * torch.tanh(g).permute(0, 2, 3, 1)


def direction_to_uv(d: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Map unnormalised 3-vectors to equirectangular chart coords in [0, 1].

    u is the azimuth atan2(y, x) / 2pi wrapped to [0, 1), v the polar angle / pi
    measured from +z. Unlike squashed logits this has no saturating boundary
    and no degenerate parameters at the poles.
    """
    x, y, z = d.unbind(-1)
    rho = torch.sqrt(x * x + y * y + eps)
    u = torch.remainder(torch.atan2(y, x) / (2 * math.pi), 1.0)
    v = torch.atan2(rho, z) / math.pi
    return torch.stack([u, v], dim=-1)


class SurfaceMapNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        ch = cfg.channels
        self.encoder = nn.ModuleList([_block(3, ch[0])])
        for cin, cout in zip(ch[:-1], ch[1:]):
            self.encoder.append(_block(cin, cout, stride=2))
        if cfg.uv_param not in ("sphere", "sigmoid"):
            raise ValueError(f"unknown uv_param {cfg.uv_param!r}")
        self.uv_head = Decoder(ch, cfg.decoder_channels, 3 if cfg.uv_param == "sphere" else 2)
        self.seg_head = Decoder(ch, cfg.seg_channels, 1)
        self.residual_head = ResidualHead(cfg)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        """``image``: (B, H, W, 3) or (H, W, 3) floats in [0, 1]."""
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) image, got {tuple(image.shape)}")
        H, W = image.shape[1:3]
        if H % self.cfg.stride or W % self.cfg.stride:
            raise ValueError(f"image size {H}x{W} not divisible by stride {self.cfg.stride}")
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"model expects {self.cfg.image_size}x{self.cfg.image_size} images, got {H}x{W}")
        x = image.permute(0, 3, 1, 2)
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        raw = self.uv_head(feats).permute(0, 2, 3, 1)
        uv = direction_to_uv(raw) if self.cfg.uv_param == "sphere" else torch.sigmoid(raw)
        seg = self.seg_head(feats).permute(0, 2, 3, 1)
        res = self.residual_head(feats[-1])
        out = ModelOutput(uv, seg, res)
        if single:
            out = ModelOutput(*(t[0] for t in out))
        return out


def init_parameters(model: SurfaceMapNet, seed: int) -> SurfaceMapNet:
    """Kaiming fan-in init from ``seed``; the residual head's last layer is zeroed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
        for m in (model.uv_head.out, model.seg_head.out):
            m.weight.mul_(0.1)
        model.residual_head.out.weight.zero_()
        model.residual_head.out.bias.zero_()
    return model


def build_model(seed: int = 0, cfg: ModelConfig | None = None) -> SurfaceMapNet:
    return init_parameters(SurfaceMapNet(cfg), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: SurfaceMapNet, step: int, avg_posmap=None, extra: dict | None = None) -> Path:
    """Write a zip archive: params.npz, model_config.json, state.json[, avg_posmap.npz]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **{k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    state = {"step": int(step)}
    state.update(extra or {})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write(zf, "params.npz", buf.getvalue())
        _write(zf, "model_config.json", json.dumps(model.cfg.to_json(), sort_keys=True).encode())
        _write(zf, "state.json", json.dumps(state, sort_keys=True).encode())
        if avg_posmap is not None:
            b = io.BytesIO()
            np.savez(b, grid=np.asarray(avg_posmap.grid), validity=np.asarray(avg_posmap.validity))
            _write(zf, "avg_posmap.npz", b.getvalue())
    return path


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(2020, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def load_checkpoint(path):
    """Returns ``(model, state, avg_posmap or None)``; the model is in eval mode."""
    from .geometry import PositionMap

    with zipfile.ZipFile(path) as zf:
        cfg = ModelConfig.from_json(json.loads(zf.read("model_config.json")))
        state = json.loads(zf.read("state.json"))
        params = np.load(io.BytesIO(zf.read("params.npz")))
        avg = None
        if "avg_posmap.npz" in zf.namelist():
            a = np.load(io.BytesIO(zf.read("avg_posmap.npz")))
            avg = PositionMap(a["grid"], a["validity"])
    model = SurfaceMapNet(cfg)
    model.load_state_dict({k: torch.from_numpy(params[k]) for k in params.files})
    model.eval()
    return model, state, avg
