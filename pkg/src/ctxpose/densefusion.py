"""Dense per-pixel fusion of color and geometry features.

Color crops go through a small convolutional encoder-decoder that keeps the
crop resolution; the masked depth pixels, back-projected to 3D, go through a
shared per-point MLP whose symmetric function is average pooling. Each sampled
pixel then carries ``[color_i, geo_i, global]`` where ``global`` is the mean of
a per-pixel fusion MLP over the sampled pixels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MIN_CROP = 8  # three stride-2 stages


@dataclass(frozen=True)
class FusionConfig:
    d_rgb: int = 32
    d_geo: int = 32
    d_global: int = 64
    color_widths: tuple[int, int, int, int] = (16, 24, 32, 48)
    geo_hidden: int = 64
    fusion_hidden: int = 128
    n_points: int = 500  # N sampled pixels
    length_scale: float = 0.1  # meters; network-side unit for point coordinates
    normalize_gain: bool = True  # divide each crop by its mean object brightness

    @property
    def d_fused(self) -> int:
        return self.d_rgb + self.d_geo + self.d_global

    def to_dict(self) -> dict:
        d = asdict(self)
        d["color_widths"] = list(self.color_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        d = dict(d)
        d["color_widths"] = tuple(d["color_widths"])
        return cls(**d)


def he_init(module: nn.Module) -> nn.Module:
    """He-normal weights and zero biases for every conv/linear layer in ``module``.

    The torch defaults shrink activations layer by layer, which leaves the
    per-pixel features nearly constant across pixels at initialization.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return module


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU())


class ColorEncoder(nn.Module):
    """Encoder-decoder (3 down / 3 up stages with skips) to ``d_rgb`` channels per pixel."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        w0, w1, w2, w3 = cfg.color_widths
        self.stem = _conv(3, w0)
        self.down1 = nn.Sequential(_conv(w0, w1, 2), _conv(w1, w1))
        self.down2 = nn.Sequential(_conv(w1, w2, 2), _conv(w2, w2))
        self.down3 = nn.Sequential(_conv(w2, w3, 2), _conv(w3, w3))
        self.up3 = _conv(w3 + w2, w2)
        self.up2 = _conv(w2 + w1, w1)
        self.up1 = _conv(w1 + w0, cfg.d_rgb)
        self.out = nn.Conv2d(cfg.d_rgb, cfg.d_rgb, 1)
        he_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[-2:]
        ph, pw = (-H) % MIN_CROP, (-W) % MIN_CROP
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        s0 = self.stem(x)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        y = self.up3(torch.cat([F.interpolate(s3, size=s2.shape[-2:]), s2], 1))
        y = self.up2(torch.cat([F.interpolate(y, size=s1.shape[-2:]), s1], 1))
        y = self.up1(torch.cat([F.interpolate(y, size=s0.shape[-2:]), s0], 1))
        return self.out(y)[..., :H, :W]


class GeometryEmbedder(nn.Module):
    """Shared per-point MLP; the pooled vector is the average of the first-stage features."""

    def __init__(self, cfg: FusionConfig, in_dim: int = 3):
        super().__init__()
        h = cfg.geo_hidden
        self.local = nn.Sequential(nn.Linear(in_dim, h), nn.ReLU(), nn.Linear(h, h), nn.ReLU())
        self.mix = nn.Sequential(nn.Linear(2 * h, h), nn.ReLU(), nn.Linear(h, cfg.d_geo), nn.ReLU())
        he_init(self)

    def forward(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pts.shape[-2] == 0:
            raise ValueError("cannot embed an empty point cloud")
        h = self.local(pts)
        pooled = h.mean(dim=-2)
        both = torch.cat([h, pooled.unsqueeze(-2).expand_as(h)], dim=-1)
        return self.mix(both), pooled


class FusionMLP(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.d_rgb + cfg.d_geo, cfg.fusion_hidden), nn.ReLU(),
            nn.Linear(cfg.fusion_hidden, cfg.d_global), nn.ReLU(),
        )
        he_init(self)

    def forward(self, color: torch.Tensor, geo: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([color, geo], dim=-1))


class FusedFeatureSet(NamedTuple):
    features: torch.Tensor  # (N, d_rgb + d_geo + d_global)
    sample: np.ndarray  # (N,) indices into the masked-pixel list
    color: torch.Tensor  # (N, d_rgb) per-pixel color features of the sample
    global_feature: torch.Tensor  # (d_global,)


def sample_pixels(n_available: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct indices (all of them, in order, if fewer are available)."""
    if n_available <= 0:
        raise ValueError("no pixel correspondences to sample from")
    if n >= n_available:
        return np.arange(n_available)
    return np.sort(rng.choice(n_available, size=n, replace=False))


def gather_pixels(color_map: torch.Tensor, pixels: np.ndarray) -> torch.Tensor:
    """Per-pixel vectors ``(n, C)`` of a ``(C, H, W)`` map at crop-local ``(row, col)``."""
    rows = torch.as_tensor(pixels[:, 0], dtype=torch.long)
    cols = torch.as_tensor(pixels[:, 1], dtype=torch.long)
    return color_map[:, rows, cols].T


class DenseFusion(nn.Module):
    """Color encoder, geometry embedder and fusion MLP; shared by both pose heads."""

    def __init__(self, cfg: FusionConfig = FusionConfig()):
        super().__init__()
        self.cfg = cfg
        self.color = ColorEncoder(cfg)
        self.geometry = GeometryEmbedder(cfg)
        self.fusion = FusionMLP(cfg)

    def embed_color(self, crop: np.ndarray | torch.Tensor) -> torch.Tensor:
        """``(h, w, 3)`` uint8 crop (or ``(3, h, w)`` float tensor) to a ``(d_rgb, h, w)`` map."""
        x = crop_to_tensor(crop, self._dtype())
        if min(x.shape[-2:]) < MIN_CROP:
            raise ValueError(f"crop {tuple(x.shape[-2:])} smaller than the {MIN_CROP}x{MIN_CROP} minimum")
        return self.color(x.unsqueeze(0))[0]

    def embed_geometry(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.geometry(pts)

    def fuse(
        self,
        colors: torch.Tensor,
        geo: torch.Tensor,
        pixels: np.ndarray,
        n: int | None,
        rng: np.random.Generator,
        sample: np.ndarray | None = None,
    ) -> FusedFeatureSet:
        """Sample ``n`` pixels without replacement and build their fused features.

        ``pixels`` are crop-local ``(row, col)`` of the points in ``geo`` (same
        order); passing ``sample`` reuses a previous draw.
        """
        if len(pixels) == 0:
            raise ValueError("zero pixel/point correspondences")
        if sample is None:
            sample = sample_pixels(len(pixels), self.cfg.n_points if n is None else n, rng)
        c = gather_pixels(colors, pixels[sample])
        g = geo[torch.as_tensor(sample, dtype=torch.long)]
        return fused_features(self.fusion, c, g, sample)

    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def fused_features(fusion: FusionMLP, c: torch.Tensor, g: torch.Tensor, sample: np.ndarray) -> FusedFeatureSet:
    glob = fusion(c, g).mean(dim=0)
    feats = torch.cat([c, g, glob.unsqueeze(0).expand(len(c), -1)], dim=-1)
    return FusedFeatureSet(feats, sample, c, glob)


def gain_normalized(crop: np.ndarray, pixels: np.ndarray, target: float = 0.5) -> torch.Tensor:
    """``(3, h, w)`` float crop rescaled so the object pixels average ``target``, then centered.

    A global lighting gain multiplies every pixel alike, so this removes it
    before the color encoder sees the crop.
    """
    x = torch.from_numpy(np.ascontiguousarray(crop)).to(torch.float64).permute(2, 0, 1) / 255.0
    mean = float(x[:, pixels[:, 0], pixels[:, 1]].mean()) if len(pixels) else 0.0
    if mean > 1e-6:
        x = x * (target / mean)
    return (x - 0.5).float()


def crop_to_tensor(crop, dtype=torch.float32) -> torch.Tensor:
    if isinstance(crop, torch.Tensor):
        return crop.to(dtype)
    x = torch.from_numpy(np.ascontiguousarray(crop)).to(dtype)
    return (x.permute(2, 0, 1) / 255.0 - 0.5)
