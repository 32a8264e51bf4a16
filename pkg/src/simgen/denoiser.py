"""Residual U-Net noise predictor over 6-channel fields.

The network maps a noisy image+mask field and a timestep to a 6-channel
noise estimate. Layout: initial projection, a mirrored encoder/decoder with
two GroupNorm-Conv-GELU blocks per level, learnable stride-2 down/upsampling
between levels, a two-block bottleneck, and a zero-initialized output head.
Both block outputs of each encoder level are concatenated into the matching
decoder level. The timestep enters through a sinusoidal embedding and a
two-layer GELU feedforward, added per level through learned projections
after the first block.

All parameters are initialized from a NumPy generator so identical seeds
give bit-identical weights independently of torch's global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    base_features: int = 16
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    groupnorm_groups: int = 8
    time_embed_dim: int = 0  # 0 -> 4 * base_features
    in_channels: int = 6
    out_channels: int = 6

    def __post_init__(self) -> None:
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if not self.multipliers or any(m < 1 for m in self.multipliers):
            raise ValueError(f"multipliers must be positive, got {self.multipliers}")
        if self.groupnorm_groups < 1:
            raise ValueError("groupnorm_groups must be positive")
        if self.base_features % self.groupnorm_groups and self.base_features >= self.groupnorm_groups:
            raise ValueError(
                f"base_features ({self.base_features}) must be divisible by "
                f"groupnorm_groups ({self.groupnorm_groups})"
            )
        if self.time_embed_dim == 0:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_features)
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def num_levels(self) -> int:
        return len(self.multipliers)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_features * m for m in self.multipliers)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.num_levels - 1)

    def to_dict(self) -> dict:
        return {
            "base_features": self.base_features,
            "multipliers": list(self.multipliers),
            "groupnorm_groups": self.groupnorm_groups,
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenoiserConfig":
        return cls(
            base_features=int(doc["base_features"]),
            multipliers=tuple(doc["multipliers"]),
            groupnorm_groups=int(doc["groupnorm_groups"]),
            time_embed_dim=int(doc["time_embed_dim"]),
            in_channels=int(doc["in_channels"]),
            out_channels=int(doc["out_channels"]),
        )


def _num_groups(channels: int, preferred: int) -> int:
    # largest divisor of `channels` not exceeding the preferred group count
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """GroupNorm -> 3x3 same-padding conv -> GELU."""

    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(in_ch, groups), in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.gelu(self.conv(self.norm(x)))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) timesteps -> (B, dim) sin/cos features over log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float64, device=t.device)
        / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class DenoiserNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chs = config.channels
        groups = config.groupnorm_groups
        tdim = config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.GELU(), nn.Linear(tdim, tdim)
        )
        self.init_conv = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)

        self.enc_block1 = nn.ModuleList()
        self.enc_block2 = nn.ModuleList()
        self.enc_tproj = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, c in enumerate(chs):
            self.enc_block1.append(ConvBlock(c, c, groups))
            self.enc_block2.append(ConvBlock(c, c, groups))
            self.enc_tproj.append(nn.Linear(tdim, c))
            if i + 1 < len(chs):
                self.downs.append(nn.Conv2d(c, chs[i + 1], 3, stride=2, padding=1))

        mid = chs[-1]
        self.mid_block1 = ConvBlock(mid, mid, groups)
        self.mid_block2 = ConvBlock(mid, mid, groups)
        self.mid_tproj = nn.Linear(tdim, mid)

        self.dec_block1 = nn.ModuleList()
        self.dec_block2 = nn.ModuleList()
        self.dec_tproj = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i, c in enumerate(chs):
            # decoder level i consumes its running state plus both encoder skips
            self.dec_block1.append(ConvBlock(3 * c, c, groups))
            self.dec_block2.append(ConvBlock(c, c, groups))
            self.dec_tproj.append(nn.Linear(tdim, c))
            if i > 0:
                self.ups.append(
                    nn.ConvTranspose2d(chs[i], chs[i - 1], 4, stride=2, padding=1)
                )

        self.head = nn.Conv2d(chs[0], config.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        h_in, w_in = x.shape[2], x.shape[3]
        d = cfg.spatial_divisor
        if h_in % d or w_in % d:
            raise ValueError(
                f"spatial size {h_in}x{w_in} must be divisible by {d} "
                f"(2^(num_levels-1) for {cfg.num_levels} levels)"
            )
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.ndim != 1 or t.shape[0] != x.shape[0]:
            raise ValueError(f"t must be scalar or shape ({x.shape[0]},)")
        if (t < 1).any():
            raise ValueError("timesteps must be >= 1")

        temb = self.time_mlp(sinusoidal_embedding(t, cfg.time_embed_dim).to(x.dtype))

        def inject(h: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
            return h + proj(temb)[:, :, None, None]

        h = self.init_conv(x)
        skips: list[tuple[torch.Tensor, torch.Tensor]] = []
        for i in range(cfg.num_levels):
            s1 = inject(self.enc_block1[i](h), self.enc_tproj[i])
            s2 = self.enc_block2[i](s1)
            skips.append((s1, s2))
            h = s2
            if i + 1 < cfg.num_levels:
                h = self.downs[i](h)

        h = inject(self.mid_block1(h), self.mid_tproj)
        h = self.mid_block2(h)

        for i in reversed(range(cfg.num_levels)):
            s1, s2 = skips[i]
            h = torch.cat([h, s1, s2], dim=1)
            h = inject(self.dec_block1[i](h), self.dec_tproj[i])
            h = self.dec_block2[i](h)
            if i > 0:
                h = self.ups[i - 1](h)

        return self.head(h)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _he_std(weight: torch.Tensor, transposed: bool = False) -> float:
    shape = weight.shape
    if weight.ndim == 4:
        # ConvTranspose2d stores (in, out, kh, kw); fan-in is in * kernel
        fan_in = shape[0] * shape[2] * shape[3] if transposed else shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[1]
    return math.sqrt(2.0 / fan_in)


def build_denoiser(config: DenoiserConfig, seed: int) -> DenoiserNet:
    """Assemble and seed-initialize the network.

    He-normal weights drawn from a NumPy PCG64 stream, zero biases, unit
    GroupNorm scales, and a zero output head (so a fresh net predicts zero
    noise, which stabilizes the first training steps).
    """
    net = DenoiserNet(config)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, module in net.named_modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                std = _he_std(module.weight, isinstance(module, nn.ConvTranspose2d))
                w = rng.standard_normal(tuple(module.weight.shape)) * std
                module.weight.copy_(torch.from_numpy(w))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net


def predict_noise(net: DenoiserNet, x_t: np.ndarray, t: int | np.ndarray) -> np.ndarray:
    """Numpy-facing forward pass: (B, 6, H, W) field + timestep(s) -> noise."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"x_t must be (B, C, H, W), got shape {x.shape}")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
        tt = torch.as_tensor(np.asarray(t, dtype=np.int64))
        out = net(xt, tt)
    result = out.double().numpy()
    if not np.all(np.isfinite(result)):
        raise FloatingPointError("denoiser produced non-finite outputs")
    return result
