import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config import DiffusionConfig
from app.data.synthetic import PairSample
from app.data.tiles import Modality, tile_to_tensor
from app.errors import InvalidParameterError
from app.prompts import PromptEncoder
from app.seeding import seeded


@dataclass(frozen=True, eq=False)
class Condition:
    """
    Условие денойзера: SAR (B, 1, H, W) и эмбеддинг промпта (B, E).
    """
    sar: torch.Tensor
    prompt_embedding: torch.Tensor

    def __post_init__(self):
        if self.sar.ndim != 4 or self.sar.shape[1] != 1:
            raise InvalidParameterError(f"SAR condition must be (B, 1, H, W), got {tuple(self.sar.shape)}")
        if self.prompt_embedding.ndim != 2 or self.prompt_embedding.shape[0] != self.sar.shape[0]:
            raise InvalidParameterError("prompt embedding must be (B, E) with the SAR batch size")

    @classmethod
    def from_pair(cls, pair: PairSample, prompt_encoder: PromptEncoder,
                  device: str | torch.device = "cpu") -> "Condition":
        if pair.sar.modality != Modality.SAR:
            raise InvalidParameterError("condition needs a SAR tile")
        class_vector = torch.from_numpy(np.array(pair.prompt.class_vector, dtype=np.float32))[None]
        with torch.no_grad():
            embedding = prompt_encoder(class_vector.to(device))
        return cls(sar=tile_to_tensor(pair.sar).to(device), prompt_embedding=embedding)

    def to(self, device) -> "Condition":
        return Condition(self.sar.to(device), self.prompt_embedding.to(device))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, kernel_size=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """
    Три уровня (делители 1, 2, 4) и средний блок; пропуски берутся с выходов уровней.
    """

    def __init__(self, in_ch: int, c: int, time_dim: int):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, c, 3, padding=1)
        self.block1 = ResBlock(c, c, time_dim)
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.block2 = ResBlock(c, 2 * c, time_dim)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.block3 = ResBlock(2 * c, 4 * c, time_dim)
        self.mid = ResBlock(4 * c, 4 * c, time_dim)

    def forward(self, x, temb, hint: Optional[torch.Tensor] = None):
        h = self.stem(x)
        if hint is not None:
            h = h + hint
        s1 = self.block1(h, temb)
        s2 = self.block2(self.down1(s1), temb)
        s3 = self.block3(self.down2(s2), temb)
        return [s1, s2, s3], self.mid(s3, temb)


class Decoder(nn.Module):
    def __init__(self, c: int, time_dim: int, out_ch: int):
        super().__init__()
        self.dec3 = ResBlock(8 * c, 4 * c, time_dim)
        self.up2 = nn.Conv2d(4 * c, 4 * c, 3, padding=1)
        self.dec2 = ResBlock(6 * c, 2 * c, time_dim)
        self.up1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec1 = ResBlock(3 * c, c, time_dim)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, out_ch, 3, padding=1)

    def forward(self, mid, skips, temb):
        s1, s2, s3 = skips
        d3 = self.dec3(torch.cat([mid, s3], dim=1), temb)
        u2 = self.up2(F.interpolate(d3, scale_factor=2.0, mode="nearest"))
        d2 = self.dec2(torch.cat([u2, s2], dim=1), temb)
        u1 = self.up1(F.interpolate(d2, scale_factor=2.0, mode="nearest"))
        d1 = self.dec1(torch.cat([u1, s1], dim=1), temb)
        # отводы декодера от грубого к тонкому: делители 4, 2, 1
        return [d3, d2, d1], self.out(F.silu(self.out_norm(d1)))


class BaseUNet(nn.Module):
    def __init__(self, c: int, time_dim: int, image_channels: int = 3):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.encoder = Encoder(image_channels, c, time_dim)
        self.decoder = Decoder(c, time_dim, image_channels)


class DenoiserNet(nn.Module):
    """
    Предсказатель шума ε_θ(x_t, t, c): замороженная база U-Net и обучаемая
    копия её энкодера, которая получает SAR и промпт и вливается в пропуски
    декодера через 1×1 свёртки с нулевой инициализацией.
    """

    def __init__(self, base_channels: int = 32, prompt_dim: int = 64, time_dim: int = 128,
                 train_base: bool = False, image_channels: int = 3):
        super().__init__()
        c = base_channels
        self.base_channels = c
        self.train_base = train_base
        self.base = BaseUNet(c, time_dim, image_channels)

        self.control_time_mlp = copy.deepcopy(self.base.time_mlp)
        self.control_encoder = copy.deepcopy(self.base.encoder)
        self.prompt_encoder = PromptEncoder(prompt_dim)
        self.prompt_proj = nn.Linear(prompt_dim, time_dim)
        self.hint = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, c, 3, padding=1), nn.SiLU(),
            zero_conv(c),
        )
        self.skip_zero = nn.ModuleList([zero_conv(c), zero_conv(2 * c), zero_conv(4 * c)])
        self.mid_zero = zero_conv(4 * c)

        self.base.requires_grad_(train_base)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "DenoiserNet":
        with seeded(cfg.init_seed):
            return cls(base_channels=cfg.base_channels, prompt_dim=cfg.prompt_dim,
                       time_dim=cfg.time_dim, train_base=cfg.train_base)

    @property
    def tap_channels(self) -> tuple[int, int, int]:
        c = self.base_channels
        return 4 * c, 2 * c, c

    def frozen_parameters(self):
        return [] if self.train_base else list(self.base.parameters())

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, x_t: torch.Tensor, t, cond: Optional[Condition] = None, return_taps: bool = False):
        if x_t.ndim != 4 or x_t.shape[-1] % 4 or x_t.shape[-2] % 4:
            raise InvalidParameterError(f"x_t must be (B, C, H, W) with H, W divisible by 4, got {tuple(x_t.shape)}")
        t = torch.as_tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        t_emb = sinusoidal_embedding(t, self.base.time_dim).to(x_t.dtype)

        temb = self.base.time_mlp(t_emb)
        skips, mid = self.base.encoder(x_t, temb)
        if cond is not None:
            if cond.sar.shape[-2:] != x_t.shape[-2:]:
                raise InvalidParameterError(
                    f"SAR condition size {tuple(cond.sar.shape[-2:])} differs from target size {tuple(x_t.shape[-2:])}")
            ctemb = self.control_time_mlp(t_emb) + self.prompt_proj(cond.prompt_embedding.to(x_t.dtype))
            hint = self.hint(cond.sar.to(x_t.dtype))
            control_skips, control_mid = self.control_encoder(x_t, ctemb, hint=hint)
            skips = [s + zc(cs) for s, zc, cs in zip(skips, self.skip_zero, control_skips)]
            mid = mid + self.mid_zero(control_mid)

        taps, eps_hat = self.base.decoder(mid, skips, temb)
        if return_taps:
            return eps_hat, taps
        return eps_hat
