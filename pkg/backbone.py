from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ShapeError


@dataclass
class MultiScaleFeatures:
    """
    Признаки одного прохода бэкбона.

    stages: номер стадии энкодера i (с 1) → тензор (B, C_i, D_i, W_i, H_i)
    decoder_map: (B, C_dec, D, W, H) в разрешении входа, C_dec = base_width
    global_f: (B, C_top), пространственное среднее верхней стадии
    """

    stages: Dict[int, torch.Tensor]
    decoder_map: torch.Tensor
    global_f: torch.Tensor


def make_activation(name: str) -> nn.Module:
    return nn.GELU() if name == "gelu" else nn.ReLU(inplace=False)


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, activation: str = "relu", norm: str = "instance") -> None:
        super().__init__()
        layers: List[nn.Module] = [
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1, padding_mode="replicate")
        ]
        if norm == "instance":
            layers.append(nn.InstanceNorm3d(out_channels, affine=True))
        layers.append(make_activation(activation))
        self.block = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class DownBlock(nn.Module):
    """Свёртка с шагом 2 (вместо пулинга), затем ConvBlock."""

    def __init__(self, in_channels: int, out_channels: int, activation: str, norm: str) -> None:
        super().__init__()
        self.down = nn.Conv3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = ConvBlock(out_channels, out_channels, activation, norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.down(x))


class UpBlock(nn.Module):
    """Транспонированная свёртка ×2, конкатенация со skip-связью, ConvBlock."""

    def __init__(self, in_channels: int, out_channels: int, activation: str, norm: str) -> None:
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = ConvBlock(out_channels * 2, out_channels, activation, norm)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class VNetBackbone(nn.Module):
    """Миниатюрный 3D энкодер–декодер в стиле V-Net со skip-связями."""

    def __init__(
        self,
        in_channels: int = 1,
        stages: int = 4,
        base_width: int = 8,
        activation: str = "relu",
        norm: str = "instance",
    ) -> None:
        super().__init__()
        if stages < 1:
            raise ValueError("Нужна хотя бы одна стадия")
        self.num_stages = stages
        self.widths = [base_width * 2 ** i for i in range(stages)]

        self.encoder = nn.ModuleList([ConvBlock(in_channels, self.widths[0], activation, norm)])
        for i in range(1, stages):
            self.encoder.append(DownBlock(self.widths[i - 1], self.widths[i], activation, norm))

        self.decoder = nn.ModuleList([
            UpBlock(self.widths[i + 1], self.widths[i], activation, norm)
            for i in reversed(range(stages - 1))
        ])

    @property
    def stage_widths(self) -> Dict[int, int]:
        return {i + 1: w for i, w in enumerate(self.widths)}

    @property
    def decoder_channels(self) -> int:
        return self.widths[0]

    @property
    def top_channels(self) -> int:
        return self.widths[-1]

    def check_shape(self, spatial: Tuple[int, ...]) -> None:
        factor = 2 ** (self.num_stages - 1)
        if len(spatial) != 3 or any(s % factor for s in spatial):
            raise ShapeError(
                f"Размер патча {tuple(spatial)} должен делиться на {factor} по каждой оси",
                shape=list(spatial),
            )

    def forward(self, x: torch.Tensor) -> MultiScaleFeatures:
        if x.dim() != 5:
            raise ShapeError(f"Ожидается вход (B, C, D, W, H), получено {tuple(x.shape)}")
        self.check_shape(tuple(x.shape[2:]))

        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)

        stages = {i + 1: feat for i, feat in enumerate(skips)}
        global_f = F.adaptive_avg_pool3d(skips[-1], 1).flatten(1)

        y = skips[-1]
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            y = block(y, skip)

        return MultiScaleFeatures(stages=stages, decoder_map=y, global_f=global_f)
