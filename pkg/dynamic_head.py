from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import MissingHead, ShapeError

"""
Текстовый контроллер: параметры сегментационной головы θ_k синтезируются
из (T_p, T_s, F) и применяются к карте декодера поточечными свёртками.
"""


@dataclass(frozen=True)
class HeadLayout:
    """Ширины поточечных слоёв головы, например (C_dec, 8, 8, 1)."""

    widths: Tuple[int, ...]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return [(self.widths[i], self.widths[i + 1]) for i in range(len(self.widths) - 1)]

    @property
    def num_params(self) -> int:
        return sum(c_in * c_out + c_out for c_in, c_out in self.layer_shapes)

    @property
    def offsets(self) -> List[Tuple[int, int, int]]:
        """(начало весов, начало смещений, конец) для каждого слоя внутри θ."""
        result, cursor = [], 0
        for c_in, c_out in self.layer_shapes:
            weight_end = cursor + c_in * c_out
            result.append((cursor, weight_end, weight_end + c_out))
            cursor = weight_end + c_out
        return result


def make_layout(decoder_channels: int, hidden: Sequence[int] = (8, 8)) -> HeadLayout:
    return HeadLayout(widths=(decoder_channels, *hidden, 1))


@dataclass
class DynamicHeadParams:
    class_id: int
    theta: torch.Tensor
    layout: HeadLayout

    def __post_init__(self) -> None:
        if self.theta.shape[-1] != self.layout.num_params:
            raise ShapeError(
                f"Длина θ {self.theta.shape[-1]} не совпадает с раскладкой ({self.layout.num_params})"
            )


def split_params(theta: torch.Tensor, layout: HeadLayout) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """θ (..., P) → список (веса (..., out, in), смещения (..., out))."""
    lead = theta.shape[:-1]
    layers = []
    for (c_in, c_out), (w_start, b_start, end) in zip(layout.layer_shapes, layout.offsets):
        weight = theta[..., w_start:b_start].reshape(*lead, c_out, c_in)
        bias = theta[..., b_start:end]
        layers.append((weight, bias))
    return layers


def run_heads(decoder_map: torch.Tensor, theta: torch.Tensor, layout: HeadLayout, activation: str = "relu") -> torch.Tensor:
    """
    Применяет головы всех классов.

    decoder_map: (B, C_dec, D, W, H); theta: (B, K+1, P) → логиты (B, K+1, D, W, H).
    Нелинейность стоит между слоями, после последнего слоя её нет.
    """
    batch, channels = decoder_map.shape[:2]
    spatial = decoder_map.shape[2:]
    if channels != layout.widths[0]:
        raise ShapeError(f"Карта декодера имеет {channels} каналов, голова ожидает {layout.widths[0]}")
    if theta.dim() != 3 or theta.shape[0] != batch:
        raise ShapeError(f"θ должен иметь форму (B, K+1, P), получено {tuple(theta.shape)}")

    act = F.gelu if activation == "gelu" else F.relu
    x = decoder_map.reshape(batch, 1, channels, -1).expand(batch, theta.shape[1], channels, -1)
    layers = split_params(theta, layout)
    for index, (weight, bias) in enumerate(layers):
        x = torch.matmul(weight, x) + bias.unsqueeze(-1)
        if index < len(layers) - 1:
            x = act(x)
    return x.reshape(batch, theta.shape[1], *spatial)


def apply_heads(
    decoder_map: torch.Tensor,
    params: Sequence[DynamicHeadParams],
    num_classes: Optional[int] = None,
    activation: str = "relu",
) -> torch.Tensor:
    """Логиты (B, K+1, D, W, H); канал k берётся из параметров с class_id = k."""
    if not params:
        raise MissingHead(0)
    by_class = {p.class_id: p for p in params}
    num_channels = num_classes + 1 if num_classes is not None else max(by_class) + 1
    for class_id in range(num_channels):
        if class_id not in by_class:
            raise MissingHead(class_id)

    layout = params[0].layout
    batch = decoder_map.shape[0]
    thetas = []
    for class_id in range(num_channels):
        theta = by_class[class_id].theta
        thetas.append(theta.expand(batch, -1) if theta.dim() == 1 else theta)
    return run_heads(decoder_map, torch.stack(thetas, dim=1), layout, activation)


class TextController(nn.Module):
    """
    Контроллер: Linear([T_p; T_s; F]) → θ_k.

    Фон (k = 0) не имеет текстового описания: вместо [T_p; T_s] используется
    обучаемый вектор той же длины.
    """

    def __init__(self, text_dim: int, feature_dim: int, layout: HeadLayout) -> None:
        super().__init__()
        self.text_dim = text_dim
        self.feature_dim = feature_dim
        self.layout = layout
        self.background_prior = nn.Parameter(torch.randn(2 * text_dim) * 0.02)
        self.controller = nn.Linear(2 * text_dim + feature_dim, layout.num_params)

    def generate_params(self, t_p: torch.Tensor, t_s: torch.Tensor, f: torch.Tensor, class_id: int = 1) -> DynamicHeadParams:
        """θ_k для одного класса; f может быть (C_top,) или (B, C_top)."""
        if t_p.shape[-1] != self.text_dim or t_s.shape[-1] != self.text_dim:
            raise ShapeError(f"Эмбеддинги текста должны иметь размерность {self.text_dim}")
        if f.shape[-1] != self.feature_dim:
            raise ShapeError(f"Глобальный признак должен иметь размерность {self.feature_dim}")
        prior = torch.cat([t_p, t_s], dim=-1)
        if f.dim() == 2:
            prior = prior.expand(f.shape[0], -1)
        theta = self.controller(torch.cat([prior, f], dim=-1))
        return DynamicHeadParams(class_id=class_id, theta=theta, layout=self.layout)

    def generate_background_params(self, f: torch.Tensor) -> DynamicHeadParams:
        t_p, t_s = self.background_prior.chunk(2)
        return self.generate_params(t_p, t_s, f, class_id=0)

    def forward(self, text_p: torch.Tensor, text_s: torch.Tensor, global_f: torch.Tensor) -> torch.Tensor:
        """text_p, text_s: (K, D); global_f: (B, C_top) → θ (B, K+1, P); строка 0 отведена фону."""
        if text_p.shape[0] != text_s.shape[0]:
            raise ShapeError(f"Число классов в T_p ({text_p.shape[0]}) и T_s ({text_s.shape[0]}) различается")
        params = [self.generate_background_params(global_f)]
        for k in range(text_p.shape[0]):
            params.append(self.generate_params(text_p[k], text_s[k], global_f, class_id=k + 1))
        return torch.stack([p.theta for p in params], dim=1)
