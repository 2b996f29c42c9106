from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union
import itertools
import logging

import numpy as np
import torch
import torch.nn as nn

from errors import ShapeError
from phantom_data import save_volume

"""
Прогноз по всему тому скользящим окном.

Логиты всех окон, покрывающих воксель, усредняются (вес окон одинаков),
затем применяется softmax.
"""

Corner = Tuple[int, int, int]


@dataclass
class WindowPlan:
    volume_shape: Tuple[int, int, int]
    window: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    corners: List[Corner]

    def slices(self, corner: Corner) -> Tuple[slice, ...]:
        return tuple(slice(c, c + w) for c, w in zip(corner, self.window))

    def coverage(self) -> np.ndarray:
        counts = np.zeros(self.volume_shape, dtype=np.int32)
        for corner in self.corners:
            counts[self.slices(corner)] += 1
        return counts


def _axis_starts(size: int, window: int, stride: int) -> List[int]:
    starts = list(range(0, size - window + 1, stride))
    # последнее окно прижимается к границе тома
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def make_window_plan(volume_shape: Sequence[int], window: Sequence[int], stride: Sequence[int]) -> WindowPlan:
    volume_shape, window, stride = tuple(volume_shape), tuple(window), tuple(stride)
    if not len(volume_shape) == len(window) == len(stride) == 3:
        raise ShapeError("Окно, шаг и том должны быть трёхмерными")
    if any(s <= 0 for s in stride) or any(w <= 0 for w in window):
        raise ValueError(f"Окно {window} и шаг {stride} должны быть положительными")
    if any(s > w for s, w in zip(stride, window)):
        raise ShapeError(f"Шаг {stride} больше окна {window}: часть вокселей не попадёт ни в одно окно")
    if any(v < w for v, w in zip(volume_shape, window)):
        raise ShapeError(
            f"Том {volume_shape} меньше окна {window}; дополните том до размера окна",
            shape=list(volume_shape),
        )
    starts = [_axis_starts(v, w, s) for v, w, s in zip(volume_shape, window, stride)]
    return WindowPlan(volume_shape, window, stride, [tuple(c) for c in itertools.product(*starts)])


@torch.no_grad()
def window_logits(volume: Union[np.ndarray, torch.Tensor], model: nn.Module, plan: WindowPlan) -> torch.Tensor:
    """Средние логиты (K+1, D, W, H) по всем окнам плана."""
    model.eval()
    reference = next(model.parameters())
    x = torch.as_tensor(np.asarray(volume), dtype=reference.dtype, device=reference.device)
    if tuple(x.shape) != plan.volume_shape:
        raise ShapeError(f"Том {tuple(x.shape)} не совпадает с планом {plan.volume_shape}")

    total: Optional[torch.Tensor] = None
    counts = torch.zeros(plan.volume_shape, dtype=x.dtype, device=x.device)
    for corner in plan.corners:
        window = plan.slices(corner)
        logits = model(x[window][None, None]).logits[0]
        if total is None:
            total = torch.zeros((logits.shape[0], *plan.volume_shape), dtype=logits.dtype, device=x.device)
        total[(slice(None), *window)] += logits
        counts[window] += 1
    return total / counts


def sliding_window_infer(volume: Union[np.ndarray, torch.Tensor], model: nn.Module, plan: WindowPlan) -> torch.Tensor:
    """Вероятности (K+1, D, W, H); сумма по каналам равна 1."""
    return torch.softmax(window_logits(volume, model, plan), dim=0)


def select_model(pair: Any, use_teacher: bool = False) -> nn.Module:
    return pair.teacher if use_teacher else pair.student


def predict_labels(probs: torch.Tensor) -> np.ndarray:
    return probs.argmax(dim=0).cpu().numpy().astype(np.uint8)


def predict_volume(
    volume: np.ndarray,
    model: nn.Module,
    window: Sequence[int],
    stride: Sequence[int],
) -> Tuple[np.ndarray, torch.Tensor]:
    plan = make_window_plan(volume.shape, window, stride)
    logging.debug(f"Скользящее окно: {len(plan.corners)} окон для тома {volume.shape}")
    probs = sliding_window_infer(volume, model, plan)
    return predict_labels(probs), probs


def save_prediction(
    labels: np.ndarray,
    path: Any,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    probs: Optional[torch.Tensor] = None,
) -> None:
    """Метки в NIfTI; вероятности, если переданы, рядом в сжатом .npz."""
    path = Path(path)
    save_volume(labels.astype(np.uint8), path, spacing)
    if probs is not None:
        archive = path.with_name(path.name.replace(".nii.gz", "").replace(".nii", "") + "_probs.npz")
        np.savez_compressed(archive, probs=probs.cpu().numpy().astype(np.float32))
