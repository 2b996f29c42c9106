from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence
import math

import torch
import torch.nn.functional as F

from errors import AlignmentSkipped, NormalizationError

"""
Кросс-модальное контрастное выравнивание.

    1. энтропия прогноза по вокселям и отбор уверенных вокселей (перцентиль);
    2. банк признаков классов по масштабам: метки уменьшаются ближайшим
       соседом до размера стадии, на класс берётся не больше λ_N векторов;
    3. контрастная потеря: позитивы только в числителе, негативы только
       в знаменателе (флаг `infonce_compat` кладёт позитивы и в знаменатель).
"""

SUM_TOLERANCE = 1e-5


@dataclass
class ClassFeatureBank:
    """vectors[масштаб][класс] → тензор (n, C_i) с L2-нормированными строками, n ≤ cap."""

    cap: int
    vectors: Dict[int, Dict[int, torch.Tensor]] = field(default_factory=dict)

    def count(self, scale: int, class_id: int) -> int:
        group = self.vectors.get(scale, {}).get(class_id)
        return 0 if group is None else int(group.shape[0])


def entropy_map(probs: torch.Tensor) -> torch.Tensor:
    """Энтропия по оси классов (dim=-4): (C, D, W, H) → (D, W, H), (B, C, ...) → (B, ...)."""
    if probs.dim() < 4:
        raise ValueError(f"Ожидается сетка (C, D, W, H) или (B, C, D, W, H), получено {tuple(probs.shape)}")
    if torch.any(probs < 0):
        raise NormalizationError("Вероятности не могут быть отрицательными")
    sums = probs.sum(dim=-4)
    if torch.any((sums - 1.0).abs() > SUM_TOLERANCE):
        raise NormalizationError("Сумма вероятностей по классам отличается от 1")
    # xlogy даёт 0·log 0 = 0
    return -torch.special.xlogy(probs, probs).sum(dim=-4)


def nearest_rank_threshold(values: torch.Tensor, q: float) -> torch.Tensor:
    """q-й перцентиль по определению ближайшего ранга: значение с рангом ⌈q/100·n⌉."""
    flat = values.reshape(-1)
    rank = max(1, math.ceil(q / 100.0 * flat.numel()))
    return torch.sort(flat).values[rank - 1]


def select_confident(probs: torch.Tensor, q: float, entropy: Optional[torch.Tensor] = None) -> torch.Tensor:
    if not 0.0 < q <= 100.0:
        raise ValueError(f"Перцентиль q должен лежать в (0, 100], получено {q}")
    if entropy is None:
        entropy = entropy_map(probs)
    threshold = nearest_rank_threshold(entropy, q)
    return entropy <= threshold


def downsample_nearest(grid: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """(B, D, W, H) → (B, d, w, h) ближайшим соседом, тип сохраняется."""
    resized = F.interpolate(grid.unsqueeze(1).float(), size=tuple(size), mode="nearest")
    return resized.squeeze(1).to(grid.dtype)


def sample_class_features(
    stages: Mapping[int, torch.Tensor],
    labels: torch.Tensor,
    confident_mask: Optional[torch.Tensor],
    lambda_n: int,
    seed: int,
    num_classes: int,
    scales: Optional[Sequence[int]] = None,
) -> ClassFeatureBank:
    """
    Собирает банк признаков классов 1..K (фон не участвует).

    stages: масштаб → признаки (B, C_i, D_i, W_i, H_i);
    labels: (B, D, W, H) метки или псевдометки в разрешении входа;
    confident_mask: (B, D, W, H), для размеченных вокселей True.
    """
    if lambda_n < 0:
        raise ValueError("λ_N не может быть отрицательным")

    generator = torch.Generator().manual_seed(int(seed))
    bank = ClassFeatureBank(cap=lambda_n)
    for scale in sorted(scales if scales is not None else stages):
        feats = stages[scale]
        size = feats.shape[2:]
        scale_labels = downsample_nearest(labels, size)
        keep = torch.ones_like(scale_labels, dtype=torch.bool)
        if confident_mask is not None:
            keep = downsample_nearest(confident_mask, size)
        voxels = feats.permute(0, 2, 3, 4, 1)

        per_class: Dict[int, torch.Tensor] = {}
        for class_id in range(1, num_classes + 1):
            selected = voxels[(scale_labels == class_id) & keep]
            available = selected.shape[0]
            take = min(lambda_n, available)
            if take == 0:
                continue
            if available > take:
                index = torch.randperm(available, generator=generator)[:take].to(selected.device)
                selected = selected[index]
            per_class[class_id] = F.normalize(selected, dim=-1)
        bank.vectors[scale] = per_class
    return bank


def contrastive_loss_from_groups(
    groups: Mapping[int, Sequence[torch.Tensor]],
    tau: float,
    infonce_compat: bool = False,
) -> torch.Tensor:
    """
    Контрастная потеря по готовым группам.

    groups: масштаб → список тензоров (n_k, C_i), по одному на класс.
    Пары строятся только внутри масштаба. Якоря с пустым P(f) или N(f)
    в Ω не входят. Нет ни одного якоря → AlignmentSkipped.
    """
    if tau <= 0:
        raise ValueError("Температура τ должна быть положительной")

    terms: List[torch.Tensor] = []
    for scale in sorted(groups):
        members = [g for g in groups[scale] if g.shape[0] > 0]
        if len(members) < 2:
            continue
        embeddings = torch.cat(members, dim=0)
        owner = torch.cat([
            torch.full((g.shape[0],), k, dtype=torch.long, device=g.device) for k, g in enumerate(members)
        ])

        same = owner.unsqueeze(0) == owner.unsqueeze(1)
        not_self = ~torch.eye(owner.numel(), dtype=torch.bool, device=owner.device)
        positive = same & not_self
        negative = ~same
        valid = positive.any(dim=1) & negative.any(dim=1)
        if not bool(valid.any()):
            continue

        logits = embeddings[valid] @ embeddings.T / tau
        positive, negative = positive[valid], negative[valid]
        denominator_mask = (positive | negative) if infonce_compat else negative

        log_num = logits.masked_fill(~positive, float("-inf")).logsumexp(dim=1)
        log_den = logits.masked_fill(~denominator_mask, float("-inf")).logsumexp(dim=1)
        terms.append(-(log_num - log_den))

    if not terms:
        raise AlignmentSkipped("Меньше двух непустых классов на всех масштабах")
    return torch.cat(terms).mean()


def contrastive_loss(
    bank: ClassFeatureBank,
    proj_p: Mapping[int, torch.Tensor],
    proj_s: Mapping[int, torch.Tensor],
    tau: float = 0.07,
    infonce_compat: bool = False,
) -> torch.Tensor:
    """
    Потеря выравнивания: F_k^i = V_k^i ∪ {T_p'^i_k} ∪ {T_s'^i_k}.

    Класс, отсутствующий в банке на масштабе i, пропускается целиком
    (вместе со своими текстовыми эмбеддингами).
    proj_p, proj_s: масштаб → (K, C_i), строка k-1 соответствует классу k.
    """
    groups: Dict[int, List[torch.Tensor]] = {}
    for scale, per_class in bank.vectors.items():
        if scale not in proj_p or scale not in proj_s:
            raise KeyError(f"Нет проекций знаний для масштаба {scale}")
        groups[scale] = []
        for class_id in sorted(per_class):
            visual = per_class[class_id]
            text = torch.stack([proj_p[scale][class_id - 1], proj_s[scale][class_id - 1]]).to(visual.dtype)
            groups[scale].append(torch.cat([visual, text], dim=0))
    return contrastive_loss_from_groups(groups, tau, infonce_compat)
