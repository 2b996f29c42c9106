from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import json
import math

import numpy as np
import pandas as pd
import torch.nn as nn
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from scipy.spatial import ConvexHull

from errors import EmptyMask, FormatError, MissingInput, ShapeError, UndefinedSurface

"""
Метрики оценки: Dice, ASD, отношение объёма выпуклой оболочки (CHVR),
доли вокселей и деление классов на крупные / мелкие (порог 5%).
"""

SMALL_CLASS_THRESHOLD = 0.05
REPORT_COLUMNS = ["case_id", "class_id", "class_name", "dice", "asd", "voxel_proportion", "size_group", "chvr"]
SCATTER_COLUMNS = ["class_name", "voxel_proportion", "chvr", "dice_delta"]

# 8 углов единичного вокселя
VOXEL_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)


def _as_pair(pred: np.ndarray, gt: np.ndarray):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"Формы масок различаются: {pred.shape} и {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _as_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Граница: маска минус её эрозия с 6-связностью; за краем массива фон."""
    mask = np.asarray(mask, dtype=bool)
    structure = generate_binary_structure(mask.ndim, 1)
    return mask & ~binary_erosion(mask, structure=structure, border_value=0)


def asd(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """
    Симметричная средняя поверхностная дистанция.

    Расстояния обоих направлений (граница pred → граница gt и обратно)
    объединяются в один набор и усредняются вместе, поэтому направление
    с большим числом граничных вокселей весит больше. Это не то же самое,
    что полусумма двух направленных средних (как в medpy).
    """
    pred, gt = _as_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise UndefinedSurface("ASD не определена для пустой маски")

    border_pred, border_gt = boundary(pred), boundary(gt)
    to_gt = distance_transform_edt(~border_gt, sampling=spacing)
    to_pred = distance_transform_edt(~border_pred, sampling=spacing)
    distances = np.concatenate([to_gt[border_pred], to_pred[border_gt]])
    return float(distances.mean())


def convex_hull_volume_ratio(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Объём оболочки по углам всех занятых вокселей / объём вокселей, ≥ 1."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("CHVR не определён для пустой маски")

    # углы вокселя, все 26 соседей которого заняты, лежат внутри оболочки
    surface = mask & ~binary_erosion(mask, structure=np.ones((3, 3, 3), dtype=bool), border_value=0)
    coords = np.argwhere(surface).astype(np.float64)
    corners = np.unique((coords[:, None, :] + VOXEL_CORNERS[None]).reshape(-1, 3), axis=0)
    scale = np.asarray(spacing, dtype=np.float64)
    hull = ConvexHull(corners * scale)
    return float(hull.volume / (count * float(np.prod(scale))))


def size_group(proportion: float) -> str:
    return "large" if proportion >= SMALL_CLASS_THRESHOLD else "small"


def voxel_proportions(gt_labels: np.ndarray, num_classes: int) -> Dict[int, float]:
    """Доли классов 1..K среди вокселей переднего плана разметки."""
    gt_labels = np.asarray(gt_labels)
    counts = np.bincount(gt_labels.reshape(-1).astype(np.int64), minlength=num_classes + 1)[1:num_classes + 1]
    foreground = counts.sum()
    if foreground == 0:
        return {k: 0.0 for k in range(1, num_classes + 1)}
    return {k: float(counts[k - 1] / foreground) for k in range(1, num_classes + 1)}


@dataclass
class ClassReport:
    case_id: str
    class_id: int
    class_name: str
    dice: float
    asd: float
    voxel_proportion: float
    size_group: str
    chvr: float


def class_report(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    class_names: Sequence[str],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    case_id: str = "",
) -> List[ClassReport]:
    """Метрики по классам 1..K. Неопределённые ASD и CHVR записываются как NaN."""
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"Формы прогноза {pred_labels.shape} и разметки {gt_labels.shape} различаются")

    proportions = voxel_proportions(gt_labels, len(class_names))
    reports = []
    for class_id, name in enumerate(class_names, start=1):
        pred_mask, gt_mask = pred_labels == class_id, gt_labels == class_id
        try:
            surface_distance = asd(pred_mask, gt_mask, spacing)
        except UndefinedSurface:
            surface_distance = math.nan
        try:
            chvr = convex_hull_volume_ratio(gt_mask, spacing)
        except EmptyMask:
            chvr = math.nan
        reports.append(ClassReport(
            case_id=case_id,
            class_id=class_id,
            class_name=name,
            dice=dice(pred_mask, gt_mask),
            asd=surface_distance,
            voxel_proportion=proportions[class_id],
            size_group=size_group(proportions[class_id]),
            chvr=chvr,
        ))
    return reports


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# 📊 Сводка
def reports_frame(reports: Sequence[ClassReport]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in reports], columns=REPORT_COLUMNS)


def _finite_or_none(value: Any) -> Optional[float]:
    value = float(value)
    return None if math.isnan(value) else value


def _group_means(frame: pd.DataFrame) -> Dict[str, Optional[float]]:
    if frame.empty:
        return {"dice": None, "asd": None, "classes": 0}
    return {
        "dice": _finite_or_none(frame["dice"].mean()),
        "asd": _finite_or_none(frame["asd"].mean()),
        "classes": int(len(frame)),
    }


def summarize_reports(reports: Sequence[ClassReport]) -> Dict[str, Any]:
    """
    Средние All / L. / S.

    Группа класса определяется один раз по средней доле вокселей
    среди случаев; ASD, равная NaN, в средние не входит.
    """
    frame = reports_frame(reports)
    per_class = (
        frame.groupby(["class_id", "class_name"], sort=True)[["dice", "asd", "voxel_proportion", "chvr"]]
        .mean()
        .reset_index()
    )
    per_class["size_group"] = per_class["voxel_proportion"].map(size_group)

    return {
        "cases": int(frame["case_id"].nunique()),
        "all": _group_means(per_class),
        "large": _group_means(per_class[per_class["size_group"] == "large"]),
        "small": _group_means(per_class[per_class["size_group"] == "small"]),
        "classes": {
            row.class_name: {
                "class_id": int(row.class_id),
                "dice": _finite_or_none(row.dice),
                "asd": _finite_or_none(row.asd),
                "voxel_proportion": float(row.voxel_proportion),
                "size_group": row.size_group,
                "chvr": _finite_or_none(row.chvr),
            }
            for row in per_class.itertuples(index=False)
        },
    }


# 💾 Экспорт
def write_report_csv(reports: Sequence[ClassReport], path: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports).to_csv(path, index=False)


def read_report_csv(path: Any) -> List[ClassReport]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "отчёт")
    try:
        frame = pd.read_csv(path, dtype={"case_id": str, "class_name": str, "size_group": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: не удалось прочитать отчёт ({e})", path=str(path)) from e
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{path}: нет колонок {missing}", path=str(path))
    return [
        ClassReport(
            case_id=str(row.case_id),
            class_id=int(row.class_id),
            class_name=str(row.class_name),
            dice=float(row.dice),
            asd=float(row.asd),
            voxel_proportion=float(row.voxel_proportion),
            size_group=str(row.size_group),
            chvr=float(row.chvr),
        )
        for row in frame[REPORT_COLUMNS].itertuples(index=False)
    ]


def write_summary_json(summary: Dict[str, Any], path: Any, config_hash: Optional[str] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(summary)
    if config_hash is not None:
        payload["config_hash"] = config_hash
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def scatter_frame(
    reports: Sequence[ClassReport],
    baseline: Optional[Sequence[ClassReport]] = None,
) -> pd.DataFrame:
    """По классу: средние доля и CHVR, dice_delta = Dice − Dice базового прогона (NaN без базы)."""
    frame = reports_frame(reports)
    scatter = frame.groupby("class_name", sort=False)[["voxel_proportion", "chvr", "dice"]].mean()
    if baseline:
        base = reports_frame(baseline).groupby("class_name")["dice"].mean()
        scatter["dice_delta"] = scatter["dice"] - base.reindex(scatter.index)
    else:
        scatter["dice_delta"] = math.nan
    return scatter.reset_index()[SCATTER_COLUMNS]


def write_scatter_csv(
    reports: Sequence[ClassReport],
    path: Any,
    baseline: Optional[Sequence[ClassReport]] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scatter_frame(reports, baseline).to_csv(path, index=False)
