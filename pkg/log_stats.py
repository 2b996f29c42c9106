from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List
import json

from errors import FormatError, MissingInput

"""Анализ журнала обучения (NDJSON): средние по эпохам и последние записи."""

LOSS_KEYS = ("L_s", "L_u", "L_con", "lambda_u", "lr")


def read_training_log(path: Any) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "журнал обучения")

    records = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: некорректная строка журнала", path=str(path)) from e
    return records


def epoch_summaries(records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    grouped: Dict[int, List[Dict[str, Any]]] = defaultdict(list)
    for record in records:
        grouped[int(record["epoch"])].append(record)

    summaries = []
    for epoch in sorted(grouped):
        rows = grouped[epoch]
        summary: Dict[str, Any] = {"epoch": epoch, "steps": len(rows)}
        for key in LOSS_KEYS:
            summary[key] = sum(float(r[key]) for r in rows) / len(rows)
        summaries.append(summary)
    return summaries


def get_last_records(records: List[Dict[str, Any]], limit: int = 5) -> List[Dict[str, Any]]:
    return sorted(records, key=lambda r: int(r["step"]), reverse=True)[:limit]
