from typing import Dict, List, Optional, Sequence
import re

from errors import ConfigError


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    """Разбирает повторяемые флаги `--set key=value` в словарь (последнее значение побеждает)."""
    overrides: Dict[str, str] = {}
    for raw in pairs or []:
        if "=" not in raw:
            raise ConfigError(f"Ожидается key=value, получено: '{raw}'", key=raw)
        key, value = raw.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"Пустой ключ в --set: '{raw}'", key=raw)
        overrides[key] = value.strip()
    return overrides


def sanitize_class_name(text: str) -> Optional[str]:
    cleaned = re.sub(r"[^\w\s\-/]", "", text)  # Удаляем спецсимволы кроме пробелов, дефисов и "/"
    cleaned = re.sub(r"\s+", " ", cleaned).strip().lower()
    if not cleaned:
        return None
    return cleaned


def parse_class_list(raw: str) -> List[str]:
    names = [sanitize_class_name(part) for part in raw.split(",")]
    names = [n for n in names if n]
    if not names:
        raise ConfigError("Список классов пуст или некорректен", key="classes")
    return names


def split_sentences(text: str) -> List[str]:
    """Делит абзац на предложения по завершающим знакам препинания."""
    parts = re.split(r"(?<=[.!?])\s+", text.strip())
    return [p.strip() for p in parts if p.strip()]
