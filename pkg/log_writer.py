from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional
import json
import logging
import time

from config import env_settings

"""
Логирование команд и обучения.

    - `setup_logging` настраивает запись в файл (путь из .env, TAK_LOG_FILE);
    - `@log_command` оборачивает обработчики CLI: старт, итог, длительность;
    - `TrainingLogWriter` пишет журнал обучения в формате NDJSON,
      одна запись на шаг оптимизатора, без временных меток, чтобы
      повторный запуск с тем же seed давал побайтно тот же файл.
"""

TRAINING_LOG_KEYS = ("epoch", "step", "L_s", "L_u", "L_con", "lambda_u", "lr")


def setup_logging(log_file: Optional[str] = None, level: int = logging.INFO) -> None:
    # 🛠 Настройка логирования в файл
    logging.basicConfig(
        filename=log_file or env_settings()["log_file"],
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        encoding="utf-8",
        force=True,
    )


def log_command(name: str) -> Callable:
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            started = time.perf_counter()
            logging.info(f"Команда '{name}' запущена")
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                elapsed = time.perf_counter() - started
                logging.error(f"Команда '{name}' завершилась ошибкой за {elapsed:.1f} с: {e}")
                raise
            elapsed = time.perf_counter() - started
            logging.info(f"Команда '{name}' выполнена за {elapsed:.1f} с")
            return result
        return wrapper
    return decorator


class TrainingLogWriter:
    def __init__(self, path: Any) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", encoding="utf-8", newline="\n")

    def write(self, record: Dict[str, Any]) -> None:
        missing = [k for k in TRAINING_LOG_KEYS if k not in record]
        if missing:
            raise KeyError(f"В записи журнала нет ключей: {missing}")
        line = json.dumps({k: record[k] for k in TRAINING_LOG_KEYS}, separators=(",", ":"))
        self._handle.write(line + "\n")
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "TrainingLogWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
