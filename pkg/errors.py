from typing import Any, Dict, Optional

"""
Иерархия ошибок проекта.

Каждая ошибка знает свой код выхода для CLI и умеет превращаться
в машиночитаемую запись (см. `TakError.to_record`).
"""


class TakError(Exception):
    exit_code = 1

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self) -> Dict[str, Any]:
        record = {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        record.update({k: v for k, v in self.details.items() if v is not None})
        return record


# ⚙️ Конфигурация
class ConfigError(TakError, ValueError):
    exit_code = 2


# 📂 Данные и файлы
class DataError(TakError):
    exit_code = 3


class UnknownClass(DataError, KeyError):
    def __init__(self, class_name: str) -> None:
        super().__init__(f"Неизвестный класс: '{class_name}'", class_name=class_name)
        self.class_name = class_name

    def __str__(self) -> str:
        return self.message


class SchemaError(DataError, ValueError):
    def __init__(self, pointer: str, reason: str = "нарушение схемы") -> None:
        super().__init__(f"{reason}: {pointer}", pointer=pointer)
        self.pointer = pointer


class DuplicateClass(DataError, ValueError):
    def __init__(self, class_id: int) -> None:
        super().__init__(f"Повторяющийся class_id: {class_id}", class_id=class_id)
        self.class_id = class_id


class FormatError(DataError, ValueError):
    pass


class PlacementFailed(DataError, RuntimeError):
    def __init__(self, class_name: str, attempts: int) -> None:
        super().__init__(
            f"Не удалось разместить '{class_name}' за {attempts} попыток",
            class_name=class_name,
            attempts=attempts,
        )
        self.class_name = class_name


class LabelError(DataError, ValueError):
    pass


class MissingInput(DataError):
    def __init__(self, path: Any, what: str = "файл") -> None:
        super().__init__(f"Не найден {what}: {path}", path=str(path))
        self.path = str(path)

    def __str__(self) -> str:
        return self.message


class ShapeError(DataError, ValueError):
    pass


class EmptyMask(DataError, ValueError):
    pass


# 🔥 Обучение
class DivergenceError(TakError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, checkpoint: Optional[str] = None, **details: Any) -> None:
        super().__init__(message, checkpoint=checkpoint, **details)
        self.checkpoint = checkpoint


# 🧠 Знания и эмбеддинги
class GenerationFailed(TakError, RuntimeError):
    def __init__(self, class_name: str, reason: str = "") -> None:
        super().__init__(
            f"Генерация знаний для '{class_name}' не удалась{': ' + reason if reason else ''}",
            class_name=class_name,
        )
        self.class_name = class_name


class ValidationRejected(TakError, ValueError):
    def __init__(self, class_name: str, kind: str) -> None:
        super().__init__(
            f"Валидатор отклонил все утверждения ({kind}) для '{class_name}'",
            class_name=class_name,
            kind=kind,
        )
        self.class_name = class_name
        self.kind = kind


class EncodingFailed(TakError, RuntimeError):
    def __init__(self, class_name: Optional[str], reason: str = "") -> None:
        target = f"'{class_name}'" if class_name else "набора знаний"
        super().__init__(
            f"Кодирование {target} не удалось{': ' + reason if reason else ''}",
            class_name=class_name,
        )
        self.class_name = class_name


class NormalizationError(TakError, ValueError):
    pass


class MissingHead(TakError, KeyError):
    def __init__(self, class_id: int) -> None:
        super().__init__(f"Нет параметров головы для класса {class_id}", class_id=class_id)
        self.class_id = class_id

    def __str__(self) -> str:
        return self.message


class UndefinedSurface(TakError, ValueError):
    pass


class AlignmentSkipped(Exception):
    """Сигнал: в батче меньше двух непустых классов, контрастный член равен 0."""
