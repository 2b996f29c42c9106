from dataclasses import dataclass, field, fields, asdict, is_dataclass
from dotenv import load_dotenv
from pathlib import Path
from typing import Any, Dict, List, Tuple
import hashlib
import json
import os

from errors import ConfigError, MissingInput

"""
RunConfig: единый JSON-документ конфигурации запуска.

Секции:
    - training:  TrainingConfig (оптимизатор, расписания, батч, λ);
    - model:     ModelConfig (бэкбон, голова, контрастные масштабы);
    - inference: InferenceConfig (скользящее окно).
Верхний уровень содержит пути к артефактам и переключатели абляций.
"""


# 🔐 Загрузка конфигурации из .env
load_dotenv()

PROMPT_KINDS = ("name", "position", "shape", "position+shape")
ENCODERS = ("hash", "biomedclip")
ACTIVATIONS = ("relu", "gelu")
NORMS = ("instance", "none")


def env_settings() -> Dict[str, str]:
    """Возвращает настройки окружения (читаются при каждом вызове)."""
    return {
        "mllm_endpoint": os.getenv("TAK_MLLM_ENDPOINT", ""),
        "mllm_api_key": os.getenv("TAK_MLLM_API_KEY", ""),
        "mllm_model": os.getenv("TAK_MLLM_MODEL", "gpt-4o"),
        "log_file": os.getenv("TAK_LOG_FILE", "log.txt"),
    }


@dataclass
class TrainingConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    patch_size: Tuple[int, int, int] = (96, 96, 96)
    n_labeled: int = 2
    n_unlabeled: int = 2
    lambda_c: float = 0.1
    contrast_start_epoch: int = 20
    lambda_n: int = 40
    lambda_u_max: float = 1.0
    lambda_u_rampup: float = 40.0
    ema_alpha: float = 0.99
    epochs: int = 60
    iterations_per_epoch: int = 20
    checkpoint_every: int = 10
    seed: int = 1337
    single_thread: bool = True
    device: str = "cpu"


@dataclass
class ModelConfig:
    in_channels: int = 1
    stages: int = 4
    base_width: int = 8
    head_hidden: Tuple[int, ...] = (8, 8)
    contrast_scales: Tuple[int, ...] = (2, 3, 4)
    text_dim: int = 512
    activation: str = "relu"
    norm: str = "instance"


@dataclass
class InferenceConfig:
    window: Tuple[int, int, int] = (96, 96, 96)
    stride: Tuple[int, int, int] = (32, 32, 16)
    use_teacher: bool = False


@dataclass
class RunConfig:
    class_names: List[str] = field(
        default_factory=lambda: ["liver", "stomach", "aorta", "right adrenal gland"]
    )
    knowledge_path: str = "artifacts/knowledge.json"
    embedding_cache: str = "artifacts/embeddings.bin"
    phantom_spec_path: str = "configs/phantom_spec.json"
    corpus_dir: str = "artifacts/corpus"
    run_dir: str = "runs/default"
    n_cases: int = 40
    labeled_fraction: float = 0.05
    encoder: str = "hash"
    encoder_seed: int = 0
    prompt_kind: str = "position+shape"
    contrast: bool = True
    infonce_compat: bool = False
    tau: float = 0.07
    q: float = 75.0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        t, m = self.training, self.model
        positive = {
            "training.lr": t.lr,
            "training.poly_power": t.poly_power,
            "training.iterations_per_epoch": t.iterations_per_epoch,
            "training.epochs": t.epochs,
            "training.lambda_u_rampup": t.lambda_u_rampup,
            "training.checkpoint_every": t.checkpoint_every,
            "training.n_labeled": t.n_labeled,
            "tau": self.tau,
            "model.base_width": m.base_width,
            "model.stages": m.stages,
            "model.text_dim": m.text_dim,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{key} должен быть положительным, получено {value}", key=key)

        non_negative = {
            "training.momentum": t.momentum,
            "training.weight_decay": t.weight_decay,
            "training.lambda_c": t.lambda_c,
            "training.lambda_u_max": t.lambda_u_max,
            "training.contrast_start_epoch": t.contrast_start_epoch,
            "training.lambda_n": t.lambda_n,
            "training.n_unlabeled": t.n_unlabeled,
        }
        for key, value in non_negative.items():
            if value < 0:
                raise ConfigError(f"{key} не может быть отрицательным, получено {value}", key=key)

        if not 0.0 <= t.ema_alpha <= 1.0:
            raise ConfigError(f"training.ema_alpha вне [0, 1]: {t.ema_alpha}", key="training.ema_alpha")
        if not 0.0 < self.q <= 100.0:
            raise ConfigError(f"q вне (0, 100]: {self.q}", key="q")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction вне (0, 1]: {self.labeled_fraction}", key="labeled_fraction")
        if self.prompt_kind not in PROMPT_KINDS:
            raise ConfigError(f"prompt_kind должен быть одним из {PROMPT_KINDS}", key="prompt_kind")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder должен быть одним из {ENCODERS}", key="encoder")
        if m.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation должен быть одним из {ACTIVATIONS}", key="model.activation")
        if m.norm not in NORMS:
            raise ConfigError(f"model.norm должен быть одним из {NORMS}", key="model.norm")
        if not self.class_names or any(not str(n).strip() for n in self.class_names):
            raise ConfigError("class_names должен содержать непустые имена", key="class_names")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class_names содержит повторы", key="class_names")
        bad_scales = [s for s in m.contrast_scales if not 1 <= s <= m.stages]
        if bad_scales:
            raise ConfigError(
                f"model.contrast_scales вне 1..{m.stages}: {bad_scales}", key="model.contrast_scales"
            )
        for key, triple in (
            ("training.patch_size", t.patch_size),
            ("inference.window", self.inference.window),
            ("inference.stride", self.inference.stride),
        ):
            if len(triple) != 3 or any(v <= 0 for v in triple):
                raise ConfigError(f"{key} должен быть тройкой положительных чисел", key=key)
        if any(s > w for s, w in zip(self.inference.stride, self.inference.window)):
            raise ConfigError(
                f"inference.stride {tuple(self.inference.stride)} больше окна {tuple(self.inference.window)}",
                key="inference.stride",
            )
        return self


SECTIONS = {"training": TrainingConfig, "model": ModelConfig, "inference": InferenceConfig}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _build(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"Секция '{prefix or '/'}' должна быть объектом", key=prefix or "/")

    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        path = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"Неизвестный ключ конфигурации: {path}", key=path)

    instance = cls()
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        current = getattr(instance, name)
        if is_dataclass(current):
            setattr(instance, name, _build(type(current), value, path))
        else:
            setattr(instance, name, _coerce_like(current, value, path))
    return instance


def _coerce_like(current: Any, value: Any, path: str) -> Any:
    """Приводит значение к типу текущего значения по умолчанию."""
    try:
        if isinstance(current, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.strip().lower() in ("true", "1", "yes"):
                return True
            if isinstance(value, str) and value.strip().lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = json.loads(value)
            return tuple(int(v) for v in value)
        if isinstance(current, list):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, list):
                raise ValueError(value)
            return [str(v) for v in value]
        if isinstance(current, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(
            f"Некорректное значение для {path}: {value!r} (ожидается {type(current).__name__})",
            key=path,
        ) from None
    return value


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: Any) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "файл конфигурации")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Конфигурация {path} не является JSON: {e}", key=str(path)) from e
    return config_from_dict(data)


def save_config(config: RunConfig, path: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(config.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def resolve_key(key: str) -> Tuple[str, ...]:
    """Находит путь ключа `--set`: сначала верхний уровень, затем секции."""
    parts = tuple(p for p in key.strip().split(".") if p)
    if not parts:
        raise ConfigError("Пустой ключ в --set", key=key)

    top = {f.name for f in fields(RunConfig)}
    if len(parts) == 2 and parts[0] in SECTIONS:
        if parts[1] not in {f.name for f in fields(SECTIONS[parts[0]])}:
            raise ConfigError(f"Неизвестный ключ конфигурации: {key}", key=key)
        return parts
    if len(parts) != 1:
        raise ConfigError(f"Неизвестный ключ конфигурации: {key}", key=key)

    name = parts[0]
    if name in top and name not in SECTIONS:
        return (name,)
    matches = [
        section for section, cls in SECTIONS.items() if name in {f.name for f in fields(cls)}
    ]
    if len(matches) > 1:
        raise ConfigError(f"Неоднозначный ключ {key}: {matches}", key=key)
    if not matches:
        raise ConfigError(f"Неизвестный ключ конфигурации: {key}", key=key)
    return (matches[0], name)


def apply_overrides(config: RunConfig, overrides: Dict[str, str]) -> RunConfig:
    data = config.to_dict()
    for key, raw in overrides.items():
        path = resolve_key(key)
        target = data
        for part in path[:-1]:
            target = target[part]
        target[path[-1]] = raw
    return config_from_dict(data)
