from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple
import json
import logging
import random
import zlib

from config import env_settings
from errors import (
    DuplicateClass,
    GenerationFailed,
    MissingInput,
    SchemaError,
    UnknownClass,
    ValidationRejected,
)
from input_utils import split_sentences

"""
Текстовые анатомические знания (TAK) по классам органов.

Знания генерируются один раз, офлайн, до обучения: первый агент пишет
описания положения и формы, второй агент проверяет каждое предложение
вопросом "yes/no" и отбрасывает несогласованные. Тренер читает только
сохранённый JSON-файл.
"""

POSITION_TEMPLATE = "Describe the relative positional relationship of [CLS] with other organs."
SHAPE_TEMPLATE = "Describe the shape and structure of [CLS]"
NAME_TEMPLATE = "A computerized tomography scan of the human abdomen includes the [CLS]"
CLASS_LIST_TEMPLATE = "The categories to be segmented are: {names}."
VALIDATION_TEMPLATE = (
    "Is the following statement about the [CLS] anatomically consistent? "
    "Answer yes or no.\nStatement: [SENTENCE]"
)

AMOS_CLASSES = [
    "spleen", "right kidney", "left kidney", "gallbladder", "esophagus",
    "liver", "stomach", "aorta", "inferior vena cava", "pancreas",
    "right adrenal gland", "left adrenal gland", "duodenum", "bladder",
    "prostate/uterus",
]

SYNAPSE_CLASSES = [
    "spleen", "right kidney", "left kidney", "gallbladder", "esophagus",
    "liver", "stomach", "aorta", "inferior vena cava",
    "portal vein and splenic vein", "pancreas", "right adrenal gland",
    "left adrenal gland",
]


class PromptKind(str, Enum):
    POSITION = "position"
    SHAPE = "shape"


class KnowledgeSource(str, Enum):
    GENERATED = "generated"
    CURATED = "curated"
    MOCK = "mock"


@dataclass(frozen=True)
class KnowledgeRecord:
    class_id: int
    class_name: str
    position_text: str
    shape_text: str
    source: str = KnowledgeSource.GENERATED.value
    validated: bool = False


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str:
        ...


def _fill(template: str, class_name: str) -> str:
    return template.replace("[CLS]", class_name)


def build_prompt(class_name: str, kind: str, all_class_names: Sequence[str]) -> str:
    if class_name not in all_class_names:
        raise UnknownClass(class_name)

    kind = PromptKind(kind)
    if kind is PromptKind.POSITION:
        context = CLASS_LIST_TEMPLATE.format(names=", ".join(all_class_names))
        return f"{context}\n{_fill(POSITION_TEMPLATE, class_name)}"
    return _fill(SHAPE_TEMPLATE, class_name)


def build_validation_prompt(class_name: str, sentence: str) -> str:
    return _fill(VALIDATION_TEMPLATE, class_name).replace("[SENTENCE]", sentence)


def is_consistent(answer: str) -> bool:
    """Согласованным считается только ответ, начинающийся с "yes"."""
    return answer.strip().lower().startswith("yes")


# 🤖 Клиенты чата
class MockChatClient:
    """
    Детерминированная замена MLLM.

    На запросы генерации отвечает абзацем из фраз-заготовок, выбор фраз
    зависит только от (seed, текст запроса). На запросы валидации отвечает
    "yes", кроме предложений из `rejected` (сравнение по подстроке).
    """

    source = KnowledgeSource.MOCK.value

    POSITION_PHRASES = [
        "The {cls} lies close to neighbouring abdominal organs.",
        "The {cls} is separated from adjacent structures by thin fat planes.",
        "The {cls} keeps a stable position relative to the vertebral column.",
        "The {cls} is bordered by vessels that run along its medial side.",
        "The {cls} sits within the retroperitoneal or peritoneal compartment typical for it.",
        "The {cls} moves slightly with respiration but keeps its neighbours.",
    ]
    SHAPE_PHRASES = [
        "The {cls} has a smooth, well-defined outer contour.",
        "The {cls} shows a characteristic elongated profile.",
        "The {cls} appears as a compact structure with homogeneous density.",
        "The {cls} can vary in size between individuals.",
        "The {cls} has a curved surface that follows adjacent organs.",
        "The {cls} is usually symmetric along its long axis.",
    ]

    def __init__(self, seed: int = 0, rejected: Optional[Sequence[str]] = None) -> None:
        self.seed = seed
        self.rejected = list(rejected or [])

    def complete(self, prompt: str) -> str:
        if "Answer yes or no." in prompt:
            sentence = prompt.split("Statement:", 1)[-1].strip()
            return "no" if any(r in sentence for r in self.rejected) else "yes"

        rng = random.Random(zlib.crc32(f"{self.seed}:{prompt}".encode("utf-8")))
        question = prompt.strip().splitlines()[-1]
        if question.startswith(SHAPE_TEMPLATE.split("[CLS]")[0]):
            class_name = question[len(SHAPE_TEMPLATE.split("[CLS]")[0]):].strip()
            bank = self.SHAPE_PHRASES
        else:
            head, tail = POSITION_TEMPLATE.split("[CLS]")
            class_name = question[len(head):len(question) - len(tail)].strip()
            bank = self.POSITION_PHRASES
        sentences = rng.sample(bank, 3)
        return " ".join(s.format(cls=class_name) for s in sentences)


class OpenAIChatClient:
    source = KnowledgeSource.GENERATED.value

    def __init__(self, endpoint: str, api_key: str = "", model: str = "gpt-4o", temperature: float = 0.0) -> None:
        from openai import OpenAI

        self.client = OpenAI(base_url=endpoint, api_key=api_key or "not-needed")
        self.model = model
        self.temperature = temperature

    def complete(self, prompt: str) -> str:
        completion = self.client.chat.completions.create(
            model=self.model,
            messages=[{"role": "user", "content": prompt}],
            temperature=self.temperature,
        )
        return completion.choices[0].message.content or ""


def make_chat_client(seed: int = 0) -> ChatClient:
    """TAK_MLLM_ENDPOINT задан → реальный клиент, иначе детерминированный мок."""
    settings = env_settings()
    if settings["mllm_endpoint"]:
        logging.info(f"MLLM-клиент: {settings['mllm_endpoint']} ({settings['mllm_model']})")
        return OpenAIChatClient(
            settings["mllm_endpoint"], settings["mllm_api_key"], settings["mllm_model"]
        )
    logging.info("TAK_MLLM_ENDPOINT не задан, используется MockChatClient")
    return MockChatClient(seed=seed)


# 🧪 Генерация и валидация
def filter_claims(class_name: str, text: str, validator: ChatClient) -> str:
    kept = []
    for sentence in split_sentences(text):
        answer = validator.complete(build_validation_prompt(class_name, sentence))
        if is_consistent(answer):
            kept.append(sentence)
        else:
            logging.info(f"Отброшено утверждение для '{class_name}': {sentence}")
    return " ".join(kept)


def _validated_record(record: KnowledgeRecord, validator: ChatClient) -> KnowledgeRecord:
    position = filter_claims(record.class_name, record.position_text, validator)
    if not position:
        raise ValidationRejected(record.class_name, PromptKind.POSITION.value)
    shape = filter_claims(record.class_name, record.shape_text, validator)
    if not shape:
        raise ValidationRejected(record.class_name, PromptKind.SHAPE.value)
    return replace(record, position_text=position, shape_text=shape, validated=True)


def _generate_one(
    class_id: int,
    class_name: str,
    class_names: Sequence[str],
    generator: ChatClient,
    validator: ChatClient,
) -> KnowledgeRecord:
    try:
        position = generator.complete(build_prompt(class_name, PromptKind.POSITION, class_names))
        shape = generator.complete(build_prompt(class_name, PromptKind.SHAPE, class_names))
    except Exception as e:
        raise GenerationFailed(class_name, str(e)) from e

    draft = KnowledgeRecord(
        class_id=class_id,
        class_name=class_name,
        position_text=position.strip(),
        shape_text=shape.strip(),
        source=getattr(generator, "source", KnowledgeSource.GENERATED.value),
        validated=False,
    )
    try:
        return _validated_record(draft, validator)
    except ValidationRejected:
        raise
    except Exception as e:
        raise GenerationFailed(class_name, f"валидатор: {e}") from e


def generate_knowledge(
    class_names: Sequence[str],
    generator: ChatClient,
    validator: ChatClient,
    max_workers: int = 1,
) -> List[KnowledgeRecord]:
    """
    Генерирует по одной записи на класс (class_id = позиция в списке + 1).

    Запросы по классам можно выполнять параллельно (`max_workers` > 1);
    результат всегда упорядочен по class_id, а при нескольких сбоях
    поднимается ошибка класса с наименьшим class_id.
    """
    if not class_names:
        raise ValueError("Список классов пуст")

    jobs = list(enumerate(class_names, start=1))
    if max_workers <= 1:
        return [_generate_one(cid, name, class_names, generator, validator) for cid, name in jobs]

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [
            pool.submit(_generate_one, cid, name, class_names, generator, validator)
            for cid, name in jobs
        ]
        return [future.result() for future in futures]


def validate_knowledge(records: Sequence[KnowledgeRecord], validator: ChatClient) -> List[KnowledgeRecord]:
    return [_validated_record(record, validator) for record in sorted(records, key=lambda r: r.class_id)]


def prior_texts(record: KnowledgeRecord, prompt_kind: str) -> Tuple[str, str]:
    """Тексты для двух слотов энкодера (положение, форма) по виду промпта абляции."""
    if prompt_kind == "name":
        name = _fill(NAME_TEMPLATE, record.class_name)
        return name, name
    if prompt_kind == "position":
        return record.position_text, record.position_text
    if prompt_kind == "shape":
        return record.shape_text, record.shape_text
    if prompt_kind == "position+shape":
        return record.position_text, record.shape_text
    raise ValueError(f"Неизвестный вид промпта: {prompt_kind}")


# 💾 Хранение
RECORD_FIELDS = {
    "class_id": int,
    "class_name": str,
    "position_text": str,
    "shape_text": str,
    "source": str,
    "validated": bool,
}


def _check_unique(records: Sequence[KnowledgeRecord]) -> None:
    seen = set()
    for record in records:
        if record.class_id in seen:
            raise DuplicateClass(record.class_id)
        seen.add(record.class_id)


def save_knowledge(records: Sequence[KnowledgeRecord], path: Any) -> None:
    _check_unique(records)
    ordered = sorted(records, key=lambda r: r.class_id)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"classes": [asdict(r) for r in ordered]}
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    logging.info(f"Знания сохранены: {path} ({len(ordered)} классов)")


def _parse_record(raw: Any, pointer: str) -> KnowledgeRecord:
    if not isinstance(raw, dict):
        raise SchemaError(pointer, "запись должна быть объектом")

    for name, expected in RECORD_FIELDS.items():
        if name not in raw:
            raise SchemaError(f"{pointer}/{name}", "отсутствует поле")
        value = raw[name]
        wrong_type = not isinstance(value, expected) or (expected is int and isinstance(value, bool))
        if wrong_type:
            raise SchemaError(f"{pointer}/{name}", f"ожидается {expected.__name__}")

    extra = sorted(set(raw) - set(RECORD_FIELDS))
    if extra:
        raise SchemaError(f"{pointer}/{extra[0]}", "неизвестное поле")
    if raw["class_id"] < 1:
        raise SchemaError(f"{pointer}/class_id", "class_id должен быть ≥ 1")
    if not raw["class_name"].strip():
        raise SchemaError(f"{pointer}/class_name", "пустое имя класса")
    if raw["source"] not in {s.value for s in KnowledgeSource}:
        raise SchemaError(f"{pointer}/source", "неизвестный источник")
    if raw["validated"]:
        for name in ("position_text", "shape_text"):
            if not raw[name].strip():
                raise SchemaError(f"{pointer}/{name}", "пустой текст в проверенной записи")
    return KnowledgeRecord(**raw)


def load_knowledge(path: Any) -> List[KnowledgeRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "файл знаний")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError("", f"файл не является JSON ({e})") from e

    if not isinstance(data, dict) or not isinstance(data.get("classes"), list):
        raise SchemaError("/classes", "ожидается массив записей")

    records = [_parse_record(raw, f"/classes/{i}") for i, raw in enumerate(data["classes"])]
    _check_unique(records)

    ids = sorted(r.class_id for r in records)
    if ids != list(range(1, len(ids) + 1)):
        raise SchemaError("/classes", "class_id должны покрывать 1..K без пропусков")
    return sorted(records, key=lambda r: r.class_id)


def knowledge_table_rows(records: Sequence[KnowledgeRecord]) -> List[Dict[str, Any]]:
    return [
        {
            "class_id": r.class_id,
            "class_name": r.class_name,
            "source": r.source,
            "validated": r.validated,
            "position_sentences": len(split_sentences(r.position_text)),
            "shape_sentences": len(split_sentences(r.shape_text)),
        }
        for r in records
    ]
