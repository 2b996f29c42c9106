from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple
import hashlib
import logging
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import EncodingFailed, FormatError, MissingInput
from knowledge import KnowledgeRecord, prior_texts

"""
Текстовые априорные эмбеддинги T_p, T_s и их проекции на ширины масштабов.

Эмбеддинги считаются один раз при старте и кэшируются; энкодер заморожен.
Проекция (MLP на каждый масштаб) обучается вместе с сетью.
"""

CACHE_MAGIC = b"TAKE"
CACHE_VERSION = 1
CACHE_HEADER = struct.Struct("<4sIII")


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray:
        ...


class HashTextEncoder:
    """Детерминированный тестовый энкодер: единичный псевдослучайный вектор по дайджесту текста."""

    def __init__(self, dim: int = 512, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed

    def encode(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vector = rng.standard_normal(self.dim)
        return (vector / np.linalg.norm(vector)).astype(np.float32)


class OpenClipTextEncoder:
    """Адаптер к предобученному текстовому энкодеру (по умолчанию BiomedCLIP через open_clip)."""

    def __init__(
        self,
        model_name: str = "hf-hub:microsoft/BiomedCLIP-PubMedBERT_256-vit_base_patch16_224",
        context_length: int = 256,
        device: str = "cpu",
    ) -> None:
        import open_clip

        self.model, _ = open_clip.create_model_from_pretrained(model_name)
        self.model.eval().to(device)
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self.context_length = context_length
        self.device = device
        with torch.no_grad():
            sample = self.model.encode_text(self.tokenizer(["liver"], context_length=context_length).to(device))
        self.dim = int(sample.shape[-1])

    def encode(self, text: str) -> np.ndarray:
        tokens = self.tokenizer([text], context_length=self.context_length).to(self.device)
        with torch.no_grad():
            features = self.model.encode_text(tokens)
        return features[0].float().cpu().numpy()


def make_text_encoder(kind: str, dim: int = 512, seed: int = 0) -> TextEncoder:
    if kind == "hash":
        return HashTextEncoder(dim=dim, seed=seed)
    if kind == "biomedclip":
        return OpenClipTextEncoder()
    raise ValueError(f"Неизвестный текстовый энкодер: {kind}")


@dataclass
class PriorEmbeddingSet:
    """
    Эмбеддинги знаний по классам 1..K.

    text_p, text_s: массивы или тензоры (K, D_text).
    proj_p, proj_s: масштаб i → тензор (K, C_i) с L2-нормированными строками
    (пусто, пока не вызвана `project_to_scales`).
    """

    class_names: List[str]
    text_p: np.ndarray
    text_s: np.ndarray
    proj_p: Dict[int, torch.Tensor] = field(default_factory=dict)
    proj_s: Dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.text_p.shape[0])

    @property
    def text_dim(self) -> int:
        return int(self.text_p.shape[1])

    @property
    def scales(self) -> Tuple[int, ...]:
        return tuple(sorted(self.proj_p))


def encode_priors(
    knowledge: Sequence[KnowledgeRecord],
    encoder: TextEncoder,
    prompt_kind: str = "position+shape",
) -> PriorEmbeddingSet:
    if not knowledge:
        raise EncodingFailed(None, "пустой набор знаний")

    records = sorted(knowledge, key=lambda r: r.class_id)
    rows_p, rows_s = [], []
    for record in records:
        text_p, text_s = prior_texts(record, prompt_kind)
        try:
            vec_p = np.asarray(encoder.encode(text_p), dtype=np.float32)
            vec_s = np.asarray(encoder.encode(text_s), dtype=np.float32)
        except Exception as e:
            raise EncodingFailed(record.class_name, str(e)) from e
        for vec in (vec_p, vec_s):
            if vec.shape != (encoder.dim,):
                raise EncodingFailed(record.class_name, f"размерность {vec.shape} вместо ({encoder.dim},)")
            if not np.all(np.isfinite(vec)):
                raise EncodingFailed(record.class_name, "нечисловые значения")
        rows_p.append(vec_p)
        rows_s.append(vec_s)

    logging.info(f"Закодировано {len(records)} классов (D_text={encoder.dim}, промпт '{prompt_kind}')")
    return PriorEmbeddingSet(
        class_names=[r.class_name for r in records],
        text_p=np.stack(rows_p),
        text_s=np.stack(rows_s),
    )


class PriorProjector(nn.Module):
    """MLP на каждый масштаб: Linear(D, D) → GELU → Linear(D, C_i), затем L2-нормировка."""

    def __init__(self, text_dim: int, scale_widths: Mapping[int, int]) -> None:
        super().__init__()
        if not scale_widths:
            raise ValueError("scale_widths не может быть пустым")
        self.text_dim = text_dim
        self.scale_widths = {int(k): int(v) for k, v in sorted(scale_widths.items())}
        self.mlps = nn.ModuleDict({
            str(scale): nn.Sequential(
                nn.Linear(text_dim, text_dim),
                nn.GELU(),
                nn.Linear(text_dim, width),
            )
            for scale, width in self.scale_widths.items()
        })

    def forward(self, text_p: torch.Tensor, text_s: torch.Tensor) -> Tuple[Dict[int, torch.Tensor], Dict[int, torch.Tensor]]:
        proj_p, proj_s = {}, {}
        for scale in self.scale_widths:
            mlp = self.mlps[str(scale)]
            proj_p[scale] = F.normalize(mlp(text_p), dim=-1)
            proj_s[scale] = F.normalize(mlp(text_s), dim=-1)
        return proj_p, proj_s


def project_to_scales(
    embeddings: PriorEmbeddingSet,
    scale_widths: Mapping[int, int],
    projector: Optional[PriorProjector] = None,
) -> PriorEmbeddingSet:
    if not scale_widths:
        raise ValueError("scale_widths не может быть пустым")
    if projector is None:
        projector = PriorProjector(embeddings.text_dim, scale_widths)
    if projector.scale_widths != {int(k): int(v) for k, v in scale_widths.items()}:
        raise ValueError("Масштабы проектора не совпадают с scale_widths")

    weight = next(projector.parameters())
    text_p = torch.as_tensor(embeddings.text_p, dtype=weight.dtype, device=weight.device)
    text_s = torch.as_tensor(embeddings.text_s, dtype=weight.dtype, device=weight.device)
    proj_p, proj_s = projector(text_p, text_s)
    return replace(embeddings, proj_p=proj_p, proj_s=proj_s)


# 💾 Кэш эмбеддингов
def save_embedding_cache(embeddings: PriorEmbeddingSet, path: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k, d = embeddings.text_p.shape
    values = np.stack([embeddings.text_p, embeddings.text_s], axis=1).astype("<f4")
    with path.open("wb") as handle:
        handle.write(CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, k, d))
        handle.write(values.tobytes(order="C"))
    logging.info(f"Кэш эмбеддингов сохранён: {path} (K={k}, D={d})")


def load_embedding_cache(path: Any, class_names: Optional[Sequence[str]] = None) -> PriorEmbeddingSet:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "кэш эмбеддингов")

    raw = path.read_bytes()
    if len(raw) < CACHE_HEADER.size:
        raise FormatError(f"{path}: файл короче заголовка", path=str(path))
    magic, version, k, d = CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: неверная сигнатура {magic!r}", path=str(path))
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: неподдерживаемая версия {version}", path=str(path))
    expected = CACHE_HEADER.size + k * 2 * d * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: ожидалось {expected} байт, получено {len(raw)}", path=str(path))
    if class_names is not None and len(class_names) != k:
        raise FormatError(f"{path}: в кэше {k} классов, ожидалось {len(class_names)}", path=str(path))

    values = np.frombuffer(raw, dtype="<f4", offset=CACHE_HEADER.size).reshape(k, 2, d)
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(1, k + 1)]
    return PriorEmbeddingSet(
        class_names=names,
        text_p=values[:, 0].astype(np.float32),
        text_s=values[:, 1].astype(np.float32),
    )
