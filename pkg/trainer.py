from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union
import copy
import json
import logging
import math
import queue
import random
import subprocess
import threading

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from alignment import contrastive_loss, sample_class_features, select_confident
from config import RunConfig, TrainingConfig, config_from_dict, save_config
from errors import AlignmentSkipped, DivergenceError, FormatError, LabelError, MissingInput, ShapeError
from log_writer import TrainingLogWriter
from phantom_data import Corpus, PatchSampler, TrainingBatch
from tak_model import TAKNet
from text_prior import PriorEmbeddingSet

"""
Полуконтролируемое обучение «учитель-ученик».

На каждом шаге:
    1. ученик видит размеченные и неразмеченные патчи;
    2. учитель (EMA ученика) видит неразмеченные патчи без градиента;
    3. L = L_s + λ_u(эпоха)·L_u + λ_c·L_con;
    4. шаг SGD, затем обновление учителя.
"""

DICE_EPS = 1e-5
PROB_FLOOR = 1e-12

Number = Union[float, torch.Tensor]


# 📉 Потери
def _check_labels(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if target.dtype.is_floating_point or target.dtype == torch.bool:
        raise LabelError(f"Метки должны быть целыми, получен тип {target.dtype}")
    if tuple(target.shape) != (probs.shape[0], *probs.shape[2:]):
        raise ShapeError(f"Форма меток {tuple(target.shape)} не совпадает с прогнозом {tuple(probs.shape)}")
    num_classes = probs.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise LabelError(f"Метки вне диапазона 0..{num_classes - 1}")
    return target.long()


def cross_entropy_from_probs(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    picked = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 − среднее по классам (2·Σpg + ε) / (Σp + Σg + ε); суммы по батчу и вокселям."""
    one_hot = F.one_hot(target, probs.shape[1]).movedim(-1, 1).to(probs.dtype)
    dims = (0, *range(2, probs.dim()))
    intersection = (probs * one_hot).sum(dims)
    denominator = probs.sum(dims) + one_hot.sum(dims)
    return 1.0 - ((2.0 * intersection + eps) / (denominator + eps)).mean()


def supervised_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """CE + soft Dice. probs: (B, K+1, ...), target: (B, ...) целые 0..K."""
    target = _check_labels(probs, target)
    return cross_entropy_from_probs(probs, target) + soft_dice_loss(probs, target)


def pseudo_labels(teacher_probs: torch.Tensor) -> torch.Tensor:
    # при равенстве argmax берёт первый максимум, то есть меньший индекс класса
    return teacher_probs.argmax(dim=1)


def unsupervised_loss(probs: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    return supervised_loss(probs, pseudo)


# 📈 Расписания
def lambda_u(epoch: float, training: TrainingConfig) -> float:
    """Гауссов разгон: λ_max·exp(−5(1 − min(t, T)/T)²), λ_u(0) = 0."""
    if epoch <= 0:
        return 0.0
    progress = min(float(epoch), training.lambda_u_rampup) / training.lambda_u_rampup
    return training.lambda_u_max * math.exp(-5.0 * (1.0 - progress) ** 2)


def contrast_weight(epoch: int, config: RunConfig) -> float:
    if not config.contrast or epoch < config.training.contrast_start_epoch:
        return 0.0
    return config.training.lambda_c


def total_loss(l_s: Number, l_u: Number, l_con: Optional[Number], epoch: int, config: RunConfig) -> Number:
    if epoch < 0:
        raise ValueError("Номер эпохи не может быть отрицательным")
    loss = l_s + lambda_u(epoch, config.training) * l_u
    weight = contrast_weight(epoch, config)
    if weight > 0 and l_con is not None:
        loss = loss + weight * l_con
    return loss


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    progress = min(max(step, 0), total_steps) / max(total_steps, 1)
    return base_lr * (1.0 - progress) ** power


# 👩‍🏫 Учитель
def ema_tensor(teacher_value: torch.Tensor, student_value: torch.Tensor, alpha: float) -> torch.Tensor:
    if teacher_value.shape != student_value.shape:
        raise ShapeError(f"Формы учителя {tuple(teacher_value.shape)} и ученика {tuple(student_value.shape)} различаются")
    return alpha * teacher_value + (1.0 - alpha) * student_value


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, alpha: float) -> nn.Module:
    """θ' ← α·θ' + (1 − α)·θ поэлементно; буферы копируются."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"α вне [0, 1]: {alpha}")
    student_params = dict(student.named_parameters())
    teacher_params = dict(teacher.named_parameters())
    if student_params.keys() != teacher_params.keys():
        raise ShapeError("Наборы параметров учителя и ученика различаются")

    for name, value in teacher_params.items():
        source = student_params[name]
        if value.shape != source.shape:
            raise ShapeError(f"Параметр {name}: {tuple(value.shape)} против {tuple(source.shape)}")
        value.mul_(alpha).add_(source.detach(), alpha=1.0 - alpha)

    student_buffers = dict(student.named_buffers())
    for name, buffer in teacher.named_buffers():
        if name in student_buffers:
            buffer.copy_(student_buffers[name])
    return teacher


@dataclass
class ModelPair:
    student: TAKNet
    teacher: TAKNet
    optimizer: torch.optim.Optimizer
    step: int = 0


def set_deterministic(seed: int, single_thread: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def create_model_pair(config: RunConfig, priors: PriorEmbeddingSet) -> ModelPair:
    torch.manual_seed(config.training.seed)
    student = TAKNet(config.model, priors)
    teacher = copy.deepcopy(student)
    for parameter in teacher.parameters():
        parameter.requires_grad_(False)
    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=config.training.lr,
        momentum=config.training.momentum,
        weight_decay=config.training.weight_decay,
    )
    return ModelPair(student=student, teacher=teacher, optimizer=optimizer)


# 🔁 Шаг обучения
@dataclass
class LossTerms:
    l_s: torch.Tensor
    l_u: torch.Tensor
    l_con: Optional[torch.Tensor]
    lambda_u: float
    lambda_c: float
    total: torch.Tensor


def compute_losses(pair: ModelPair, batch: TrainingBatch, config: RunConfig, epoch: int, seed: int) -> LossTerms:
    n_labeled, n_unlabeled = batch.x_l.shape[0], batch.x_u.shape[0]
    inputs = torch.cat([batch.x_l, batch.x_u], dim=0) if n_unlabeled else batch.x_l
    output = pair.student(inputs)
    probs = torch.softmax(output.logits, dim=1)

    l_s = supervised_loss(probs[:n_labeled], batch.y_l)
    l_u = probs.new_zeros(())
    confident = pseudo = None
    if n_unlabeled:
        with torch.no_grad():
            teacher_probs = torch.softmax(pair.teacher(batch.x_u).logits, dim=1)
        pseudo = pseudo_labels(teacher_probs)
        confident = select_confident(teacher_probs, config.q)
        l_u = unsupervised_loss(probs[n_labeled:], pseudo)

    weight_c = contrast_weight(epoch, config)
    l_con = None
    if weight_c > 0 and pair.student.contrast_scales:
        labels, mask = batch.y_l.long(), torch.ones_like(batch.y_l, dtype=torch.bool)
        if pseudo is not None:
            labels = torch.cat([labels, pseudo], dim=0)
            mask = torch.cat([mask, confident], dim=0)
        bank = sample_class_features(
            output.features.stages,
            labels,
            mask,
            lambda_n=config.training.lambda_n,
            seed=seed,
            num_classes=pair.student.num_classes,
            scales=pair.student.contrast_scales,
        )
        proj_p, proj_s = pair.student.project_priors()
        try:
            l_con = contrastive_loss(bank, proj_p, proj_s, tau=config.tau, infonce_compat=config.infonce_compat)
        except AlignmentSkipped as e:
            logging.debug(f"Контрастный член пропущен: {e}")

    total = total_loss(l_s, l_u, l_con, epoch, config)
    return LossTerms(
        l_s=l_s,
        l_u=l_u,
        l_con=l_con,
        lambda_u=lambda_u(epoch, config.training),
        lambda_c=weight_c,
        total=total,
    )


def train_step(
    pair: ModelPair,
    batch: TrainingBatch,
    config: RunConfig,
    epoch: int,
    total_steps: int,
    checkpoint_path: Optional[Path] = None,
) -> Tuple[LossTerms, float]:
    training = config.training
    lr = poly_lr(training.lr, pair.step, total_steps, training.poly_power)
    for group in pair.optimizer.param_groups:
        group["lr"] = lr

    pair.student.train()
    pair.optimizer.zero_grad(set_to_none=True)
    terms = compute_losses(pair, batch, config, epoch, seed=training.seed + pair.step)
    if not torch.isfinite(terms.total):
        saved = None
        if checkpoint_path is not None:
            saved = str(save_checkpoint(pair, checkpoint_path, epoch, config))
        raise DivergenceError(
            f"Нечисловая потеря на шаге {pair.step} (эпоха {epoch})",
            checkpoint=saved,
            step=pair.step,
            epoch=epoch,
        )

    terms.total.backward()
    pair.optimizer.step()
    # учитель обновляется строго после шага оптимизатора
    ema_update(pair.student, pair.teacher, training.ema_alpha)
    pair.step += 1
    return terms, lr


def prefetch_batches(sampler: PatchSampler, count: int, depth: int = 2) -> Iterator[TrainingBatch]:
    """Нарезка патчей в фоновом потоке; порядок батчей тот же, что без предвыборки."""
    buffer: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce() -> None:
        try:
            for _ in range(count):
                if stop.is_set():
                    return
                buffer.put(sampler.next_batch())
        except Exception as e:
            buffer.put(e)
            return
        buffer.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.05)


def train_epoch(
    sampler: PatchSampler,
    pair: ModelPair,
    config: RunConfig,
    epoch: int,
    log: Optional[TrainingLogWriter] = None,
    checkpoint_path: Optional[Path] = None,
) -> Dict[str, float]:
    training = config.training
    total_steps = training.epochs * training.iterations_per_epoch
    records: List[Dict[str, float]] = []

    for batch in prefetch_batches(sampler, training.iterations_per_epoch):
        terms, lr = train_step(pair, batch, config, epoch, total_steps, checkpoint_path)
        record = {
            "epoch": epoch,
            "step": pair.step,
            "L_s": float(terms.l_s.item()),
            "L_u": float(terms.l_u.item()),
            "L_con": float(terms.l_con.item()) if terms.l_con is not None else 0.0,
            "lambda_u": terms.lambda_u,
            "lr": lr,
        }
        records.append(record)
        if log is not None:
            log.write(record)

    summary = {
        key: float(np.mean([r[key] for r in records])) for key in ("L_s", "L_u", "L_con", "lambda_u", "lr")
    }
    summary.update(epoch=epoch, steps=len(records))
    return summary


# 💾 Чекпоинты
def save_checkpoint(pair: ModelPair, path: Any, epoch: int, config: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "student": pair.student.state_dict(),
            "teacher": pair.teacher.state_dict(),
            "optimizer": pair.optimizer.state_dict(),
            "epoch": epoch,
            "step": pair.step,
            "seed": config.training.seed,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "class_names": list(config.class_names),
        },
        path,
    )
    logging.info(f"Чекпоинт сохранён: {path} (эпоха {epoch}, шаг {pair.step})")
    return path


def load_checkpoint(path: Any) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path, "чекпоинт")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise FormatError(f"{path}: не удалось прочитать чекпоинт ({e})", path=str(path)) from e
    missing = [k for k in ("student", "teacher", "optimizer", "epoch", "config") if k not in state]
    if missing:
        raise FormatError(f"{path}: в чекпоинте нет ключей {missing}", path=str(path))
    return state


def restore_model_pair(path: Any) -> Tuple[ModelPair, RunConfig, int]:
    """Пара моделей из чекпоинта; эмбеддинги знаний берутся из его буферов."""
    state = load_checkpoint(path)
    config = config_from_dict(state["config"])
    priors = PriorEmbeddingSet(
        class_names=list(state.get("class_names", config.class_names)),
        text_p=state["student"]["text_p"].numpy(),
        text_s=state["student"]["text_s"].numpy(),
    )
    pair = create_model_pair(config, priors)
    pair.student.load_state_dict(state["student"])
    pair.teacher.load_state_dict(state["teacher"])
    pair.optimizer.load_state_dict(state["optimizer"])
    pair.step = int(state.get("step", 0))
    return pair, config, int(state["epoch"])


# 🏃 Полный запуск
def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        return result.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(run_dir: Path, config: RunConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.training.seed,
        "git": git_describe(),
        "torch": torch.__version__,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def make_sampler(corpus: Corpus, config: RunConfig) -> PatchSampler:
    labeled = [corpus.load_case(cid)[:2] for cid in corpus.split.labeled]
    unlabeled = [corpus.load_case(cid)[0] for cid in corpus.split.unlabeled]
    training = config.training
    return PatchSampler(
        labeled,
        unlabeled,
        training.patch_size,
        n_labeled=training.n_labeled,
        n_unlabeled=training.n_unlabeled,
        seed=training.seed,
    )


def fit(
    config: RunConfig,
    sampler: PatchSampler,
    priors: PriorEmbeddingSet,
    run_dir: Any,
    on_epoch: Optional[Any] = None,
) -> Tuple[ModelPair, List[Dict[str, float]]]:
    """Все эпохи: NDJSON-журнал, чекпоинт каждые N эпох и в конце."""
    run_dir = Path(run_dir)
    training = config.training
    set_deterministic(training.seed, training.single_thread)
    write_run_manifest(run_dir, config)

    pair = create_model_pair(config, priors)
    summaries: List[Dict[str, float]] = []
    logging.info(f"Обучение: {training.epochs} эпох × {training.iterations_per_epoch} шагов, хэш {config.config_hash()}")
    with TrainingLogWriter(run_dir / "train_log.ndjson") as log:
        for epoch in range(training.epochs):
            summary = train_epoch(
                sampler, pair, config, epoch, log=log, checkpoint_path=run_dir / "diverged.pt"
            )
            summaries.append(summary)
            if on_epoch is not None:
                on_epoch(summary)
            if (epoch + 1) % training.checkpoint_every == 0:
                save_checkpoint(pair, run_dir / f"checkpoint_epoch{epoch + 1:03d}.pt", epoch, config)

    save_checkpoint(pair, run_dir / "checkpoint_last.pt", training.epochs - 1, config)
    return pair, summaries
