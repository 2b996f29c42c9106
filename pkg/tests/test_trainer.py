import copy
import math

import pytest
import torch

from config import RunConfig
from errors import DivergenceError, LabelError, MissingInput, ShapeError
from log_stats import read_training_log
from log_writer import TRAINING_LOG_KEYS
from phantom_data import PatchSampler, TrainingBatch
from trainer import (
    cross_entropy_from_probs,
    create_model_pair,
    ema_tensor,
    ema_update,
    fit,
    lambda_u,
    load_checkpoint,
    poly_lr,
    pseudo_labels,
    restore_model_pair,
    save_checkpoint,
    soft_dice_loss,
    supervised_loss,
    total_loss,
    train_epoch,
    train_step,
    unsupervised_loss,
)

from conftest import make_labeled_volume, make_tiny_config


def _probs(columns):
    """Векторы вероятностей по вокселям → (1, C, n, 1, 1)."""
    tensor = torch.tensor(columns, dtype=torch.float64).T
    return tensor.reshape(1, tensor.shape[0], tensor.shape[1], 1, 1)


def _target(values):
    return torch.tensor(values, dtype=torch.long).reshape(1, len(values), 1, 1)


def _sampler(config, seed=0):
    image, label = make_labeled_volume()
    return PatchSampler(
        [(image, label)],
        [make_labeled_volume(seed=seed + 1)[0]],
        config.training.patch_size,
        n_labeled=config.training.n_labeled,
        n_unlabeled=config.training.n_unlabeled,
        seed=config.training.seed,
    )


# 📉 Потери

def test_cross_entropy_of_uniform_prediction_is_ln2():
    probs = _probs([[0.5, 0.5]])
    assert cross_entropy_from_probs(probs, _target([0])).item() == pytest.approx(math.log(2))


def test_perfect_prediction_has_zero_loss():
    probs = _probs([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert supervised_loss(probs, _target([0, 1, 0])).item() == pytest.approx(0.0, abs=1e-12)


def test_four_voxel_oracle():
    columns = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]
    target = [0, 1, 1, 1]
    ce = -(math.log(0.9) + math.log(0.8) + math.log(0.4) + math.log(0.7)) / 4
    eps = 1e-5
    dice_0 = (2 * 0.9 + eps) / ((0.9 + 0.2 + 0.6 + 0.3) + 1 + eps)
    dice_1 = (2 * (0.8 + 0.4 + 0.7) + eps) / ((0.1 + 0.8 + 0.4 + 0.7) + 3 + eps)
    dice = 1 - (dice_0 + dice_1) / 2
    probs = _probs(columns)
    assert soft_dice_loss(probs, _target(target)).item() == pytest.approx(dice, rel=1e-12)
    assert supervised_loss(probs, _target(target)).item() == pytest.approx(ce + dice, rel=1e-12)


def test_label_validation():
    probs = _probs([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(LabelError):
        supervised_loss(probs, _target([0, 1]).double())
    with pytest.raises(LabelError):
        supervised_loss(probs, _target([0, 2]))
    with pytest.raises(LabelError):
        supervised_loss(probs, _target([-1, 0]))
    with pytest.raises(ShapeError):
        supervised_loss(probs, _target([0, 1, 1]))


def test_unsupervised_loss_uses_teacher_argmax():
    teacher = _probs([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]])
    pseudo = pseudo_labels(teacher)
    assert pseudo.flatten().tolist() == [0, 0, 1]
    student = _probs([[0.6, 0.4], [0.3, 0.7], [0.1, 0.9]])
    expected = supervised_loss(student, _target([0, 0, 1]))
    assert unsupervised_loss(student, pseudo).item() == pytest.approx(expected.item(), rel=1e-12)


# 📈 Расписания

def test_contrast_switches_on_at_start_epoch():
    config = RunConfig()
    before = total_loss(1.0, 0.0, 2.0, 19, config)
    after = total_loss(1.0, 0.0, 2.0, 20, config)
    assert after - before == pytest.approx(0.2)
    config.contrast = False
    assert total_loss(1.0, 0.0, 2.0, 25, config) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        total_loss(1.0, 0.0, 2.0, -1, config)


def test_skipped_alignment_adds_nothing():
    assert total_loss(1.0, 0.0, None, 30, RunConfig()) == pytest.approx(1.0)


def test_lambda_u_ramp():
    training = RunConfig().training
    values = [lambda_u(epoch, training) for epoch in range(0, 61)]
    assert values[0] == 0.0
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[40] == pytest.approx(training.lambda_u_max)
    assert values[60] == pytest.approx(training.lambda_u_max)
    assert values[20] == pytest.approx(math.exp(-5 * 0.25))


def test_poly_lr():
    assert poly_lr(0.01, 0, 100) == pytest.approx(0.01)
    assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5 ** 0.9)
    assert poly_lr(0.01, 100, 100) == 0.0


# 👩‍🏫 EMA

def test_ema_limits_and_range():
    student = torch.nn.Linear(3, 2)
    teacher = copy.deepcopy(student)
    with torch.no_grad():
        for p in student.parameters():
            p.add_(1.0)
    before = copy.deepcopy(teacher.state_dict())
    ema_update(student, teacher, 1.0)
    for name, value in teacher.state_dict().items():
        assert torch.equal(value, before[name])
    ema_update(student, teacher, 0.0)
    for name, value in teacher.state_dict().items():
        assert torch.equal(value, student.state_dict()[name])
    with pytest.raises(ValueError):
        ema_update(student, teacher, 1.1)
    with pytest.raises(ShapeError):
        ema_update(torch.nn.Linear(3, 2), torch.nn.Linear(4, 2), 0.5)


def test_ema_converges_geometrically():
    alpha = 0.9
    student, teacher = torch.tensor([2.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)
    for n in range(1, 31):
        teacher = ema_tensor(teacher, student, alpha)
        assert (student - teacher).item() == pytest.approx(2.0 * alpha ** n, rel=1e-9)


def test_ema_stays_between_teacher_and_student():
    torch.manual_seed(0)
    a, b = torch.randn(50), torch.randn(50)
    mixed = ema_tensor(a, b, 0.3)
    assert bool((mixed >= torch.minimum(a, b) - 1e-6).all())
    assert bool((mixed <= torch.maximum(a, b) + 1e-6).all())


# 🔁 Шаг обучения

def test_step_without_unlabeled_terms_equals_supervised_step(tiny_priors):
    config = make_tiny_config(contrast=False)
    config.training.lambda_u_max = 0.0
    pair = create_model_pair(config, tiny_priors)
    reference = copy.deepcopy(pair.student)
    optimizer = torch.optim.SGD(
        reference.parameters(),
        lr=config.training.lr,
        momentum=config.training.momentum,
        weight_decay=config.training.weight_decay,
    )
    batch = _sampler(config).next_batch()

    train_step(pair, batch, config, epoch=5, total_steps=10)

    probs = torch.softmax(reference(batch.x_l).logits, dim=1)
    supervised_loss(probs, batch.y_l).backward()
    optimizer.step()
    for (name, actual), expected in zip(pair.student.named_parameters(), reference.parameters()):
        torch.testing.assert_close(actual, expected, atol=1e-6, rtol=1e-5, msg=name)
    assert pair.step == 1


def test_teacher_follows_student_after_step(tiny_config, tiny_priors):
    pair = create_model_pair(tiny_config, tiny_priors)
    before = copy.deepcopy(pair.teacher.state_dict())
    train_step(pair, _sampler(tiny_config).next_batch(), tiny_config, epoch=1, total_steps=6)
    alpha = tiny_config.training.ema_alpha
    student = dict(pair.student.named_parameters())
    for name, value in pair.teacher.named_parameters():
        expected = alpha * before[name] + (1 - alpha) * student[name].detach()
        torch.testing.assert_close(value, expected, atol=1e-6, rtol=1e-5)


def test_divergence_saves_checkpoint(tmp_path, tiny_priors):
    config = make_tiny_config(contrast=False)
    pair = create_model_pair(config, tiny_priors)
    batch = _sampler(config).next_batch()
    broken = TrainingBatch(x_l=torch.full_like(batch.x_l, float("nan")), y_l=batch.y_l, x_u=batch.x_u)
    with pytest.raises(DivergenceError) as info:
        train_step(pair, broken, config, epoch=0, total_steps=6, checkpoint_path=tmp_path / "diverged.pt")
    assert info.value.exit_code == 4
    assert (tmp_path / "diverged.pt").exists()
    assert pair.step == 0


def test_train_epoch_logs_every_step(tiny_config, tiny_priors):
    pair = create_model_pair(tiny_config, tiny_priors)
    records = []

    class ListLog:
        def write(self, record):
            records.append(record)

    summary = train_epoch(_sampler(tiny_config), pair, tiny_config, epoch=0, log=ListLog())
    steps = tiny_config.training.iterations_per_epoch
    assert summary["steps"] == steps
    assert pair.step == steps
    assert [r["step"] for r in records] == list(range(1, steps + 1))
    assert summary["L_s"] == pytest.approx(sum(r["L_s"] for r in records) / steps)
    assert summary["lambda_u"] == 0.0


# 🏃 Полный запуск

def test_fit_is_reproducible(tmp_path, tiny_config, tiny_priors):
    runs = []
    for name in ("a", "b"):
        fit(tiny_config, _sampler(tiny_config), tiny_priors, tmp_path / name)
        runs.append((tmp_path / name / "train_log.ndjson").read_bytes())
    assert runs[0] == runs[1]

    records = read_training_log(tmp_path / "a" / "train_log.ndjson")
    training = tiny_config.training
    assert len(records) == training.epochs * training.iterations_per_epoch
    assert list(records[0]) == list(TRAINING_LOG_KEYS)
    assert [r["step"] for r in records] == list(range(1, len(records) + 1))
    assert records[0]["lambda_u"] == 0.0
    for name in ("checkpoint_epoch001.pt", "checkpoint_epoch002.pt", "checkpoint_last.pt", "manifest.json", "config.json"):
        assert (tmp_path / "a" / name).exists()


def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_priors):
    pair = create_model_pair(tiny_config, tiny_priors)
    train_step(pair, _sampler(tiny_config).next_batch(), tiny_config, epoch=0, total_steps=6)
    path = save_checkpoint(pair, tmp_path / "ckpt.pt", epoch=0, config=tiny_config)

    restored, config, epoch = restore_model_pair(path)
    assert epoch == 0
    assert restored.step == 1
    assert config == tiny_config
    for key, value in pair.student.state_dict().items():
        assert torch.equal(value, restored.student.state_dict()[key])
    for key, value in pair.teacher.state_dict().items():
        assert torch.equal(value, restored.teacher.state_dict()[key])
    assert load_checkpoint(path)["config_hash"] == tiny_config.config_hash()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingInput):
        load_checkpoint(tmp_path / "absent.pt")
