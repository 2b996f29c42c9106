import math

import pytest
import torch
import torch.nn.functional as F

from alignment import (
    ClassFeatureBank,
    contrastive_loss,
    contrastive_loss_from_groups,
    downsample_nearest,
    entropy_map,
    nearest_rank_threshold,
    sample_class_features,
    select_confident,
)
from errors import AlignmentSkipped, NormalizationError


def _probs_grid(columns):
    """Список векторов вероятностей → сетка (C, n, 1, 1)."""
    tensor = torch.tensor(columns, dtype=torch.float64).T
    return tensor.reshape(tensor.shape[0], tensor.shape[1], 1, 1)


def brute_force_loss(groups, tau, infonce_compat=False):
    terms = []
    for scale in sorted(groups):
        members = [g for g in groups[scale] if g.shape[0] > 0]
        for k, group in enumerate(members):
            for i in range(group.shape[0]):
                anchor = group[i]
                positives = [group[j] for j in range(group.shape[0]) if j != i]
                negatives = [other[j] for m, other in enumerate(members) if m != k for j in range(other.shape[0])]
                if not positives or not negatives:
                    continue
                numerator = sum(math.exp(float(anchor @ p) / tau) for p in positives)
                pool = negatives + positives if infonce_compat else negatives
                denominator = sum(math.exp(float(anchor @ n) / tau) for n in pool)
                terms.append(-math.log(numerator / denominator))
    return sum(terms) / len(terms)


# 📌 Энтропия и отбор уверенных вокселей

def test_entropy_closed_forms():
    grid = _probs_grid([
        [1.0, 0.0, 0.0, 0.0],
        [0.25, 0.25, 0.25, 0.25],
        [0.5, 0.5, 0.0, 0.0],
    ])
    entropy = entropy_map(grid).reshape(-1)
    assert entropy[0].item() == 0.0
    assert entropy[1].item() == pytest.approx(math.log(4))
    assert entropy[2].item() == pytest.approx(math.log(2))


def test_entropy_accepts_batch_axis():
    grid = _probs_grid([[0.5, 0.5], [1.0, 0.0]]).unsqueeze(0)
    assert entropy_map(grid).shape == (1, 2, 1, 1)


def test_entropy_rejects_unnormalized():
    with pytest.raises(NormalizationError):
        entropy_map(_probs_grid([[0.5, 0.6]]))
    with pytest.raises(NormalizationError):
        entropy_map(_probs_grid([[1.5, -0.5]]))


def test_nearest_rank_percentile():
    values = torch.arange(1.0, 11.0)
    assert nearest_rank_threshold(values, 10).item() == 1.0
    assert nearest_rank_threshold(values, 20).item() == 2.0
    assert nearest_rank_threshold(values, 25).item() == 3.0
    assert nearest_rank_threshold(values, 100).item() == 10.0


def test_select_confident_keeps_low_entropy_voxels():
    columns = [[1.0, 0.0]] + [[0.5, 0.5]] * 9
    grid = _probs_grid(columns)
    mask = select_confident(grid, q=10).reshape(-1)
    assert mask.tolist() == [True] + [False] * 9
    assert bool(select_confident(grid, q=100).all())
    with pytest.raises(ValueError):
        select_confident(grid, q=0)


# 📌 Банк признаков

def _stage_and_labels():
    torch.manual_seed(0)
    feats = torch.randn(1, 3, 4, 4, 4)
    labels = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    labels[0, :2] = 1
    labels[0, 2, 0, 0] = 2
    return feats, labels


def test_bank_caps_and_normalizes():
    feats, labels = _stage_and_labels()
    bank = sample_class_features({1: feats}, labels, None, lambda_n=5, seed=0, num_classes=3)
    assert bank.count(1, 1) == 5
    assert bank.count(1, 2) == 1
    assert bank.count(1, 3) == 0
    assert 3 not in bank.vectors[1]
    torch.testing.assert_close(bank.vectors[1][1].norm(dim=-1), torch.ones(5))


def test_bank_is_deterministic_under_seed():
    feats, labels = _stage_and_labels()
    first = sample_class_features({1: feats}, labels, None, lambda_n=4, seed=11, num_classes=2)
    second = sample_class_features({1: feats}, labels, None, lambda_n=4, seed=11, num_classes=2)
    assert torch.equal(first.vectors[1][1], second.vectors[1][1])


def test_bank_respects_confident_mask():
    feats, labels = _stage_and_labels()
    mask = torch.zeros(1, 4, 4, 4, dtype=torch.bool)
    mask[0, 0, 0, :3] = True
    bank = sample_class_features({1: feats}, labels, mask, lambda_n=40, seed=0, num_classes=2)
    assert bank.count(1, 1) == 3
    assert bank.count(1, 2) == 0


def test_bank_downsamples_labels_per_scale():
    labels = torch.zeros(1, 8, 8, 8, dtype=torch.long)
    labels[0, :4] = 1
    small = downsample_nearest(labels, (4, 4, 4))
    assert small.dtype == torch.long
    assert int((small == 1).sum()) == 2 * 4 * 4
    stages = {1: torch.randn(1, 2, 8, 8, 8), 2: torch.randn(1, 5, 4, 4, 4)}
    bank = sample_class_features(stages, labels, None, lambda_n=1000, seed=0, num_classes=1)
    assert bank.count(1, 1) == 4 * 8 * 8
    assert bank.count(2, 1) == 2 * 4 * 4
    assert bank.vectors[2][1].shape[1] == 5


def test_zero_cap_leaves_bank_empty():
    feats, labels = _stage_and_labels()
    bank = sample_class_features({1: feats}, labels, None, lambda_n=0, seed=0, num_classes=2)
    assert bank.vectors[1] == {}


# 📌 Контрастная потеря

def test_identical_vectors_give_zero_loss():
    vector = F.normalize(torch.tensor([[1.0, 2.0, 2.0]]), dim=-1)
    groups = {1: [vector.repeat(3, 1), vector.clone(), vector.clone()]}
    loss = contrastive_loss_from_groups(groups, tau=0.07)
    torch.testing.assert_close(loss, torch.tensor(0.0), atol=1e-6, rtol=0)


def test_hand_computed_value():
    a = torch.tensor([[1.0, 0.0]])
    b = torch.tensor([[0.0, 1.0]])
    groups = {1: [a.repeat(2, 1), b]}
    assert contrastive_loss_from_groups(groups, tau=1.0).item() == pytest.approx(-1.0)
    compat = contrastive_loss_from_groups(groups, tau=1.0, infonce_compat=True).item()
    assert compat == pytest.approx(math.log(1.0 + math.e) - 1.0)


@pytest.mark.parametrize("infonce_compat", [False, True])
def test_matches_brute_force_on_random_banks(infonce_compat):
    generator = torch.Generator().manual_seed(123)
    for _ in range(100):
        groups = {}
        for scale, dim in ((1, 3), (2, 5)):
            sizes = torch.randint(0, 4, (3,), generator=generator).tolist()
            groups[scale] = [
                F.normalize(torch.randn(n, dim, generator=generator, dtype=torch.float64), dim=-1) for n in sizes
            ]
        tau = 0.05 + torch.rand(1, generator=generator).item()
        try:
            expected = brute_force_loss(groups, tau, infonce_compat)
        except ZeroDivisionError:
            with pytest.raises(AlignmentSkipped):
                contrastive_loss_from_groups(groups, tau, infonce_compat)
            continue
        actual = contrastive_loss_from_groups(groups, tau, infonce_compat).item()
        assert actual == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_scales_are_paired_separately():
    torch.manual_seed(3)
    first = [F.normalize(torch.randn(2, 4, dtype=torch.float64), dim=-1) for _ in range(2)]
    second = [F.normalize(torch.randn(3, 6, dtype=torch.float64), dim=-1) for _ in range(2)]
    loss_one = contrastive_loss_from_groups({1: first}, tau=0.5).item()
    loss_two = contrastive_loss_from_groups({2: second}, tau=0.5).item()
    combined = contrastive_loss_from_groups({1: first, 2: second}, tau=0.5).item()
    assert combined == pytest.approx((4 * loss_one + 6 * loss_two) / 10)


def test_order_invariance():
    torch.manual_seed(4)
    groups = [F.normalize(torch.randn(n, 4, dtype=torch.float64), dim=-1) for n in (2, 3, 2)]
    reference = contrastive_loss_from_groups({1: groups}, tau=0.2).item()
    shuffled = [groups[2], groups[0][[1, 0]], groups[1][[2, 0, 1]]]
    assert contrastive_loss_from_groups({1: shuffled}, tau=0.2).item() == pytest.approx(reference, rel=1e-12)


def test_no_anchors_skips_alignment():
    with pytest.raises(AlignmentSkipped):
        contrastive_loss_from_groups({1: [torch.eye(3)]}, tau=0.1)
    with pytest.raises(AlignmentSkipped):
        contrastive_loss_from_groups({1: [torch.eye(3)[:1], torch.eye(3)[1:2]]}, tau=0.1)
    with pytest.raises(AlignmentSkipped):
        contrastive_loss_from_groups({}, tau=0.1)
    with pytest.raises(ValueError):
        contrastive_loss_from_groups({1: [torch.eye(3)]}, tau=0.0)


def test_gradient_matches_finite_differences():
    torch.manual_seed(5)
    raw = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)

    def loss_fn(x):
        normed = F.normalize(x, dim=-1)
        return contrastive_loss_from_groups({1: [normed[:3], normed[3:]]}, tau=0.3)

    assert torch.autograd.gradcheck(loss_fn, (raw,), eps=1e-6, atol=1e-5)


def test_bank_loss_adds_text_embeddings():
    bank = ClassFeatureBank(cap=2)
    bank.vectors[1] = {
        1: torch.tensor([[1.0, 0.0]]),
        2: torch.tensor([[0.0, 1.0]]),
    }
    proj = {1: torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])}
    # каждая группа: визуальный вектор + две одинаковые текстовые проекции
    loss = contrastive_loss(bank, proj, proj, tau=1.0).item()
    assert loss == pytest.approx(math.log(3.0) - math.log(2.0) - 1.0)


def test_absent_class_drops_its_text_embeddings():
    bank = ClassFeatureBank(cap=2)
    bank.vectors[1] = {1: torch.tensor([[1.0, 0.0]])}
    proj = {1: torch.tensor([[1.0, 0.0], [0.0, 1.0]])}
    with pytest.raises(AlignmentSkipped):
        contrastive_loss(bank, proj, proj, tau=0.1)
