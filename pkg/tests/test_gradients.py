import pytest
import torch

from phantom_data import TrainingBatch
from trainer import compute_losses, create_model_pair

from conftest import make_priors, make_tiny_config

EPS = 1e-6


def _batch():
    generator = torch.Generator().manual_seed(0)
    y_l = torch.zeros(1, 8, 8, 8, dtype=torch.long)
    y_l[0, :4, :, :4] = 1
    y_l[0, 4:, :, 4:] = 2
    y_l[0, 4:, :4, :4] = 3
    x_l = (0.5 * y_l.double() + 0.1 * torch.randn(1, 8, 8, 8, generator=generator, dtype=torch.float64)).unsqueeze(1)
    x_u = torch.randn(1, 1, 8, 8, 8, generator=generator, dtype=torch.float64)
    return TrainingBatch(x_l=x_l, y_l=y_l, x_u=x_u)


def _sampled_coordinates(pair, count_per_tensor=3):
    """Пары (имя, индекс): по несколько координат из каждого параметра, включая контроллер и проекции."""
    generator = torch.Generator().manual_seed(1)
    picks = []
    for name, param in pair.student.named_parameters():
        if not (name.startswith("controller") or name.startswith("projector") or name.endswith("weight")):
            continue
        for index in torch.randint(0, param.numel(), (count_per_tensor,), generator=generator).tolist():
            picks.append((name, index))
    return picks


@pytest.mark.slow
def test_total_loss_gradient_matches_finite_differences(double_precision):
    config = make_tiny_config()
    config.model.activation = "gelu"
    pair = create_model_pair(config, make_priors())
    pair.student.double()
    pair.teacher.double()
    assert sum(p.numel() for p in pair.student.parameters()) <= 2000

    batch = _batch()
    epoch = 5

    def loss_value():
        return compute_losses(pair, batch, config, epoch, seed=0).total

    terms = compute_losses(pair, batch, config, epoch, seed=0)
    assert terms.l_con is not None
    terms.total.backward()
    params = dict(pair.student.named_parameters())
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for name, p in params.items()}

    picks = _sampled_coordinates(pair)
    assert len(picks) >= 20
    assert any(name.startswith("controller") for name, _ in picks)
    assert any(name.startswith("projector") for name, _ in picks)

    with torch.no_grad():
        for name, index in picks:
            flat = params[name].view(-1)
            original = flat[index].item()
            flat[index] = original + EPS
            plus = loss_value().item()
            flat[index] = original - EPS
            minus = loss_value().item()
            flat[index] = original
            numeric = (plus - minus) / (2 * EPS)
            exact = analytic[name].view(-1)[index].item()
            error = abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-5)
            assert error < 1e-4, f"{name}[{index}]: {exact} против {numeric}"
