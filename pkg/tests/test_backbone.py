import pytest
import torch

from backbone import VNetBackbone
from errors import ShapeError


def test_stage_shapes_for_32_cube():
    torch.manual_seed(0)
    net = VNetBackbone(stages=4, base_width=8)
    features = net(torch.randn(2, 1, 32, 32, 32))
    assert net.stage_widths == {1: 8, 2: 16, 3: 32, 4: 64}
    for stage, size in zip(range(1, 5), (32, 16, 8, 4)):
        assert tuple(features.stages[stage].shape) == (2, net.stage_widths[stage], size, size, size)
    assert tuple(features.decoder_map.shape) == (2, 8, 32, 32, 32)
    assert tuple(features.global_f.shape) == (2, 64)
    assert all(torch.isfinite(t).all() for t in features.stages.values())


def test_global_feature_is_mean_of_top_stage():
    torch.manual_seed(1)
    net = VNetBackbone(stages=3, base_width=4)
    features = net(torch.randn(1, 1, 16, 16, 8))
    expected = features.stages[3].mean(dim=(2, 3, 4))
    torch.testing.assert_close(features.global_f, expected, atol=1e-5, rtol=0)


def test_indivisible_patch():
    net = VNetBackbone(stages=4, base_width=4)
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 1, 32, 32, 20))


def test_constant_input_gives_constant_top_stage():
    torch.manual_seed(2)
    net = VNetBackbone(stages=3, base_width=4)
    top = net(torch.zeros(1, 1, 16, 16, 16)).stages[3]
    half = top.shape[2] // 2
    torch.testing.assert_close(top[:, :, :half], top[:, :, half:], atol=1e-6, rtol=0)


def test_width_does_not_change_spatial_shapes():
    x = torch.randn(1, 1, 16, 16, 16)
    narrow = VNetBackbone(stages=3, base_width=4)(x)
    wide = VNetBackbone(stages=3, base_width=8)(x)
    for stage in (1, 2, 3):
        assert narrow.stages[stage].shape[2:] == wide.stages[stage].shape[2:]
    assert narrow.decoder_map.shape[2:] == wide.decoder_map.shape[2:]


def test_deterministic_under_seed():
    x = torch.randn(1, 1, 8, 8, 8)
    outputs = []
    for _ in range(2):
        torch.manual_seed(5)
        outputs.append(VNetBackbone(stages=2, base_width=2)(x).decoder_map)
    assert torch.equal(outputs[0], outputs[1])
