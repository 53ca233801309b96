import pytest
import torch

from pe_advseg.segnet import (
    InvalidShape, SegNet, SegNetConfig, count_parameters, desk_config, four_stage_parameter_count,
    predict_mask, record_shapes, segnet_forward,
)


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    return SegNet(desk_config(128))


def test_stem_halves_resolution(small):
    assert small.stem_forward(torch.rand(1, 1, 128, 128)).shape[-2:] == (64, 64)
    big = SegNet(SegNetConfig(input_size=400, carafe=desk_config().carafe, stem_channels=8,
                              branch_widths=(4, 8, 16), blocks_per_module=1, modules_per_stage=(1, 1, 1),
                              fused_channels=8))
    assert big.stem_forward(torch.rand(1, 1, 400, 400)).shape[-2:] == (200, 200)
    stride2 = [m for m in big.stem.modules() if isinstance(m, torch.nn.Conv2d) and m.stride == (2, 2)]
    assert len(stride2) == 1


def test_invalid_shape(small):
    with pytest.raises(InvalidShape):
        small(torch.rand(1, 1, 130, 130))
    with pytest.raises(InvalidShape):
        SegNetConfig(input_size=130)


def test_output_shapes(small):
    out = segnet_forward(torch.rand(128, 128), small)
    assert out.logits.shape == (1, 1, 128, 128)
    assert out.encoder_features.shape == (1, 16, 64, 64)


def test_eval_determinism(small):
    small.eval()
    x = torch.rand(2, 1, 64, 64)
    a, b = small(x), small(x)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.encoder_features, b.encoder_features)


def test_finite_on_extreme_inputs(small):
    small.eval()
    for x in (torch.zeros(1, 1, 64, 64), torch.ones(1, 1, 64, 64)):
        assert torch.isfinite(small(x).logits).all()


def test_min_resolution_is_one_eighth(small):
    sides = [min(s[2:]) for _, s in record_shapes(small.eval(), torch.rand(1, 1, 128, 128))]
    assert min(sides) == 16


def test_predict_mask_rules():
    assert predict_mask(torch.full((1, 1, 4, 4), 10.0)).all()
    assert predict_mask(torch.zeros(1, 1, 4, 4), 0.5).all()
    assert not predict_mask(torch.full((1, 1, 4, 4), -10.0)).any()
    with pytest.raises(ValueError):
        predict_mask(torch.zeros(1), 1.0)


def test_parameter_counts():
    a = desk_config()
    more = SegNetConfig.from_dict({**a.to_dict(), "modules_per_stage": [1, 1, 2]})
    assert count_parameters(a) == count_parameters(a)
    assert count_parameters(more) > count_parameters(a)
    assert count_parameters(a) < four_stage_parameter_count(a)
    assert count_parameters(SegNetConfig()) < four_stage_parameter_count(SegNetConfig())


def test_every_parameter_gets_gradient():
    torch.manual_seed(1)
    model = SegNet(desk_config(64))
    model.train()
    x = torch.rand(2, 1, 64, 64)
    y = (torch.rand(2, 1, 64, 64) > 0.9).float()
    out = model(x)
    loss = torch.nn.functional.binary_cross_entropy_with_logits(out.logits, y) + out.encoder_features.pow(2).mean()
    loss.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or p.grad.norm() == 0]
    assert not dead


def test_config_round_trip():
    cfg = SegNetConfig()
    assert SegNetConfig.from_dict(cfg.to_dict()) == cfg
