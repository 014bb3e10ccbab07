"""Architecture tests: shape contracts, group partition, combination identity."""
import dataclasses

import pytest
import torch

from nodseg.errors import ConfigurationError
from nodseg.network import (
    ASPP,
    DepthwiseSeparableConv,
    FeatureCombine,
    ModelConfig,
    NoduleSegNet,
)
from nodseg.std_activation import STDParams

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        encoder_widths=(8, 12, 16, 20, 20),
        decoder_widths=(16, 12, 8, 8),
        classifier_base_width=4,
        classifier_blocks=(1, 1, 1, 1),
        aspp_rates=(1, 3),
        std=STDParams(iters=3),
    )
    base.update(overrides)
    return ModelConfig(**base)


# ------------------------------------------------- depthwise separable conv


def test_dwsep_shape_contracts():
    conv = DepthwiseSeparableConv(64, 64)
    assert conv(torch.zeros(2, 64, 32, 32)).shape == (2, 64, 32, 32)
    strided = DepthwiseSeparableConv(8, 8, stride=2)
    assert strided(torch.zeros(1, 8, 16, 16)).shape == (1, 8, 8, 8)


def test_dwsep_parameter_ratio():
    conv = DepthwiseSeparableConv(64, 64)
    weights = conv.depthwise.weight.numel() + conv.pointwise.weight.numel()
    assert conv.depthwise.weight.numel() == 3 * 3 * 64
    assert conv.pointwise.weight.numel() == 64 * 64
    dense = 64 * 64 * 3 * 3
    assert abs(weights / dense - 0.127) < 5e-3


def test_dwsep_channel_mismatch():
    with pytest.raises(ConfigurationError):
        DepthwiseSeparableConv(8, 8)(torch.zeros(1, 4, 8, 8))


# -------------------------------------------------------------------- aspp


def test_aspp_preserves_shape():
    aspp = ASPP(16, 16, rates=(1, 5, 10, 15))
    assert aspp(torch.randn(1, 16, 8, 8)).shape == (1, 16, 8, 8)
    assert ModelConfig().aspp_rates == (1, 5, 10, 15)


def test_aspp_identity_construction():
    rates = (1, 3)
    aspp = ASPP(4, 4, rates=rates)
    with torch.no_grad():
        for branch in aspp.branches:
            branch.weight.zero_()
            for ch in range(4):
                branch.weight[ch, ch, 1, 1] = 1.0
        aspp.fuse.weight.zero_()
        for out_ch in range(4):
            for k in range(len(rates)):
                aspp.fuse.weight[out_ch, out_ch + 4 * k, 0, 0] = 1.0 / len(rates)
    x = torch.randn(2, 4, 9, 9)
    with torch.no_grad():
        assert float((aspp(x) - x).abs().max()) < 1e-6


# --------------------------------------------------------- feature combine


def test_combine_shape_contract():
    block = FeatureCombine(512, 128, zero_init=False)
    out = block(torch.randn(2, 512, 16, 16), torch.randn(2, 128, 16, 16))
    assert out.shape == (2, 128, 16, 16)


def test_combine_rejects_spatial_mismatch():
    block = FeatureCombine(512, 128)
    with pytest.raises(ConfigurationError):
        block(torch.randn(2, 512, 16, 16), torch.randn(2, 128, 32, 32))


def test_combine_rejects_channel_mismatch():
    block = FeatureCombine(32, 16)
    with pytest.raises(ConfigurationError):
        block(torch.randn(1, 16, 8, 8), torch.randn(1, 16, 8, 8))


def test_combine_zero_init_is_identity():
    torch.manual_seed(0)
    block = FeatureCombine(32, 16, zero_init=True)
    f_cls = torch.randn(2, 32, 8, 8)
    f_seg = torch.randn(2, 16, 8, 8)
    assert torch.equal(block(f_cls, f_seg), f_seg)
    live = FeatureCombine(32, 16, zero_init=False)
    assert float((live(f_cls, f_seg) - f_seg).detach().abs().max()) > 1e-4


# -------------------------------------------------------------- classifier


def test_classifier_stage_sizes_and_probability():
    torch.manual_seed(1)
    model = NoduleSegNet(tiny_config()).eval()
    img = torch.rand(3, 1, 128, 128)
    sizes = []
    h = img
    with torch.no_grad():
        for name in ("C1", "C2", "C3", "C4", "C5"):
            h = getattr(model, name)(h)
            sizes.append(h.shape[-1])
        out = model(img)
    assert sizes == [64, 32, 16, 8, 4]
    assert out.c.shape == (3,)
    assert float(out.c.min()) >= 0.0 and float(out.c.max()) <= 1.0


def test_classifier_constant_input_gives_identical_scores():
    torch.manual_seed(2)
    model = NoduleSegNet(tiny_config()).eval()
    with torch.no_grad():
        out = model(torch.zeros(4, 1, 64, 64))
    assert float((out.c - out.c[0]).abs().max()) == 0.0


# ------------------------------------------------------------ full forward


def test_forward_shape_contract():
    torch.manual_seed(3)
    model = NoduleSegNet(tiny_config()).eval()
    with torch.no_grad():
        out = model(torch.rand(2, 1, 128, 128))
    assert out.u.shape == (2, 1, 128, 128)
    assert out.x.shape == (2, 1, 128, 128)
    assert out.c.shape == (2,)
    assert torch.isfinite(out.u).all()
    assert float(out.x.min()) > 0.0 and float(out.x.max()) < 1.0


def test_forward_std_disabled_is_plain_sigmoid():
    torch.manual_seed(4)
    model = NoduleSegNet(tiny_config()).eval()
    with torch.no_grad():
        out = model(torch.rand(2, 1, 64, 64), std_enabled=False)
    tiny = torch.finfo(torch.float32).eps
    assert torch.equal(out.x, torch.sigmoid(out.u).clamp(tiny, 1 - tiny))


def test_forward_deterministic_across_rebuilds():
    outs = []
    img = None
    for _ in range(2):
        torch.manual_seed(5)
        model = NoduleSegNet(tiny_config()).eval()
        if img is None:
            img = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            outs.append(model(img))
    assert float((outs[0].u - outs[1].u).abs().max()) < 1e-12
    assert float((outs[0].x - outs[1].x).abs().max()) < 1e-12
    assert float((outs[0].c - outs[1].c).abs().max()) < 1e-12


def test_forward_finite_over_random_seeds():
    for seed in range(5):
        torch.manual_seed(seed)
        model = NoduleSegNet(tiny_config()).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 1, 64, 64))
        assert torch.isfinite(out.u).all()
        assert torch.isfinite(out.x).all()
        assert torch.isfinite(out.c).all()


# ------------------------------------------------------- groups and freeze


def test_parameter_groups_partition_everything():
    model = NoduleSegNet(tiny_config())
    expected = {f"S{i}" for i in range(1, 10)}
    expected |= {f"C{i}" for i in range(1, 6)}
    expected |= {"FC", "STD", "FCB1", "FCB2", "FCB3"}
    assert set(model.group_names()) == expected

    seen = {}
    for name, params in model.parameter_groups().items():
        for p in params:
            assert id(p) not in seen, f"{name} shares a tensor with {seen.get(id(p))}"
            seen[id(p)] = name
    assert len(seen) == sum(1 for _ in model.parameters())


def test_combination_disabled_drops_fcb_groups():
    model = NoduleSegNet(tiny_config(combination_enabled=False))
    assert not any(name.startswith("FCB") for name in model.group_names())


def test_zeroed_combination_equals_uncombined_branch():
    torch.manual_seed(6)
    cfg = tiny_config(combine_zero_init=True)
    model = NoduleSegNet(cfg).eval()
    twin = NoduleSegNet(dataclasses.replace(cfg, combination_enabled=False)).eval()
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("FCB")}
    missing, unexpected = twin.load_state_dict(state, strict=False)
    assert missing == [] and unexpected == []
    img = torch.rand(2, 1, 64, 64)
    with torch.no_grad():
        a, b = model(img), twin(img)
    assert torch.equal(a.u, b.u)
    assert torch.equal(a.c, b.c)


def test_freeze_controls_grad_and_batchnorm():
    model = NoduleSegNet(tiny_config())
    model.set_frozen_groups(["S2", "C1", "STD"])
    assert model.frozen_groups == {"S2", "C1", "STD"}
    for p in model.S2.parameters():
        assert not p.requires_grad
    for p in model.S3.parameters():
        assert p.requires_grad
    assert not model.STD.log_eps.requires_grad

    model.train()
    assert not model.S2.body[0].training
    assert model.S3.body[0].training

    frozen_mean = model.S2.body[0].running_mean.clone()
    live_mean = model.S3.body[0].running_mean.clone()
    out = model(torch.rand(2, 1, 64, 64))
    assert torch.equal(model.S2.body[0].running_mean, frozen_mean)
    assert not torch.equal(model.S3.body[0].running_mean, live_mean)

    model.set_frozen_groups([])
    assert all(p.requires_grad for p in model.parameters())


def test_freeze_rejects_unknown_group():
    model = NoduleSegNet(tiny_config())
    with pytest.raises(ConfigurationError):
        model.set_frozen_groups(["S42"])


# ----------------------------------------------------------- configuration


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(encoder_widths=(8, 8)).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(decoder_widths=(8, 8, 8)).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(aspp_rates=()).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(combine_pairs=(("C2", "S4"),)).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(combine_pairs=(("C9", "S3"),)).validate()
    ModelConfig(combine_pairs=(("C1", "S2"), ("C2", "S3"))).validate()
