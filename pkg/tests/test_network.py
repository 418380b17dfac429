"""Model forward shapes, initialization determinism, parameter grouping."""

import numpy as np
import pytest
import torch

from synthfeat.arch import build_default_alexnet
from synthfeat.network import MultiTaskModel, center_crop


@pytest.fixture(scope="module")
def tiny_model():
    cfg = build_default_alexnet(64, channel_divisor=16)
    return MultiTaskModel(cfg, init_seed=0)


def test_center_crop():
    x = torch.arange(25.0).reshape(1, 1, 5, 5)
    y = center_crop(x, 3)
    assert y.shape[-2:] == (3, 3)
    assert float(y[0, 0, 1, 1]) == 12.0   # center preserved
    with pytest.raises(ValueError):
        center_crop(x, 7)


def test_forward_output_shapes(tiny_model):
    x = torch.rand(2, 3, 64, 64)
    out = tiny_model(x)
    assert out["contour"].shape == (2, 1, 64, 64)
    assert out["depth"].shape == (2, 1, 64, 64)
    assert out["normal"].shape == (2, 3, 64, 64)


def test_normal_head_outputs_unit_vectors(tiny_model):
    x = torch.rand(2, 3, 64, 64)
    n = tiny_model(x)["normal"]
    norms = n.norm(dim=1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)


def test_forward_base_exposes_all_trunk_layers(tiny_model):
    feats = tiny_model.forward_base(torch.rand(1, 3, 64, 64))
    for name in ("conv1", "pool1", "conv5", "fc6", "fc7"):
        assert name in feats
    assert torch.equal(feats["_trunk_out"], feats["fc7"])


def test_discriminator_on_tap_features(tiny_model):
    feats = tiny_model.forward_base(torch.rand(2, 3, 64, 64))
    tap = tiny_model.config.resolve_tap()
    logits = tiny_model.forward_discriminator(feats[tap])
    assert logits.shape[0] == 2 and logits.shape[1] == 1
    with pytest.raises(ValueError):
        tiny_model.forward_discriminator(torch.rand(2, 5, 8, 8))


def test_input_resolution_enforced(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.forward_base(torch.rand(1, 3, 32, 32))


def test_init_is_deterministic_per_seed():
    cfg = build_default_alexnet(64, channel_divisor=16)
    a = MultiTaskModel(cfg, init_seed=7)
    b = MultiTaskModel(cfg, init_seed=7)
    c = MultiTaskModel(cfg, init_seed=8)
    for (ka, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for (_, va), (_, vc)
               in zip(a.state_dict().items(), c.state_dict().items()))


def test_parameter_groups_partition_model(tiny_model):
    groups = (tiny_model.base_parameters() + tiny_model.head_parameters()
              + tiny_model.discriminator_parameters())
    ids = [id(p) for p in groups]
    assert len(ids) == len(set(ids))
    assert len(ids) == sum(1 for _ in tiny_model.parameters())


def test_pre_activation_tap_differs():
    cfg = build_default_alexnet(64, channel_divisor=16, pre_activation_tap=True)
    model = MultiTaskModel(cfg, init_seed=0)
    model.eval()
    x = torch.rand(1, 3, 64, 64)
    tap = model.config.resolve_tap()
    with torch.no_grad():
        pre = model.forward_base(x)[tap]
    # the pre-activation tap can be negative; the post-relu one cannot
    assert float(pre.min()) < 0.0


def test_grayscale_invariant_features_not_assumed():
    # sanity: different inputs give different features (no degenerate trunk)
    cfg = build_default_alexnet(64, channel_divisor=16)
    model = MultiTaskModel(cfg, init_seed=1)
    model.eval()
    with torch.no_grad():
        fa = model.forward_base(torch.zeros(1, 3, 64, 64))["fc7"]
        fb = model.forward_base(torch.ones(1, 3, 64, 64))["fc7"]
    assert not torch.allclose(fa, fb)
