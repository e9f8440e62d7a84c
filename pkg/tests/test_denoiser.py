import pytest
import torch

from medseglatdiff import DenoiserConfig, DenoiserUNet, sinusoidal_time_embedding


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(in_channels=3, out_channels=3)
    with pytest.raises(ValueError):
        DenoiserConfig(in_channels=6, out_channels=3, levels=0)
    cfg = DenoiserConfig(in_channels=6, out_channels=3, base_channels=128, levels=3)
    assert cfg.widths() == [128, 256, 512, 512]


def test_time_embedding_shape_and_distinctness():
    t = torch.tensor([0, 1, 500, 999])
    emb = sinusoidal_time_embedding(t, 32)
    assert emb.shape == (4, 32)
    assert not torch.allclose(emb[1], emb[2])
    assert sinusoidal_time_embedding(t, 33).shape == (4, 33)


def test_output_shape_matches_mask_channels():
    torch.manual_seed(0)
    net = DenoiserUNet(DenoiserConfig(in_channels=5, out_channels=2,
                                      base_channels=8, levels=2))
    x = torch.randn(3, 5, 16, 16)
    out = net(x, torch.tensor([1, 7, 3]))
    assert out.shape == (3, 2, 16, 16)
    assert torch.isfinite(out).all()


def test_untrained_network_predicts_zero():
    torch.manual_seed(0)
    net = DenoiserUNet(DenoiserConfig(in_channels=4, out_channels=1,
                                      base_channels=8, levels=1))
    out = net(torch.randn(1, 4, 8, 8), torch.tensor([5]))
    assert torch.all(out == 0)


def test_deterministic_given_input_and_weights():
    torch.manual_seed(0)
    net = DenoiserUNet(DenoiserConfig(in_channels=4, out_channels=1,
                                      base_channels=8, levels=1))
    # break the zero head so the output is nontrivial
    with torch.no_grad():
        net.head.weight.normal_()
    x = torch.randn(2, 4, 8, 8)
    t = torch.tensor([3, 9])
    with torch.no_grad():
        a = net(x, t)
        b = net(x, t)
        c = net(x, torch.tensor([4, 9]))
    assert torch.equal(a, b)
    assert not torch.equal(a[0], c[0])
    assert torch.equal(a[1], c[1])  # per-item time conditioning


def test_indivisible_spatial_dims_rejected():
    net = DenoiserUNet(DenoiserConfig(in_channels=4, out_channels=1,
                                      base_channels=8, levels=2))
    with pytest.raises(ValueError):
        net(torch.randn(1, 4, 10, 10), torch.tensor([1]))
