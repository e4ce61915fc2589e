import math

import numpy as np
import pytest
import torch

from conftest import grad_rel_error
from dscodec.blocks import (
    ConvBlockSpec, DownsampleBlock, LSTMStack, RMSNorm, ResidualUnit, Snake, TransformerBlock,
    TransformerLayer, TransformerLayerSpec, UpsampleBlock, snake,
)

STRIDES = (2, 2, 5, 5, 2)


def test_snake_values():
    one = torch.tensor(1.0)
    assert snake(torch.tensor(0.0), one).item() == 0.0
    assert snake(torch.tensor(math.pi, dtype=torch.float64), one.double()).item() == pytest.approx(math.pi, abs=1e-12)
    x = torch.tensor(0.3, dtype=torch.float64)
    assert snake(x, torch.tensor(2.0, dtype=torch.float64)).item() == pytest.approx(0.3 + math.sin(0.6) ** 2 / 2)


def test_snake_odd_part_identity():
    x = torch.linspace(-3, 3, 101, dtype=torch.float64)
    a = torch.tensor(1.7, dtype=torch.float64)
    torch.testing.assert_close(snake(-x, a), -x + torch.sin(a * x) ** 2 / a)


def test_snake_gradient():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
    act = Snake(3).double()
    with torch.no_grad():
        act.log_alpha.uniform_(-0.5, 0.5)
    w = torch.randn(2, 3, 8, dtype=torch.float64)
    assert grad_rel_error(lambda: (act(x) * w).sum(), (), [x, act.log_alpha]) <= 1e-3


def test_residual_unit_zero_branch_is_identity():
    unit = ResidualUnit(4, dilation=3)
    torch.nn.init.zeros_(unit.conv2.weight)
    torch.nn.init.zeros_(unit.conv2.bias)
    x = torch.zeros(1, 4, 50)
    torch.testing.assert_close(unit(x), x, rtol=0, atol=0)
    x = torch.randn(2, 4, 50)
    torch.testing.assert_close(unit(x), x, rtol=0, atol=0)


@pytest.mark.parametrize("length", [200, 400, 1000])
@pytest.mark.parametrize("dilation", [1, 3, 9])
def test_residual_unit_shape(length, dilation):
    assert ResidualUnit(3, dilation)(torch.randn(2, 3, length)).shape == (2, 3, length)


def test_residual_unit_channel_mismatch():
    with pytest.raises(ValueError):
        ResidualUnit(4)(torch.zeros(1, 3, 10))


def test_residual_unit_gradient_reaches_both_paths():
    torch.manual_seed(1)
    unit = ResidualUnit(3, 3)
    x = torch.randn(1, 3, 40, requires_grad=True)
    unit(x).sum().backward()
    assert x.grad.abs().sum() > 0
    assert unit.conv1.weight.grad.abs().sum() > 0


def test_residual_unit_gradient_check():
    torch.manual_seed(2)
    unit = ResidualUnit(2, dilation=3, kernel=3).double()
    x = torch.randn(1, 2, 12, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 2, 12, dtype=torch.float64)
    params = [x, unit.conv1.weight, unit.conv2.weight, unit.act1.log_alpha]
    assert grad_rel_error(lambda: (unit(x) * w).sum(), (), params) <= 1e-3


def test_down_and_up_chains_hit_token_rate():
    x = torch.randn(1, 2, 16000)
    ch = 2
    for s in STRIDES:
        x = DownsampleBlock(ConvBlockSpec(ch, ch, s, dilations=(1,)))(x)
    assert x.shape[-1] == 80
    for s in reversed(STRIDES):
        x = UpsampleBlock(ConvBlockSpec(ch, ch, s, dilations=(1,)))(x)
    assert x.shape[-1] == 16000


def test_single_downsample():
    assert DownsampleBlock(ConvBlockSpec(2, 4, 2))(torch.zeros(1, 2, 16000)).shape == (1, 4, 8000)


def test_downsample_rejects_non_divisible():
    with pytest.raises(ValueError):
        DownsampleBlock(ConvBlockSpec(2, 2, 5))(torch.zeros(1, 2, 16001))


def test_block_spec_validation():
    with pytest.raises(ValueError):
        ConvBlockSpec(2, 2, 0)
    with pytest.raises(ValueError):
        ConvBlockSpec(2, 2, 2, dilations=())


def test_lstm_shape_and_causality():
    torch.manual_seed(3)
    lstm = LSTMStack(6, 2)
    x = torch.randn(1, 6, 30)
    y = lstm(x)
    assert y.shape == x.shape
    x2 = x.clone()
    x2[..., 17] += 5.0
    y2 = lstm(x2)
    torch.testing.assert_close(y2[..., :17], y[..., :17], rtol=0, atol=0)
    assert not torch.equal(y2[..., 17:], y[..., 17:])


def test_lstm_zero_in_zero_out_with_zero_biases():
    lstm = LSTMStack(4, 2)
    for name, p in lstm.named_parameters():
        if "bias" in name:
            torch.nn.init.zeros_(p)
    assert not lstm(torch.zeros(2, 4, 10)).any()


# -- transformer ----------------------------------------------------------------------


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        TransformerLayerSpec(model_dim=256, n_heads=3, head_dim=64)


def test_zero_init_layer_is_identity():
    layer = TransformerLayer(TransformerLayerSpec(64, 4, 16, 128))
    x = torch.randn(2, 9, 64)
    torch.testing.assert_close(layer(x), x, rtol=0, atol=0)
    x1 = torch.randn(9, 64)
    torch.testing.assert_close(layer(x1), x1, rtol=0, atol=0)


def test_layer_model_dim_mismatch():
    with pytest.raises(ValueError):
        TransformerLayer(TransformerLayerSpec(64, 4, 16, 128))(torch.zeros(3, 32))


def test_layer_is_order_sensitive():
    torch.manual_seed(4)
    layer = TransformerLayer(TransformerLayerSpec(32, 2, 16, 64), zero_init_residual=False)
    x = torch.randn(1, 8, 32)
    perm = torch.randperm(8)
    while torch.equal(perm, torch.arange(8)):
        perm = torch.randperm(8)
    permuted_after = layer(x)[:, perm]
    assert not torch.allclose(layer(x[:, perm]), permuted_after, atol=1e-5)


def test_causal_layer_ignores_future():
    torch.manual_seed(5)
    layer = TransformerLayer(TransformerLayerSpec(32, 2, 16, 64, causal=True), zero_init_residual=False)
    x = torch.randn(1, 8, 32)
    x2 = x.clone()
    x2[:, 6] += 1.0
    torch.testing.assert_close(layer(x2)[:, :6], layer(x)[:, :6])


def test_rmsnorm_constant_row():
    norm = RMSNorm(16)
    with torch.no_grad():
        norm.weight.copy_(torch.linspace(0.5, 2.0, 16))
    out = norm(torch.full((3, 16), 4.2, dtype=torch.float32))
    torch.testing.assert_close(out, norm.weight.detach().expand(3, 16), atol=1e-6, rtol=0)


def test_transformer_layer_gradient_check():
    torch.manual_seed(6)
    layer = TransformerLayer(TransformerLayerSpec(8, 2, 4, 12), zero_init_residual=False).double()
    x = torch.randn(1, 5, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 5, 8, dtype=torch.float64)
    params = [x, layer.attn.wq.weight, layer.attn.wo.weight, layer.ffn.w1.weight, layer.attn_norm.weight]
    assert grad_rel_error(lambda: (layer(x) * w).sum(), (), params) <= 1e-3


def test_block_with_adapters_keeps_identity():
    block = TransformerBlock(48, [TransformerLayerSpec(32, 2, 16, 64)])
    x = torch.randn(2, 48, 7)
    torch.testing.assert_close(block(x), x, rtol=0, atol=0)
    block = TransformerBlock(32, [TransformerLayerSpec(32, 2, 16, 64)] * 2)
    x = torch.randn(2, 32, 7)
    torch.testing.assert_close(block(x), x, rtol=0, atol=0)
