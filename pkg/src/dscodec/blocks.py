"""Differentiable building blocks shared by the encoder, decoder and transformer.

Convolutional tensors use the (batch, channels, time) layout throughout,
including the LSTM stack; the transformer works on (batch, time, dim).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def snake(x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """x + sin(alpha * x)**2 / alpha, with alpha broadcast against x."""
    return x + torch.sin(alpha * x).pow(2) / alpha


class Snake(nn.Module):
    """Per-channel snake activation with a log-domain frequency parameter."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(channels))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def forward(self, x):
        return snake(x, self.alpha[None, :, None])


@dataclass(frozen=True)
class ConvBlockSpec:
    channels_in: int
    channels_out: int
    stride: int
    kernel: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not self.dilations:
            raise ValueError("dilations must be nonempty")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be positive")


class ResidualUnit(nn.Module):
    """x + conv1x1(snake(dilated_conv(snake(x))))."""

    def __init__(self, channels: int, dilation: int = 1, kernel: int = 7):
        super().__init__()
        self.channels = channels
        pad = (kernel - 1) * dilation // 2
        self.act1 = Snake(channels)
        self.conv1 = nn.Conv1d(channels, channels, kernel, dilation=dilation, padding=pad)
        self.act2 = Snake(channels)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x + self.conv2(self.act2(self.conv1(self.act1(x))))


class DownsampleBlock(nn.Module):
    """Residual units followed by a strided conv dividing the length exactly by ``stride``."""

    def __init__(self, spec: ConvBlockSpec):
        super().__init__()
        self.spec = spec
        s = spec.stride
        self.units = nn.Sequential(*[ResidualUnit(spec.channels_in, d, spec.kernel) for d in spec.dilations])
        self.act = Snake(spec.channels_in)
        self.conv = nn.Conv1d(spec.channels_in, spec.channels_out, 2 * s, stride=s)
        self._pad = (s // 2, s - s // 2)  # total kernel - stride

    def forward(self, x):
        s = self.spec.stride
        if x.shape[-1] % s:
            raise ValueError(f"length {x.shape[-1]} is not divisible by stride {s}")
        x = self.act(self.units(x))
        return self.conv(F.pad(x, self._pad))


class UpsampleBlock(nn.Module):
    """Transposed conv multiplying the length exactly by ``stride``, then residual units."""

    def __init__(self, spec: ConvBlockSpec):
        super().__init__()
        self.spec = spec
        s = spec.stride
        self.act = Snake(spec.channels_in)
        self.conv = nn.ConvTranspose1d(spec.channels_in, spec.channels_out, 2 * s, stride=s)
        self.units = nn.Sequential(*[ResidualUnit(spec.channels_out, d, spec.kernel) for d in spec.dilations])
        self._trim = (s // 2, s - s // 2)

    def forward(self, x):
        n = x.shape[-1]
        y = self.conv(self.act(x))
        y = y[..., self._trim[0]: y.shape[-1] - self._trim[1]]
        assert y.shape[-1] == n * self.spec.stride
        return self.units(y)


class LSTMStack(nn.Module):
    """Unidirectional multi-layer LSTM with a residual skip, on (B, C, T) tensors."""

    def __init__(self, channels: int, layers: int = 2):
        super().__init__()
        self.lstm = nn.LSTM(channels, channels, num_layers=layers, batch_first=True)

    def forward(self, x):
        y, _ = self.lstm(x.transpose(1, 2))
        return x + y.transpose(1, 2)


# -- transformer ----------------------------------------------------------------


@dataclass(frozen=True)
class TransformerLayerSpec:
    model_dim: int = 256
    n_heads: int = 4
    head_dim: int = 64
    ffn_hidden: int = 512
    rope_base: float = 10000.0
    causal: bool = False

    def __post_init__(self):
        if self.model_dim != self.n_heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != n_heads {self.n_heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary(x: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate channel pairs (i, i + d/2) of (..., T, d) by position-dependent angles."""
    t, d = x.shape[-2], x.shape[-1]
    half = d // 2
    inv_freq = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    angles = torch.arange(t, dtype=x.dtype, device=x.device)[:, None] * inv_freq[None, :]
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, spec: TransformerLayerSpec):
        super().__init__()
        self.spec = spec
        d = spec.model_dim
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x):
        b, t, _ = x.shape
        h, hd = self.spec.n_heads, self.spec.head_dim

        def heads(proj):
            return proj(x).view(b, t, h, hd).transpose(1, 2)

        q = rotary(heads(self.wq), self.spec.rope_base)
        k = rotary(heads(self.wk), self.spec.rope_base)
        v = heads(self.wv)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if self.spec.causal:
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, t, h * hd))


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Linear(dim, hidden, bias=False)
        self.w3 = nn.Linear(dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class TransformerLayer(nn.Module):
    """Pre-norm layer: x + Attn(RMSNorm(x)), then + SwiGLU(RMSNorm(.))."""

    def __init__(self, spec: TransformerLayerSpec, zero_init_residual: bool = True):
        super().__init__()
        self.spec = spec
        self.attn_norm = RMSNorm(spec.model_dim)
        self.attn = Attention(spec)
        self.ffn_norm = RMSNorm(spec.model_dim)
        self.ffn = SwiGLU(spec.model_dim, spec.ffn_hidden)
        if zero_init_residual:
            nn.init.zeros_(self.attn.wo.weight)
            nn.init.zeros_(self.ffn.w2.weight)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.spec.model_dim:
            raise ValueError(f"expected model_dim {self.spec.model_dim}, got {x.shape[-1]}")
        h = x + self.attn(self.attn_norm(x))
        out = h + self.ffn(self.ffn_norm(h))
        return out.squeeze(0) if squeeze else out


class TransformerBlock(nn.Module):
    """Stack of transformer layers on (B, C, T) frames, with linear adapters when C != model_dim."""

    def __init__(self, channels: int, specs: Sequence[TransformerLayerSpec], zero_init_residual: bool = True):
        super().__init__()
        dim = specs[0].model_dim
        if channels != dim:
            self.adapt_in = nn.Linear(channels, dim, bias=False)
            self.adapt_out = nn.Linear(dim, channels, bias=False)
            if zero_init_residual:
                nn.init.zeros_(self.adapt_out.weight)
        else:
            self.adapt_in = self.adapt_out = None
        self.layers = nn.ModuleList([TransformerLayer(s, zero_init_residual) for s in specs])

    def forward(self, x):
        h = x.transpose(1, 2)
        if self.adapt_in is None:
            for layer in self.layers:
                h = layer(h)
            return h.transpose(1, 2)
        # adapter path stays residual so zero-initialized output keeps the identity
        z = self.adapt_in(h)
        for layer in self.layers:
            z = layer(z)
        return x + self.adapt_out(z).transpose(1, 2)
