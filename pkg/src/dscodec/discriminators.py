"""Multi-period and multi-scale STFT discriminators with LS-GAN losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import SpectrogramConfig, stft


@dataclass(frozen=True)
class MPDConfig:
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    base_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(int(p) for p in self.periods))
        if len(set(self.periods)) != len(self.periods) or min(self.periods) < 2:
            raise ValueError(f"periods must be distinct and >= 2, got {self.periods}")


@dataclass(frozen=True)
class MSSTFTConfig:
    fft_sizes: tuple[int, ...] = (2048, 1024, 512, 256, 128)
    base_channels: int = 16
    dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        object.__setattr__(self, "fft_sizes", tuple(int(n) for n in self.fft_sizes))
        if len(set(self.fft_sizes)) != len(self.fft_sizes):
            raise ValueError(f"STFT scales must be distinct, got {self.fft_sizes}")

    def spectrogram(self, n_fft: int) -> SpectrogramConfig:
        return SpectrogramConfig(fft_size=n_fft, hop=n_fft // 4)


@dataclass
class DiscriminatorOutput:
    logits: list[torch.Tensor] = field(default_factory=list)
    features: list[list[torch.Tensor]] = field(default_factory=list)

    def __add__(self, other: "DiscriminatorOutput") -> "DiscriminatorOutput":
        return DiscriminatorOutput(self.logits + other.logits, self.features + other.features)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, base: int = 16):
        super().__init__()
        self.period = period
        chans = [1, base, base * 2, base * 4, base * 8]
        self.convs = nn.ModuleList([
            nn.Conv2d(cin, cout, (5, 1), (3, 1), padding=(2, 0)) for cin, cout in zip(chans[:-1], chans[1:])
        ])
        self.convs.append(nn.Conv2d(chans[-1], chans[-1], (5, 1), 1, padding=(2, 0)))
        self.post = nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0))

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, 1, ceil(L / p), p), reflect-padding the tail."""
        p = self.period
        rest = (-x.shape[-1]) % p
        if rest:
            x = F.pad(x.unsqueeze(1), (0, rest), mode="reflect").squeeze(1)
        return x.view(x.shape[0], 1, -1, p)

    def forward(self, x):
        h = self.fold(x)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, cfg: MPDConfig = MPDConfig()):
        super().__init__()
        self.cfg = cfg
        self.discs = nn.ModuleList([PeriodDiscriminator(p, cfg.base_channels) for p in cfg.periods])

    def forward(self, x) -> DiscriminatorOutput:
        out = DiscriminatorOutput()
        for d in self.discs:
            logit, feats = d(x)
            out.logits.append(logit)
            out.features.append(feats)
        return out


class STFTDiscriminator(nn.Module):
    """Conv2d stack over a complex spectrogram split into real/imag channels."""

    def __init__(self, spec: SpectrogramConfig, base: int = 16, dilations: Sequence[int] = (1, 2, 4)):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList([nn.Conv2d(2, base, (3, 9), padding=(1, 4))])
        for d in dilations:
            self.convs.append(nn.Conv2d(base, base, (3, 9), stride=(1, 2), dilation=(d, 1), padding=(d, 4)))
        self.convs.append(nn.Conv2d(base, base, (3, 3), padding=(1, 1)))
        self.post = nn.Conv2d(base, 1, (3, 3), padding=(1, 1))

    def spectrogram(self, x):
        z = stft(x, self.spec)  # (B, F, T)
        return torch.stack([z.real, z.imag], dim=1).transpose(2, 3)  # (B, 2, T, F)

    def forward(self, x):
        return self.forward_spectrogram(self.spectrogram(x))

    def forward_spectrogram(self, h):
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        h = self.post(h)
        feats.append(h)
        return h.flatten(1), feats


class MultiScaleSTFTDiscriminator(nn.Module):
    def __init__(self, cfg: MSSTFTConfig = MSSTFTConfig()):
        super().__init__()
        self.cfg = cfg
        self.discs = nn.ModuleList([
            STFTDiscriminator(cfg.spectrogram(n), cfg.base_channels, cfg.dilations) for n in cfg.fft_sizes
        ])

    def forward(self, x) -> DiscriminatorOutput:
        out = DiscriminatorOutput()
        for d in self.discs:
            logit, feats = d(x)
            out.logits.append(logit)
            out.features.append(feats)
        return out


class Discriminators(nn.Module):
    """MPD and MS-STFT discriminators evaluated together."""

    def __init__(self, mpd: MPDConfig = MPDConfig(), msstft: MSSTFTConfig = MSSTFTConfig()):
        super().__init__()
        self.mpd = MultiPeriodDiscriminator(mpd)
        self.msstft = MultiScaleSTFTDiscriminator(msstft)

    def forward(self, x) -> DiscriminatorOutput:
        return self.mpd(x) + self.msstft(x)


def mpd_forward(x, mpd: MultiPeriodDiscriminator) -> DiscriminatorOutput:
    return mpd(x)


def msstft_forward(x, msstft: MultiScaleSTFTDiscriminator) -> DiscriminatorOutput:
    return msstft(x)


def _check_arity(real: DiscriminatorOutput, fake: DiscriminatorOutput):
    if len(real.logits) != len(fake.logits):
        raise ValueError(f"sub-discriminator count differs: {len(real.logits)} vs {len(fake.logits)}")


def adversarial_losses(real: DiscriminatorOutput, fake: DiscriminatorOutput):
    """Least-squares GAN losses summed over sub-discriminators: (d_loss, g_loss)."""
    _check_arity(real, fake)
    d_loss = sum((r - 1).pow(2).mean() + f.pow(2).mean() for r, f in zip(real.logits, fake.logits))
    g_loss = sum((f - 1).pow(2).mean() for f in fake.logits)
    return d_loss, g_loss


def generator_adversarial_loss(fake: DiscriminatorOutput) -> torch.Tensor:
    return sum((f - 1).pow(2).mean() for f in fake.logits)


def discriminator_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    _check_arity(real, fake)
    return sum((r - 1).pow(2).mean() + f.pow(2).mean() for r, f in zip(real.logits, fake.logits))


def feature_matching_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    """Mean |real - fake| over every (sub-discriminator, layer) pair; real maps are constants."""
    _check_arity(real, fake)
    terms = []
    for fr, ff in zip(real.features, fake.features):
        if len(fr) != len(ff):
            raise ValueError("feature map count differs between real and fake passes")
        terms.extend((r.detach() - f).abs().mean() for r, f in zip(fr, ff))
    return torch.stack(terms).mean()
