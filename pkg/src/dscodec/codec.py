"""Encoder, decoder and the mirror / non-mirror codec assemblies."""
from __future__ import annotations

import contextlib
import enum
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .audio import SAMPLE_RATE, Waveform, check_sample_rate
from .blocks import ConvBlockSpec, DownsampleBlock, LSTMStack, Snake, TransformerBlock, TransformerLayerSpec, UpsampleBlock
from .quantize import PQConfig, QuantizerOutput, VQConfig, build_quantizer
from .tokens import TokenSequence

log = logging.getLogger(__name__)


class Architecture(enum.Enum):
    MIRROR = "mirror"  # encoder -> quantizer -> decoder
    NON_MIRROR = "non_mirror"  # encoder -> quantizer -> transformer -> decoder


class CodecMismatch(ValueError):
    """Tokens were produced by a differently configured codec."""


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = SAMPLE_RATE
    strides: tuple[int, ...] = (2, 2, 5, 5, 2)
    base_width: int = 16
    latent_dim: int = 256
    kernel: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)
    lstm_layers: int = 2
    decoder_lstm: bool = True
    quantizer: VQConfig | PQConfig = field(default_factory=VQConfig)
    transformer: bool = False
    transformer_layers: tuple[TransformerLayerSpec, ...] = (TransformerLayerSpec(), TransformerLayerSpec())

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "transformer_layers", tuple(self.transformer_layers))
        if not self.strides or any(s < 1 for s in self.strides):
            raise ValueError(f"invalid stride schedule {self.strides}")
        if self.sample_rate % self.hop:
            raise ValueError(f"sample rate {self.sample_rate} not divisible by hop {self.hop}")
        if self.quantizer.input_dim != self.latent_dim:
            raise ValueError(
                f"quantizer input_dim {self.quantizer.input_dim} != latent_dim {self.latent_dim}"
            )
        if self.transformer and not self.transformer_layers:
            raise ValueError("transformer enabled but no layers configured")

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    @property
    def token_rate(self) -> int:
        return self.sample_rate // self.hop

    @property
    def architecture(self) -> Architecture:
        return Architecture.NON_MIRROR if self.transformer else Architecture.MIRROR

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(len(self.strides) + 1)]

    def with_transformer(self, present: bool) -> "CodecConfig":
        return replace(self, transformer=present)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantizer"] = {"kind": "pq" if isinstance(self.quantizer, PQConfig) else "vq", **asdict(self.quantizer)}
        d["strides"] = list(self.strides)
        d["dilations"] = list(self.dilations)
        d["quantizer"].pop("input_dim")
        if "group_sizes" in d["quantizer"]:
            d["quantizer"]["group_sizes"] = list(d["quantizer"]["group_sizes"])
        d["transformer_layers"] = [asdict(s) for s in self.transformer_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        q = dict(d.pop("quantizer", {"kind": "vq"}))
        kind = q.pop("kind", "vq")
        latent = d.get("latent_dim", cls.latent_dim)
        qcls = {"vq": VQConfig, "pq": PQConfig}.get(kind)
        if qcls is None:
            raise ValueError(f"unknown quantizer kind {kind!r}")
        if "group_sizes" in q:
            q["group_sizes"] = tuple(q["group_sizes"])
        quantizer = qcls(input_dim=latent, **q)
        if "transformer_layers" in d:
            d["transformer_layers"] = tuple(TransformerLayerSpec(**s) for s in d["transformer_layers"])
        for key in ("strides", "dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(quantizer=quantizer, **d)

    def codec_id(self) -> int:
        """Stable 64-bit hash of the configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@contextlib.contextmanager
def seeded(seed: int, tag: str):
    """Fork the torch RNG and seed it from (seed, tag), so each submodule's init is independent."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF)
        yield


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.widths
        self.conv_in = nn.Conv1d(1, w[0], cfg.kernel, padding=cfg.kernel // 2)
        self.blocks = nn.Sequential(*[
            DownsampleBlock(ConvBlockSpec(w[i], w[i + 1], s, cfg.kernel, cfg.dilations))
            for i, s in enumerate(cfg.strides)
        ])
        self.act = Snake(w[-1])
        self.conv_out = nn.Conv1d(w[-1], cfg.latent_dim, 3, padding=1)
        self.lstm = LSTMStack(cfg.latent_dim, cfg.lstm_layers)
        # variance-preserving init along the main path; the default init shrinks the signal by
        # about 20x over the stack, leaving latents too small for the optimizer's step size
        for conv in (self.conv_in, *(b.conv for b in self.blocks), self.conv_out):
            nn.init.normal_(conv.weight, std=(conv.weight[0].numel()) ** -0.5)

    def forward(self, x):
        """(B, L) waveform -> (B, latent_dim, L / hop)."""
        h = self.blocks(self.conv_in(x.unsqueeze(1)))
        return self.lstm(self.conv_out(self.act(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.widths
        self.lstm = LSTMStack(cfg.latent_dim, cfg.lstm_layers) if cfg.decoder_lstm else nn.Identity()
        self.conv_in = nn.Conv1d(cfg.latent_dim, w[-1], cfg.kernel, padding=cfg.kernel // 2)
        self.blocks = nn.Sequential(*[
            UpsampleBlock(ConvBlockSpec(w[i + 1], w[i], s, cfg.kernel, cfg.dilations))
            for i, s in reversed(list(enumerate(cfg.strides)))
        ])
        self.act = Snake(w[0])
        self.conv_out = nn.Conv1d(w[0], 1, cfg.kernel, padding=cfg.kernel // 2)

    def forward(self, z):
        """(B, latent_dim, T) -> (B, T * hop) waveform."""
        h = self.blocks(self.conv_in(self.lstm(z)))
        return self.conv_out(self.act(h)).squeeze(1)


class Codec(nn.Module):
    """Encoder -> quantizer -> [transformer] -> decoder.

    ``seed`` fixes the initialization of every submodule independently, so a
    mirror and a non-mirror codec built with the same seed share identical
    encoder, quantizer and decoder weights.
    """

    SUBMODULES = ("encoder", "quantizer", "transformer", "decoder")

    def __init__(self, cfg: CodecConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with seeded(seed, "encoder"):
            self.encoder = Encoder(cfg)
        with seeded(seed, "quantizer"):
            self.quantizer = build_quantizer(cfg.quantizer)
        with seeded(seed, "decoder"):
            self.decoder = Decoder(cfg)
        # zero biases: with default bias init the encoder output is dominated by a constant
        # offset, the projected latents share one direction and the codebook collapses early
        for name, p in (*self.encoder.named_parameters(), *self.decoder.named_parameters()):
            if name.rsplit(".", 1)[-1].startswith("bias"):
                nn.init.zeros_(p)
        if cfg.transformer:
            with seeded(seed, "transformer"):
                self.transformer = TransformerBlock(cfg.latent_dim, cfg.transformer_layers)
        else:
            self.transformer = None

    @property
    def architecture(self) -> Architecture:
        return self.cfg.architecture

    def submodule(self, name: str) -> nn.Module | None:
        return getattr(self, name)

    def _check_length(self, n: int):
        if n % self.cfg.hop:
            raise ValueError(f"input length {n} is not a multiple of {self.cfg.hop}")

    def quantize(self, wave: torch.Tensor) -> QuantizerOutput:
        self._check_length(wave.shape[-1])
        return self.quantizer(self.encoder(wave))

    def synthesize(self, quantized: torch.Tensor) -> torch.Tensor:
        if self.transformer is not None:
            quantized = self.transformer(quantized)
        return self.decoder(quantized)

    def forward_train(self, wave: torch.Tensor) -> tuple[torch.Tensor, QuantizerOutput]:
        """(B, L) batch -> ((B, L) reconstruction, quantizer output)."""
        q = self.quantize(wave)
        return self.synthesize(q.quantized), q

    forward = forward_train

    # -- inference ------------------------------------------------------------------

    @torch.no_grad()
    def encode(self, wav: Waveform) -> TokenSequence:
        check_sample_rate(wav, self.cfg.sample_rate)
        n = len(wav)
        hop = self.cfg.hop
        n_codes = -(-n // hop)
        meta = dict(codec_id=self.cfg.codec_id(), group_sizes=self.quantizer.group_sizes,
                    token_rate=self.cfg.token_rate, original_length=n,
                    pq=isinstance(self.cfg.quantizer, PQConfig))
        if n == 0:
            return TokenSequence(np.zeros(0, dtype=np.int64), **meta)
        x = np.zeros(n_codes * hop, dtype=np.float32)
        x[:n] = wav.samples
        dtype = next(self.parameters()).dtype
        q = self.quantize(torch.from_numpy(x).to(dtype)[None])
        return TokenSequence(q.indices[0].numpy().astype(np.int64), **meta)

    @torch.no_grad()
    def decode(self, tokens: TokenSequence, strict: bool = True) -> Waveform:
        expected = self.cfg.codec_id()
        if tokens.codec_id != expected:
            msg = f"token codec_id {tokens.codec_id:#018x} does not match model codec_id {expected:#018x}"
            if strict:
                raise CodecMismatch(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        if tuple(tokens.group_sizes) != tuple(self.quantizer.group_sizes):
            raise CodecMismatch(f"group sizes {tokens.group_sizes} != model {self.quantizer.group_sizes}")
        n = len(tokens)
        if n == 0:
            return Waveform(np.zeros(0), self.cfg.sample_rate)
        if not (n - 1) * self.cfg.hop < tokens.original_length <= n * self.cfg.hop:
            raise ValueError(f"original_length {tokens.original_length} inconsistent with {n} codes")
        quantized = self.quantizer.lookup(torch.from_numpy(tokens.codes)[None])
        y = self.synthesize(quantized)[0].double().numpy()
        return Waveform(y[: tokens.original_length], self.cfg.sample_rate)
