"""Named configurations.

``toy`` is sized for a single CPU core: it is what the acceptance suite
trains.  The ``desk`` codec is the library default (one small GPU or a
patient CPU).
"""
from __future__ import annotations

from .blocks import TransformerLayerSpec
from .codec import CodecConfig
from .discriminators import MPDConfig, MSSTFTConfig
from .quantize import PQConfig, VQConfig
from .trainer import TrainSettings

TOY_CROP = 2000  # 0.125 s, 10 tokens
TOY_BATCH = 10


def desk_codec(kind: str = "vq") -> CodecConfig:
    latent = CodecConfig.latent_dim
    return CodecConfig(quantizer=VQConfig(input_dim=latent) if kind == "vq" else PQConfig(input_dim=latent))


def toy_codec(kind: str = "vq") -> CodecConfig:
    latent = 128
    layer = TransformerLayerSpec(model_dim=latent, n_heads=4, head_dim=32, ffn_hidden=256)
    q = VQConfig(input_dim=latent) if kind == "vq" else PQConfig(input_dim=latent)
    return CodecConfig(base_width=8, latent_dim=latent, quantizer=q, transformer_layers=(layer, layer))


def toy_settings(**overrides) -> TrainSettings:
    base = dict(mpd=MPDConfig(base_channels=8), msstft=MSSTFTConfig(base_channels=8), codebook_warmup_batches=100)
    return TrainSettings(**(base | overrides))


PRESETS = {"desk": desk_codec, "toy": toy_codec}
