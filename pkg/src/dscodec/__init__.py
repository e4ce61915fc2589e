"""Dual-stage neural speech codec.

A convolutional encoder/decoder pair around a low-dimensional vector (or
product) quantizer, trained first as a mirrored autoencoder and then
fine-tuned with a transformer block in front of the decoder while the
encoder and codebook stay frozen.
"""
from .audio import CropDataset, Waveform, load_wav, save_wav
from .codec import Architecture, Codec, CodecConfig, CodecMismatch
from .quantize import PQConfig, VQConfig, bitrate, pq_compose, pq_decompose
from .tokens import TokenSequence, deserialize_tokens, serialize_tokens

__all__ = [
    "Architecture", "Codec", "CodecConfig", "CodecMismatch", "CropDataset", "PQConfig", "TokenSequence",
    "VQConfig", "Waveform", "bitrate", "deserialize_tokens", "load_wav", "pq_compose", "pq_decompose",
    "save_wav", "serialize_tokens",
]
__version__ = "0.1.0"
