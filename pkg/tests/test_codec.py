import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dscodec.audio import SampleRateMismatch, Waveform
from dscodec.blocks import TransformerLayerSpec
from dscodec.codec import Architecture, Codec, CodecConfig, CodecMismatch
from dscodec.presets import desk_codec, toy_codec
from dscodec.quantize import PQConfig, VQConfig
from dscodec.tokens import TokenSequence


def tiny_config(**kw) -> CodecConfig:  # same as conftest.tiny_codec_config
    layer = TransformerLayerSpec(model_dim=16, n_heads=2, head_dim=8, ffn_hidden=32)
    base = dict(base_width=2, latent_dim=16, dilations=(1,), lstm_layers=1,
                quantizer=VQConfig(codebook_size=64, code_dim=4, input_dim=16), transformer_layers=(layer,))
    return CodecConfig(**(base | kw))


@pytest.fixture(scope="module")
def tiny():
    return Codec(tiny_config(), seed=0).eval()


def test_defaults_hit_token_rate():
    cfg = desk_codec()
    assert cfg.hop == 200 and cfg.token_rate == 80
    assert cfg.quantizer.effective_size == 8192
    assert desk_codec("pq").quantizer.effective_size == 65536
    assert cfg.architecture is Architecture.MIRROR
    assert cfg.with_transformer(True).architecture is Architecture.NON_MIRROR


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(strides=(3, 7))  # 16000 not divisible by 21
    with pytest.raises(ValueError):
        CodecConfig(quantizer=VQConfig(input_dim=64))
    with pytest.raises(ValueError):
        CodecConfig(transformer=True, transformer_layers=())


@pytest.mark.parametrize("cfg", [desk_codec(), desk_codec("pq"), toy_codec().with_transformer(True), tiny_config()])
def test_config_dict_round_trip(cfg):
    back = CodecConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.codec_id() == cfg.codec_id()


def test_codec_id_tracks_config():
    assert desk_codec().codec_id() != desk_codec("pq").codec_id()
    assert desk_codec().codec_id() != desk_codec().with_transformer(True).codec_id()
    assert desk_codec().codec_id() == desk_codec().codec_id()


def test_one_second_gives_eighty_tokens(tiny):
    rng = np.random.default_rng(0)
    tokens = tiny.encode(Waveform(0.1 * rng.standard_normal(16000)))
    assert len(tokens) == 80 and tokens.original_length == 16000
    assert tokens.codes.max() < 64


def test_ceiling_and_empty(tiny):
    t = tiny.encode(Waveform(np.zeros(16001)))
    assert len(t) == 81 and t.original_length == 16001
    empty = tiny.encode(Waveform(np.zeros(0)))
    assert len(empty) == 0
    assert len(tiny.decode(empty)) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000))
def test_encode_length_law(n):
    codec = _shared_codec()
    t = codec.encode(Waveform(np.full(n, 0.01)))
    assert len(t) == -(-n // 200)
    assert len(codec.decode(t)) == n


_CACHE = {}


def _shared_codec():
    if "c" not in _CACHE:
        _CACHE["c"] = Codec(tiny_config(), seed=0).eval()
    return _CACHE["c"]


def test_wrong_rate(tiny):
    with pytest.raises(SampleRateMismatch):
        tiny.encode(Waveform(np.zeros(100), 8000))


def test_decode_length_and_determinism(tiny):
    zeros = TokenSequence(np.zeros(80, dtype=np.int64), tiny.cfg.codec_id(), (64,), 80, 16000)
    a = tiny.decode(zeros)
    b = Codec(tiny_config(), seed=0).eval().decode(zeros)
    assert len(a) == 16000
    assert a.samples.tobytes() == b.samples.tobytes()
    short = TokenSequence(np.zeros(80, dtype=np.int64), tiny.cfg.codec_id(), (64,), 80, 15950)
    assert len(tiny.decode(short)) == 15950
    np.testing.assert_array_equal(tiny.decode(short).samples, a.samples[:15950])


def test_encode_is_deterministic(tiny):
    x = Waveform(np.random.default_rng(3).uniform(-0.5, 0.5, 5000))
    assert tiny.encode(x) == tiny.encode(x)
    assert tiny.encode(x) == Codec(tiny_config(), seed=0).eval().encode(x)


def test_decode_codec_id_mismatch(tiny):
    t = TokenSequence(np.zeros(2, dtype=np.int64), 12345, (64,), 80, 400)
    with pytest.raises(CodecMismatch):
        tiny.decode(t)
    with pytest.warns(RuntimeWarning):
        assert len(tiny.decode(t, strict=False)) == 400


def test_decode_inconsistent_length(tiny):
    t = TokenSequence(np.zeros(2, dtype=np.int64), tiny.cfg.codec_id(), (64,), 80, 401)
    with pytest.raises(ValueError):
        tiny.decode(t)


def test_decode_group_size_mismatch(tiny):
    t = TokenSequence(np.zeros(2, dtype=np.int64), tiny.cfg.codec_id(), (128,), 80, 400)
    with pytest.raises(CodecMismatch):
        tiny.decode(t)


def test_forward_train_shapes():
    codec = Codec(tiny_config(quantizer=PQConfig(group_sizes=(4, 4), code_dim=4, input_dim=16)))
    rec, q = codec(torch.randn(3, 2000))
    assert rec.shape == (3, 2000) and q.indices.shape == (3, 10)
    assert q.indices.max() < 16
    with pytest.raises(ValueError):
        codec(torch.randn(1, 2001))


def test_full_width_batch_shape():
    codec = Codec(desk_codec())
    with torch.no_grad():
        rec, q = codec(torch.randn(10, 16000))
    assert rec.shape == (10, 16000) and q.indices.shape == (10, 80)


def test_mirror_and_non_mirror_agree_at_init():
    mirror = Codec(tiny_config(), seed=7)
    non_mirror = Codec(tiny_config(transformer=True), seed=7)
    assert non_mirror.architecture is Architecture.NON_MIRROR
    x = torch.randn(2, 1000)
    with torch.no_grad():
        torch.testing.assert_close(mirror(x)[0], non_mirror(x)[0], rtol=0, atol=0)


def test_gradient_reaches_encoder():
    codec = Codec(tiny_config(), seed=1)
    rec, q = codec(torch.randn(2, 1000))
    (rec.pow(2).mean() + q.vq_loss).backward()
    grads = [p.grad for p in codec.encoder.parameters()]
    assert all(g is not None for g in grads)
    assert sum(g.abs().sum().item() for g in grads) > 0
