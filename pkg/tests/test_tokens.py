import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscodec.tokens import TokenFormatError, TokenSequence, deserialize_tokens, serialize_tokens


def make_tokens(rng, n=80, sizes=(8192,), pq=False):
    total = int(np.prod(sizes))
    return TokenSequence(rng.integers(0, total, n), int(rng.integers(0, 2**64, dtype=np.uint64)),
                         sizes, 80, max(0, n * 200 - int(rng.integers(0, 200))), pq)


def test_layout_is_bit_exact():
    t = TokenSequence(np.array([1, 2, 65535]), 0x0102030405060708, (16, 16, 16, 16), 80, 401, pq=True)
    data = serialize_tokens(t)
    expected = (b"DSCT" + bytes([1, 1]) + struct.pack("<H", 80) + bytes([4]) + struct.pack("<4H", 16, 16, 16, 16)
                + struct.pack("<QQQ", 0x0102030405060708, 401, 3) + struct.pack("<3H", 1, 2, 65535))
    assert data == expected


def test_eighty_codes_take_160_bytes(rng):
    t = make_tokens(rng, 80)
    header = 4 + 1 + 1 + 2 + 1 + 2 * 1 + 8 * 3
    assert len(serialize_tokens(t)) == header + 160


def test_wide_codes_use_u32(rng):
    t = make_tokens(rng, 10, sizes=(300, 300))
    assert t.code_width == 4
    assert len(serialize_tokens(t)) == 4 + 1 + 1 + 2 + 1 + 4 + 24 + 40
    assert deserialize_tokens(serialize_tokens(t)) == t


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.sampled_from([(8192,), (16, 16, 16, 16), (2,), (1000, 70)]), st.booleans(),
       st.integers(0, 2**32 - 1))
def test_round_trip(n, sizes, pq, seed):
    t = make_tokens(np.random.default_rng(seed), n, sizes, pq)
    data = serialize_tokens(t)
    back = deserialize_tokens(data)
    assert back == t
    assert serialize_tokens(back) == data


def test_bad_magic(rng):
    data = bytearray(serialize_tokens(make_tokens(rng)))
    data[0:4] = b"XXXX"
    with pytest.raises(TokenFormatError, match="magic"):
        deserialize_tokens(bytes(data))


def test_bad_version(rng):
    data = bytearray(serialize_tokens(make_tokens(rng)))
    data[4] = 2
    with pytest.raises(TokenFormatError, match="version"):
        deserialize_tokens(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 30, 1])
def test_truncated(rng, cut):
    data = serialize_tokens(make_tokens(rng))
    with pytest.raises(TokenFormatError):
        deserialize_tokens(data[:-cut] if cut > 1 else data[:cut])


def test_out_of_range_code_on_read(rng):
    t = TokenSequence(np.array([5]), 1, (8192,), 80, 200)
    data = bytearray(serialize_tokens(t))
    data[-2:] = struct.pack("<H", 9000)
    with pytest.raises(TokenFormatError):
        deserialize_tokens(bytes(data))


def test_out_of_range_code_on_construction():
    with pytest.raises(TokenFormatError):
        TokenSequence(np.array([8192]), 1, (8192,), 80, 200)
