"""Byte tokenizer round-trip and special-token behavior."""

import numpy as np
import pytest

from capvit.text import ByteTokenizer


def test_empty_string():
    tok = ByteTokenizer()
    assert tok.encode("") == []
    assert tok.decode([]) == ""


def test_single_ascii_byte():
    tok = ByteTokenizer()
    assert tok.encode("A") == [ord("A")]


def test_offset_shifts_ids():
    tok = ByteTokenizer(vocab_size=300, byte_offset=2)
    assert tok.encode("A") == [ord("A") + 2]
    assert tok.decode(tok.encode("Abc")) == "Abc"
    assert tok.eos_id == 258 and tok.pad_id == 259


def test_multibyte_round_trip():
    tok = ByteTokenizer()
    s = "héllo wörld ♞ 日本語"
    assert tok.decode(tok.encode(s)) == s


def test_round_trip_random_corpus():
    tok = ByteTokenizer()
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(0, 40))
        s = "".join(chr(int(c)) for c in rng.integers(1, 0x2FFF, size=n)
                    if not 0xD800 <= int(c) <= 0xDFFF)
        assert tok.decode(tok.encode(s)) == s


def test_prefix_monotone():
    tok = ByteTokenizer()
    rng = np.random.default_rng(6)
    for _ in range(50):
        a = "".join(chr(int(c)) for c in rng.integers(32, 1000, size=8))
        b = "".join(chr(int(c)) for c in rng.integers(32, 1000, size=8))
        enc = tok.encode(a + b)
        assert enc[:len(tok.encode(a))] == tok.encode(a)


def test_decode_truncates_at_eos():
    tok = ByteTokenizer()
    ids = tok.encode("abc") + [tok.eos_id] + tok.encode("xyz")
    assert tok.decode(ids) == "abc"


def test_decode_renders_pad_marker():
    tok = ByteTokenizer()
    assert tok.decode([ord("a"), tok.pad_id, ord("b")]) == "a<pad>b"


def test_decode_rejects_out_of_vocab():
    tok = ByteTokenizer()
    with pytest.raises(ValueError, match="out of range"):
        tok.decode([258])
    with pytest.raises(ValueError, match="out of range"):
        tok.decode([-1])


def test_large_vocab_validates():
    tok = ByteTokenizer(vocab_size=151936)
    assert tok.decode(tok.encode("check")) == "check"
    assert tok.decode([151935]) == "<151935>"


def test_eos_pad_distinct_and_in_vocab():
    tok = ByteTokenizer()
    assert tok.eos_id != tok.pad_id
    assert tok.eos_id < tok.vocab_size and tok.pad_id < tok.vocab_size


def test_vocab_too_small_rejected():
    with pytest.raises(ValueError):
        ByteTokenizer(vocab_size=257)
