"""Reversible byte-level tokenizer.

Ids 0..255 are raw UTF-8 bytes (plus an optional offset), followed by EOS
and PAD. The vocabulary size is configurable upward so large published
vocab sizes validate, but only the byte range is ever produced by encode.
No BOS: the sequence builder appends EOS itself.
"""

from __future__ import annotations


class ByteTokenizer:
    def __init__(self, vocab_size: int = 258, byte_offset: int = 0):
        if byte_offset < 0:
            raise ValueError("byte_offset must be >= 0")
        if vocab_size < byte_offset + 258:
            raise ValueError(f"vocab_size {vocab_size} too small for 256 bytes + EOS + PAD at offset {byte_offset}")
        self.vocab_size = vocab_size
        self.byte_offset = byte_offset
        self.eos_id = byte_offset + 256
        self.pad_id = byte_offset + 257

    def encode(self, text: str) -> list[int]:
        """UTF-8 bytes shifted by the byte offset; EOS is NOT appended."""
        return [b + self.byte_offset for b in text.encode("utf-8")]

    def decode(self, ids) -> str:
        """Inverse of encode. Rendering stops at EOS; non-byte specials
        render as bracketed markers. Invalid UTF-8 is replaced."""
        out = []
        buf = bytearray()

        def flush():
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf.clear()

        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise ValueError(f"token id {i} out of range [0, {self.vocab_size})")
            if i == self.eos_id:
                break
            b = i - self.byte_offset
            if 0 <= b < 256:
                buf.append(b)
            elif i == self.pad_id:
                flush()
                out.append("<pad>")
            else:
                flush()
                out.append(f"<{i}>")
        flush()
        return "".join(out)
