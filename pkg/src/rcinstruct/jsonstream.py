"""Incremental reader for newline-delimited JSON, concatenated JSON values,
and top-level JSON arrays.

The format is sniffed from the first non-whitespace byte: ``[`` streams the
array's elements one at a time, anything else is read as a sequence of
whitespace-separated JSON values (which covers NDJSON and a single document).
"""

from __future__ import annotations

import codecs
import json
from typing import BinaryIO, Iterator

_WS = " \t\r\n"


class JsonStreamError(ValueError):
    def __init__(self, message: str, offset: int, source: str = "<stream>"):
        super().__init__(f"{source}: {message} at byte offset {offset}")
        self.offset = offset
        self.source = source


class _Buffer:
    def __init__(self, stream: BinaryIO, chunk_size: int, source: str):
        self.stream = stream
        self.chunk_size = max(1, chunk_size)
        self.source = source
        self.decoder = codecs.getincrementaldecoder("utf-8")()
        self.text = ""
        self.pos = 0
        self.consumed_bytes = 0  # bytes before self.text[0]
        self.eof = False

    def fill(self, at_least: int = 0) -> bool:
        """Read more input; returns False at EOF."""
        if self.eof:
            return False
        want = max(self.chunk_size, at_least)
        got = []
        n = 0
        while n < want:
            chunk = self.stream.read(want - n)
            if not chunk:
                self.eof = True
                break
            n += len(chunk)
            got.append(chunk)
        try:
            decoded = self.decoder.decode(b"".join(got), final=self.eof)
        except UnicodeDecodeError as e:
            raise JsonStreamError(f"invalid utf-8 ({e.reason})", self.offset(), self.source) from None
        # drop what has been consumed so memory stays bounded per record
        if self.pos:
            self.consumed_bytes += len(self.text[: self.pos].encode("utf-8"))
            self.text = self.text[self.pos :]
            self.pos = 0
        self.text += decoded
        return bool(got) or bool(decoded)

    def offset(self) -> int:
        return self.consumed_bytes + len(self.text[: self.pos].encode("utf-8"))

    def skip_ws(self) -> str | None:
        """Advance past whitespace; return the next char or None at EOF."""
        while True:
            while self.pos < len(self.text) and self.text[self.pos] in _WS:
                self.pos += 1
            if self.pos < len(self.text):
                return self.text[self.pos]
            if not self.fill():
                return None

    def decode_value(self, decoder: json.JSONDecoder):
        grow = self.chunk_size
        while True:
            try:
                value, end = decoder.raw_decode(self.text, self.pos)
            except json.JSONDecodeError as e:
                bad = self.consumed_bytes + len(self.text[: e.pos].encode("utf-8"))
                if self.fill(grow):
                    grow *= 2
                    continue
                raise JsonStreamError(e.msg, bad, self.source) from None
            # a scalar cut at the buffer edge could still continue
            if end == len(self.text) and not self.eof:
                if self.fill(grow):
                    grow *= 2
                    continue
            self.pos = end
            return value


def iter_json_records(stream: BinaryIO, chunk_size: int = 1 << 16, source: str = "<stream>") -> Iterator[tuple[int, object]]:
    """Yield ``(byte_offset, value)`` for each top-level record in ``stream``."""
    buf = _Buffer(stream, chunk_size, source)
    decoder = json.JSONDecoder()
    first = buf.skip_ws()
    if first is None:
        return
    if first != "[":
        while buf.skip_ws() is not None:
            off = buf.offset()
            yield off, buf.decode_value(decoder)
        return

    buf.pos += 1
    if buf.skip_ws() == "]":
        buf.pos += 1
    else:
        while True:
            if buf.skip_ws() is None:
                raise JsonStreamError("unterminated array", buf.offset(), source)
            off = buf.offset()
            yield off, buf.decode_value(decoder)
            nxt = buf.skip_ws()
            if nxt == ",":
                buf.pos += 1
            elif nxt == "]":
                buf.pos += 1
                break
            else:
                raise JsonStreamError("expected ',' or ']' in array", buf.offset(), source)
    if buf.skip_ws() is not None:
        raise JsonStreamError("trailing data after array", buf.offset(), source)
