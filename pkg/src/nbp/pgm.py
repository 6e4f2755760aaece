"""Minimal PGM (P2/P5) reader and writer, 8-bit only.

Parse errors report the byte offset where the grammar broke.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmFormatError(ValueError):
    pass


class _Tokens:
    """Whitespace/comment-aware tokenizer over raw PGM header bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip_separators(self):
        while self.pos < len(self.data):
            c = self.data[self.pos:self.pos + 1]
            if c in b" \t\r\n":
                self.pos += 1
            elif c == b"#":
                nl = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if nl < 0 else nl + 1
            else:
                return

    def next(self, what: str) -> bytes:
        self._skip_separators()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1] not in b" \t\r\n#":
            self.pos += 1
        if self.pos == start:
            raise PgmFormatError(f"expected {what} at byte {start}")
        return self.data[start:self.pos]

    def next_int(self, what: str) -> int:
        tok = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise PgmFormatError(
                f"expected integer {what} at byte {self.pos - len(tok)}, got {tok!r}") from None


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P2 or P5 PGM into a uint8 array (rows top to bottom)."""
    data = Path(path).read_bytes()
    toks = _Tokens(data)
    magic = toks.next("magic number")
    if magic not in (b"P2", b"P5"):
        raise PgmFormatError(f"expected P2 or P5 magic at byte 0, got {magic!r}")
    width = toks.next_int("width")
    height = toks.next_int("height")
    maxval = toks.next_int("maxval")
    if not 0 < maxval <= 255:
        raise PgmFormatError(f"unsupported maxval {maxval} (8-bit only) at byte {toks.pos}")
    n = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates maxval from the raster
        if toks.pos >= len(data) or data[toks.pos:toks.pos + 1] not in b" \t\r\n":
            raise PgmFormatError(f"expected whitespace before raster at byte {toks.pos}")
        start = toks.pos + 1
        raster = data[start:start + n]
        if len(raster) < n:
            raise PgmFormatError(
                f"raster truncated at byte {start + len(raster)}: "
                f"need {n} bytes, got {len(raster)}")
        img = np.frombuffer(raster, dtype=np.uint8, count=n)
    else:
        vals = np.empty(n, dtype=np.int64)
        for i in range(n):
            vals[i] = toks.next_int("pixel value")
        if np.any((vals < 0) | (vals > maxval)):
            raise PgmFormatError("pixel value out of range")
        img = vals.astype(np.uint8)
    return img.reshape(height, width)


def encode_pgm(img: np.ndarray, comment: str = "") -> bytes:
    """Encode a uint8 image (rows top to bottom) as binary P5."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("expected uint8 data")
    h, w = img.shape
    header = "P5\n"
    if comment:
        for line in comment.splitlines():
            header += f"# {line}\n"
    header += f"{w} {h}\n255\n"
    return header.encode("ascii") + img.tobytes()


def write_pgm(path: str | Path, img: np.ndarray, comment: str = "") -> None:
    Path(path).write_bytes(encode_pgm(img, comment))
