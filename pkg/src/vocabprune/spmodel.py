"""Codec for SentencePiece ``ModelProto`` files.

Only the repeated ``pieces`` field is decoded. Every other top-level field
(trainer spec, normalizer spec, self-test data, ...) is kept as the raw bytes
of its record and written back untouched, so ``serialize_sp_model`` is the
exact inverse of ``parse_sp_model``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "PieceKind",
    "Piece",
    "OpaqueField",
    "SpModel",
    "SpModelError",
    "parse_sp_model",
    "serialize_sp_model",
    "prune_pieces",
    "load_sp_model",
    "save_sp_model",
]

PIECES_FIELD = 1
_PIECE_TEXT, _PIECE_SCORE, _PIECE_KIND = 1, 2, 3

WIRE_VARINT, WIRE_I64, WIRE_LEN, WIRE_I32 = 0, 1, 2, 5


class SpModelError(ValueError):
    """Malformed model bytes; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class PieceKind(enum.IntEnum):
    NORMAL = 1
    UNKNOWN = 2
    CONTROL = 3
    USER_DEFINED = 4
    UNUSED = 5
    BYTE = 6


@dataclass(frozen=True)
class Piece:
    """One vocabulary entry.

    Pieces produced by the parser remember their original wire record and
    re-emit it verbatim. ``dataclasses.replace`` drops that record, so an
    edited piece is re-encoded from its fields.
    """

    text: str
    score: float
    kind: PieceKind = PieceKind.NORMAL
    _record: bytes | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def score_bytes(self) -> bytes:
        return struct.pack("<f", self.score)


@dataclass(frozen=True)
class OpaqueField:
    """A top-level record other than a piece, kept as raw bytes.

    ``position`` is the number of pieces that preceded the record in the
    source file, which is enough to restore the original interleaving.
    """

    number: int
    wire_type: int
    raw: bytes
    position: int


@dataclass(frozen=True)
class SpModel:
    pieces: tuple[Piece, ...] = ()
    opaque_fields: tuple[OpaqueField, ...] = ()
    source_length: int = 0

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def unk_id(self) -> int | None:
        for i, p in enumerate(self.pieces):
            if p.kind is PieceKind.UNKNOWN:
                return i
        return None

    def piece_id(self, text: str) -> int | None:
        for i, p in enumerate(self.pieces):
            if p.text == text:
                return i
        return None


# -- wire primitives ---------------------------------------------------------


def _read_varint(buf: bytes, pos: int, end: int) -> tuple[int, int]:
    start = pos
    result = shift = 0
    while True:
        if pos >= end:
            raise SpModelError("truncated varint", start)
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift >= 70:
            raise SpModelError("varint too long", start)


def _encode_varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _skip_value(buf: bytes, pos: int, end: int, wire_type: int, key_offset: int) -> int:
    """Return the offset just past the value that starts at ``pos``."""
    if wire_type == WIRE_VARINT:
        return _read_varint(buf, pos, end)[1]
    if wire_type == WIRE_I64:
        if pos + 8 > end:
            raise SpModelError("truncated 64-bit field", pos)
        return pos + 8
    if wire_type == WIRE_I32:
        if pos + 4 > end:
            raise SpModelError("truncated 32-bit field", pos)
        return pos + 4
    if wire_type == WIRE_LEN:
        length, data = _read_varint(buf, pos, end)
        if data + length > end:
            raise SpModelError("length-delimited field overruns buffer", pos)
        return data + length
    raise SpModelError(f"unsupported wire type {wire_type}", key_offset)


def _records(buf: bytes, start: int, end: int):
    """Yield (field_number, wire_type, record_start, value_start, record_end)."""
    pos = start
    while pos < end:
        key, value_start = _read_varint(buf, pos, end)
        number, wire_type = key >> 3, key & 7
        if number == 0:
            raise SpModelError("field number 0", pos)
        record_end = _skip_value(buf, value_start, end, wire_type, pos)
        yield number, wire_type, pos, value_start, record_end
        pos = record_end


# -- parse / serialize -------------------------------------------------------


def _parse_piece(buf: bytes, start: int, end: int) -> Piece:
    text: str | None = None
    score = 0.0
    kind = PieceKind.NORMAL
    for number, wire_type, rec, val, _ in _records(buf, start, end):
        if number == _PIECE_TEXT and wire_type == WIRE_LEN:
            length, data = _read_varint(buf, val, end)
            try:
                text = buf[data:data + length].decode("utf-8")
            except UnicodeDecodeError as exc:
                raise SpModelError("piece text is not valid UTF-8", data + exc.start) from None
        elif number == _PIECE_SCORE and wire_type == WIRE_I32:
            (score,) = struct.unpack_from("<f", buf, val)
        elif number == _PIECE_KIND and wire_type == WIRE_VARINT:
            raw_kind, _ = _read_varint(buf, val, end)
            try:
                kind = PieceKind(raw_kind)
            except ValueError:
                raise SpModelError(f"unknown piece type {raw_kind}", val) from None
        elif number in (_PIECE_TEXT, _PIECE_SCORE, _PIECE_KIND):
            raise SpModelError(f"piece field {number} has wire type {wire_type}", rec)
    return Piece(text if text is not None else "", score, kind)


def parse_sp_model(data: bytes) -> SpModel:
    """Decode a serialized ``ModelProto``.

    Raises:
        SpModelError: on a truncated varint, a length-delimited field that
            runs past the end of the buffer, or piece text that is not UTF-8.
    """
    buf = bytes(data)
    pieces: list[Piece] = []
    opaque: list[OpaqueField] = []
    for number, wire_type, rec, val, rec_end in _records(buf, 0, len(buf)):
        if number == PIECES_FIELD:
            if wire_type != WIRE_LEN:
                raise SpModelError("pieces field is not length-delimited", rec)
            length, body = _read_varint(buf, val, rec_end)
            piece = _parse_piece(buf, body, body + length)
            object.__setattr__(piece, "_record", buf[rec:rec_end])
            pieces.append(piece)
        else:
            opaque.append(OpaqueField(number, wire_type, buf[rec:rec_end], len(pieces)))
    return SpModel(tuple(pieces), tuple(opaque), len(buf))


def _encode_piece(piece: Piece) -> bytes:
    if piece._record is not None:
        return piece._record
    text = piece.text.encode("utf-8")
    body = (
        _encode_varint(_PIECE_TEXT << 3 | WIRE_LEN) + _encode_varint(len(text)) + text
        + _encode_varint(_PIECE_SCORE << 3 | WIRE_I32) + piece.score_bytes
        + _encode_varint(_PIECE_KIND << 3 | WIRE_VARINT) + _encode_varint(int(piece.kind))
    )
    return _encode_varint(PIECES_FIELD << 3 | WIRE_LEN) + _encode_varint(len(body)) + body


def serialize_sp_model(model: SpModel) -> bytes:
    out = bytearray()
    opaque = sorted(model.opaque_fields, key=lambda f: f.position)  # stable
    k = 0
    for i, piece in enumerate(model.pieces):
        while k < len(opaque) and opaque[k].position <= i:
            out += opaque[k].raw
            k += 1
        out += _encode_piece(piece)
    for f in opaque[k:]:
        out += f.raw
    return bytes(out)


def prune_pieces(model: SpModel, keep: Sequence[int]) -> SpModel:
    """Return a model whose piece ``i`` is ``model.pieces[keep[i]]``.

    Non-piece fields are carried over unchanged; any that followed the piece
    list in the source still follow it.
    """
    n = len(model.pieces)
    seen: set[int] = set()
    for old in keep:
        if not 0 <= old < n:
            raise ValueError(f"piece id {old} out of range for {n} pieces")
        if old in seen:
            raise ValueError(f"duplicate piece id {old}")
        seen.add(old)
    unk = model.unk_id
    if unk is None or unk not in seen:
        raise ValueError("the UNKNOWN piece must be kept")

    # Each opaque record sits after the same kept pieces it followed before.
    def new_position(pos: int) -> int:
        return sum(1 for old in keep if old < pos)

    opaque = tuple(
        OpaqueField(f.number, f.wire_type, f.raw, new_position(f.position))
        for f in model.opaque_fields
    )
    return SpModel(tuple(model.pieces[i] for i in keep), opaque, model.source_length)


def load_sp_model(path: str | Path) -> SpModel:
    return parse_sp_model(Path(path).read_bytes())


def save_sp_model(model: SpModel, path: str | Path) -> None:
    Path(path).write_bytes(serialize_sp_model(model))


def pieces_from_rows(rows: Iterable[tuple[str, float, int]]) -> SpModel:
    """Build a model from (text, score, kind) triples; handy for tests and tools."""
    return SpModel(tuple(Piece(t, s, PieceKind(k)) for t, s, k in rows))
