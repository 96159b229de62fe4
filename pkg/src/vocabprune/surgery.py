"""Row surgery on safetensors checkpoints.

Tensor payloads are treated as opaque fixed-width byte blocks: slicing copies
whole rows and never reinterprets a value, so the result is exact for every
dtype. Rewrites stream from a memory map of the source into a temporary file
that replaces the destination only once it is complete.
"""

from __future__ import annotations

import hashlib
import json
import math
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from .vocab import VocabPlan

__all__ = [
    "DTYPE_WIDTHS",
    "TensorMeta",
    "TensorIndex",
    "SafetensorsError",
    "SurgeryReport",
    "Mismatch",
    "VerifyResult",
    "parse_header",
    "read_tensor_index",
    "slice_rows",
    "prune_checkpoint",
    "verify_checkpoint",
    "file_sha256",
]

DTYPE_WIDTHS = {
    "F64": 8, "F32": 4, "F16": 2, "BF16": 2,
    "I64": 8, "I32": 4, "I16": 2, "I8": 1,
    "U64": 8, "U32": 4, "U16": 2, "U8": 1,
    "BOOL": 1, "F8_E4M3": 1, "F8_E5M2": 1,
}

_COPY_CHUNK = 64 << 20
METADATA_KEY = "__metadata__"


class SafetensorsError(ValueError):
    pass


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def width(self) -> int:
        return DTYPE_WIDTHS[self.dtype]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]

    def to_header(self) -> dict:
        return {"dtype": self.dtype, "shape": list(self.shape), "data_offsets": list(self.data_offsets)}


@dataclass(frozen=True)
class TensorIndex:
    metas: tuple[TensorMeta, ...]
    header_length: int
    metadata: dict[str, str] | None = None

    @property
    def data_start(self) -> int:
        return 8 + self.header_length

    @property
    def data_length(self) -> int:
        return max((m.data_offsets[1] for m in self.metas), default=0)

    def __getitem__(self, name: str) -> TensorMeta:
        for m in self.metas:
            if m.name == name:
                return m
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(m.name == name for m in self.metas)

    def names(self) -> list[str]:
        return [m.name for m in self.metas]

    def in_file_order(self) -> list[TensorMeta]:
        return sorted(self.metas, key=lambda m: (m.data_offsets[0], m.data_offsets[1]))


def parse_header(header: bytes, data_size: int | None = None) -> tuple[list[TensorMeta], dict[str, str] | None]:
    """Decode and validate the JSON header of a safetensors file.

    ``data_size``, when given, is the length of the payload region; every
    tensor range must fit inside it.
    """
    try:
        doc = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SafetensorsError(f"malformed header JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SafetensorsError("header is not a JSON object")

    metadata = doc.pop(METADATA_KEY, None)
    if metadata is not None and not (
        isinstance(metadata, dict) and all(isinstance(v, str) for v in metadata.values())
    ):
        raise SafetensorsError("__metadata__ must map strings to strings")

    metas = []
    for name, entry in doc.items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            begin, end = (int(x) for x in entry["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise SafetensorsError(f"tensor {name!r}: malformed entry") from None
        if dtype not in DTYPE_WIDTHS:
            raise SafetensorsError(f"tensor {name!r}: unknown dtype {dtype!r}")
        if any(d < 0 for d in shape) or not 0 <= begin <= end:
            raise SafetensorsError(f"tensor {name!r}: negative dimension or inverted offsets")
        if end - begin != math.prod(shape) * DTYPE_WIDTHS[dtype]:
            raise SafetensorsError(
                f"tensor {name!r}: offsets [{begin}, {end}] hold {end - begin} bytes, "
                f"shape {list(shape)} {dtype} needs {math.prod(shape) * DTYPE_WIDTHS[dtype]}"
            )
        if data_size is not None and end > data_size:
            raise SafetensorsError(f"tensor {name!r}: data_offsets end {end} beyond payload of {data_size} bytes")
        metas.append(TensorMeta(name, dtype, shape, (begin, end)))

    ordered = sorted((m for m in metas if m.nbytes), key=lambda m: m.data_offsets)
    for a, b in zip(ordered, ordered[1:]):
        if b.data_offsets[0] < a.data_offsets[1]:
            raise SafetensorsError(f"tensors {a.name!r} and {b.name!r} overlap")
    return metas, metadata


def read_tensor_index(path: str | Path) -> TensorIndex:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise SafetensorsError(f"{path}: shorter than the 8-byte header length")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise SafetensorsError(f"{path}: header length {n} exceeds file size {size}")
        header = fh.read(n)
    metas, metadata = parse_header(header, size - 8 - n)
    return TensorIndex(tuple(metas), n, metadata)


def encode_header(metas: Sequence[TensorMeta], metadata: dict[str, str] | None) -> bytes:
    """Length-prefixed JSON header, space-padded to an 8-byte boundary."""
    doc: dict = {}
    if metadata is not None:
        doc[METADATA_KEY] = dict(sorted(metadata.items()))
    for m in metas:
        doc[m.name] = m.to_header()
    body = json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body += b" " * (-len(body) % 8)
    return struct.pack("<Q", len(body)) + body


# -- slicing -----------------------------------------------------------------


def _axis_layout(meta: TensorMeta, axis: int) -> tuple[int, int, int]:
    """(outer blocks, vocab size, bytes per vocab entry within a block)."""
    if not 0 <= axis < len(meta.shape):
        raise ValueError(f"tensor {meta.name!r} has no axis {axis}")
    outer = math.prod(meta.shape[:axis])
    inner = math.prod(meta.shape[axis + 1:]) * meta.width
    return outer, meta.shape[axis], inner


def _row_spans(meta: TensorMeta, new_to_old: Sequence[int], axis: int) -> Iterator[tuple[int, int]]:
    """Yield (offset, length) byte spans, relative to the tensor start, in output order.

    Consecutive old ids are merged into one span, capped at the copy chunk size.
    """
    outer, vocab, inner = _axis_layout(meta, axis)
    for old in new_to_old:
        if not 0 <= old < vocab:
            raise IndexError(f"row {old} out of range for {meta.name!r} with {vocab} rows")
    if inner == 0:
        return
    max_run = max(1, _COPY_CHUNK // inner)
    for block in range(outer):
        base = block * vocab * inner
        i = 0
        while i < len(new_to_old):
            start = new_to_old[i]
            run = 1
            while i + run < len(new_to_old) and run < max_run and new_to_old[i + run] == start + run:
                run += 1
            yield base + start * inner, run * inner
            i += run


def _sliced_shape(meta: TensorMeta, v_new: int, axis: int) -> tuple[int, ...]:
    return meta.shape[:axis] + (v_new,) + meta.shape[axis + 1:]


def slice_rows(
    data: bytes, meta: TensorMeta, new_to_old: Sequence[int], axis: int = 0
) -> tuple[bytes, TensorMeta]:
    """Gather entries ``new_to_old`` along ``axis`` of an in-memory tensor payload."""
    if len(data) != meta.nbytes:
        raise ValueError(f"payload has {len(data)} bytes, {meta.name!r} needs {meta.nbytes}")
    view = memoryview(data)
    out = b"".join(view[o:o + n] for o, n in _row_spans(meta, new_to_old, axis))
    shape = _sliced_shape(meta, len(new_to_old), axis)
    return out, TensorMeta(meta.name, meta.dtype, shape, (0, len(out)))


# -- checkpoint rewrite ------------------------------------------------------


def default_file_mode() -> int:
    """Permission bits a plain ``open(..., "w")`` would give, honouring the umask."""
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


def plan_sha256(plan: VocabPlan) -> str:
    return hashlib.sha256(json.dumps(list(plan.new_to_old)).encode()).hexdigest()


@dataclass
class SurgeryReport:
    sliced: list[str]
    copied: list[str]
    bytes_old: int
    bytes_new: int
    header_bytes_old: int
    header_bytes_new: int
    payload_bytes_removed: int
    gap_bytes: int = 0

    @property
    def header_delta(self) -> int:
        return self.header_bytes_old - self.header_bytes_new

    @property
    def size_law_holds(self) -> bool:
        return self.bytes_old - self.bytes_new == self.payload_bytes_removed + self.header_delta + self.gap_bytes

    def to_dict(self) -> dict:
        return {
            "sliced": self.sliced,
            "copied": self.copied,
            "bytes_old": self.bytes_old,
            "bytes_new": self.bytes_new,
            "header_bytes_old": self.header_bytes_old,
            "header_bytes_new": self.header_bytes_new,
            "header_delta": self.header_delta,
            "payload_bytes_removed": self.payload_bytes_removed,
            "gap_bytes": self.gap_bytes,
            "size_law_holds": self.size_law_holds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SurgeryReport:
        keys = ("sliced", "copied", "bytes_old", "bytes_new", "header_bytes_old",
                "header_bytes_new", "payload_bytes_removed", "gap_bytes")
        return cls(**{k: doc[k] for k in keys})


def _check_vocab_tensors(index: TensorIndex, plan: VocabPlan, names: Sequence[str], axis: int) -> None:
    for name in names:
        if name not in index:
            raise KeyError(f"vocabulary tensor {name!r} not in checkpoint")
        meta = index[name]
        _axis_layout(meta, axis)
        if meta.shape[axis] != plan.v_old:
            raise ValueError(
                f"tensor {name!r} has {meta.shape[axis]} entries on axis {axis}, plan expects {plan.v_old}"
            )


def prune_checkpoint(
    src: str | Path,
    dst: str | Path,
    plan: VocabPlan,
    vocab_tensor_names: Sequence[str],
    axis: int = 0,
) -> SurgeryReport:
    """Write ``dst`` with the named tensors cut to ``plan.new_to_old``.

    Other tensors are copied byte for byte. Tensors keep their source order and
    are packed without gaps. Source ``__metadata__`` is kept and gains
    provenance keys. On any failure ``dst`` does not exist afterwards.
    """
    src, dst = Path(src), Path(dst)
    index = read_tensor_index(src)
    _check_vocab_tensors(index, plan, vocab_tensor_names, axis)
    to_slice = set(vocab_tensor_names)

    ordered = index.in_file_order()
    new_metas: list[TensorMeta] = []
    offset = 0
    for m in ordered:
        if m.name in to_slice:
            shape = _sliced_shape(m, plan.v_new, axis)
            nbytes = math.prod(shape) * m.width
        else:
            shape, nbytes = m.shape, m.nbytes
        new_metas.append(TensorMeta(m.name, m.dtype, shape, (offset, offset + nbytes)))
        offset += nbytes

    metadata = dict(index.metadata or {})
    metadata.update({
        "vocabprune.source_sha256": file_sha256(src),
        "vocabprune.plan_sha256": plan_sha256(plan),
        "vocabprune.version": __version__,
    })
    header = encode_header(new_metas, metadata)

    bytes_old = os.path.getsize(src)
    covered = sum(m.nbytes for m in ordered)
    fd, tmp_name = tempfile.mkstemp(prefix=dst.name + ".", suffix=".tmp", dir=dst.parent)
    try:
        os.chmod(tmp_name, default_file_mode())
        with os.fdopen(fd, "wb") as out, open(src, "rb") as fh:
            out.write(header)
            with mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) as mm:
                base = index.data_start
                for m in ordered:
                    start = base + m.data_offsets[0]
                    if m.name in to_slice:
                        for o, n in _row_spans(m, plan.new_to_old, axis):
                            out.write(mm[start + o:start + o + n])
                    else:
                        for o in range(0, m.nbytes, _COPY_CHUNK):
                            out.write(mm[start + o:start + min(m.nbytes, o + _COPY_CHUNK)])
        os.replace(tmp_name, dst)
    except BaseException:
        for p in (tmp_name, dst):
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass
        raise

    return SurgeryReport(
        sliced=[m.name for m in ordered if m.name in to_slice],
        copied=[m.name for m in ordered if m.name not in to_slice],
        bytes_old=bytes_old,
        bytes_new=os.path.getsize(dst),
        header_bytes_old=index.data_start,
        header_bytes_new=len(header),
        payload_bytes_removed=covered - offset,
        gap_bytes=bytes_old - index.data_start - covered,
    )


# -- verification ------------------------------------------------------------


@dataclass(frozen=True)
class Mismatch:
    kind: str
    tensor: str
    row: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = self.tensor if self.row is None else f"{self.tensor}[{self.row}]"
        return f"{self.kind}: {where}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class VerifyResult:
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def extend(self, other: VerifyResult) -> None:
        self.mismatches.extend(other.mismatches)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "mismatches": [
                {"kind": m.kind, "tensor": m.tensor, "row": m.row, "detail": m.detail} for m in self.mismatches
            ],
        }


def _load_raw(path: Path) -> tuple[np.memmap | np.ndarray, int, dict]:
    """Independent minimal reader: (whole file as uint8, payload start, header dict)."""
    size = os.path.getsize(path)
    if size < 8:
        raise SafetensorsError(f"{path}: too short")
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        if n > size - 8:
            raise SafetensorsError(f"{path}: header length {n} exceeds file size")
        try:
            header = json.loads(fh.read(n))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SafetensorsError(f"{path}: malformed header: {exc}") from None
    header.pop(METADATA_KEY, None)
    raw = np.memmap(path, dtype=np.uint8, mode="r")
    return raw, 8 + n, header


def _payload(raw: np.ndarray, start: int, entry: dict) -> np.ndarray:
    b, e = entry["data_offsets"]
    return raw[start + b:start + e]


def verify_checkpoint(
    src: str | Path,
    dst: str | Path,
    plan: VocabPlan,
    vocab_tensor_names: Sequence[str],
    axis: int = 0,
    chunk_rows: int = 4096,
) -> VerifyResult:
    """Compare a pruned checkpoint against its source and the plan.

    Every discrepancy is collected: absent or unexpected tensors, dtype or
    shape disagreements, each sliced row whose bytes differ from its source
    row, and untouched tensors whose payload changed.
    """
    src_raw, src_start, src_hdr = _load_raw(Path(src))
    dst_raw, dst_start, dst_hdr = _load_raw(Path(dst))
    result = VerifyResult()
    sliced = set(vocab_tensor_names)
    keep = np.asarray(plan.new_to_old, dtype=np.int64)

    for name in src_hdr.keys() - dst_hdr.keys():
        result.mismatches.append(Mismatch("absent tensor", name))
    for name in dst_hdr.keys() - src_hdr.keys():
        result.mismatches.append(Mismatch("unexpected tensor", name))
    for name in sliced - src_hdr.keys():
        result.mismatches.append(Mismatch("absent tensor", name, detail="vocabulary tensor missing from source"))

    for name in sorted(src_hdr.keys() & dst_hdr.keys()):
        s, d = src_hdr[name], dst_hdr[name]
        if s["dtype"] != d["dtype"]:
            result.mismatches.append(Mismatch("dtype", name, detail=f"{s['dtype']} -> {d['dtype']}"))
            continue
        src_shape = list(s["shape"])
        want = list(src_shape)
        if name in sliced:
            if len(src_shape) <= axis or src_shape[axis] != plan.v_old:
                result.mismatches.append(Mismatch("plan", name, detail=f"source shape {src_shape} vs v_old {plan.v_old}"))
                continue
            want[axis] = len(keep)
        if list(d["shape"]) != want:
            result.mismatches.append(Mismatch("shape", name, detail=f"expected {want}, found {d['shape']}"))
            continue
        a = _payload(src_raw, src_start, s)
        b = _payload(dst_raw, dst_start, d)
        if a.size != math.prod(src_shape) * DTYPE_WIDTHS[s["dtype"]] or b.size != math.prod(want) * DTYPE_WIDTHS[d["dtype"]]:
            result.mismatches.append(Mismatch("payload size", name))
            continue
        if name not in sliced:
            if not np.array_equal(a, b):
                first = int(np.flatnonzero(a != b)[0])
                result.mismatches.append(Mismatch("payload", name, detail=f"first differing byte {first}"))
            continue

        outer = math.prod(src_shape[:axis])
        inner = math.prod(src_shape[axis + 1:]) * DTYPE_WIDTHS[s["dtype"]]
        a3 = a.reshape(outer, src_shape[axis], inner)
        b3 = b.reshape(outer, len(keep), inner)
        for lo in range(0, len(keep), chunk_rows):
            ids = keep[lo:lo + chunk_rows]
            bad = np.flatnonzero((a3[:, ids, :] != b3[:, lo:lo + len(ids), :]).any(axis=(0, 2)))
            for r in bad.tolist():
                new = lo + r
                result.mismatches.append(
                    Mismatch("row", name, row=new, detail=f"source row {int(keep[new])}")
                )
    return result
