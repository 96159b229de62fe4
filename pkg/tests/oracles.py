"""Independent reference computations used by the tests.

Nothing here imports the package, so a bug in the code under test cannot
hide in its oracle.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MARK = "▁"


def oracle_normalize(text: str) -> str:
    words = [w for w in text.split(" ") if w]
    return "".join(MARK + w for w in words)


def brute_force_segment(pieces: dict[str, tuple[int, float]], unk: tuple[int, float], text: str):
    """Exhaustive search over every boundary set of ``text``.

    A segment is either a vocabulary piece or, where no one-character piece
    matches, a single unknown character. Returns ``(score, ids, boundaries)``
    for the best segmentation under (max score, fewest pieces, lexicographically
    smallest boundaries), or ``None`` for empty text.
    """
    n = len(text)
    if n == 0:
        return None
    best = None
    for mask in range(1 << (n - 1)):
        cuts = [i + 1 for i in range(n - 1) if mask >> i & 1] + [n]
        ids, score, start, valid = [], 0.0, 0, True
        for end in cuts:
            seg = text[start:end]
            if seg in pieces:
                pid, s = pieces[seg]
            elif end - start == 1:
                pid, s = unk
            else:
                valid = False
                break
            ids.append(pid)
            score += s
            start = end
        if not valid:
            continue
        key = (-score, len(ids), cuts)
        if best is None or key < best[0]:
            best = (key, ids, cuts, score)
    return best[3], best[1], best[2]


def union_selection(n_total, top_ids, secondary_ids, special_ids, target_ranked):
    """Set-union reference for budgeted selection; returns (sorted kept ids, group of each)."""
    group: dict[int, str] = {}
    for ids, tag in ((top_ids, "ORIGINAL_TOP"), (secondary_ids, "SECONDARY"), (special_ids, "SPECIAL")):
        for i in ids:
            group.setdefault(i, tag)
    for i in target_ranked:
        if len(group) == n_total:
            break
        group.setdefault(i, "TARGET")
    kept = sorted(group)
    return kept, [group[i] for i in kept]


def rank_by_count(counts: dict[int, int]) -> list[int]:
    return [i for i, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c > 0]


WIDTH = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2, "I64": 8, "I32": 4, "I16": 2, "I8": 1, "U8": 1, "BOOL": 1}


def write_safetensors(path: Path, tensors: dict[str, tuple[str, list[int], bytes]], metadata=None, gap=0) -> None:
    """Minimal writer: header JSON in insertion order, payloads back to back.

    ``gap`` inserts that many filler bytes after each payload, which readers
    must tolerate.
    """
    header, blobs, offset = {}, [], 0
    if metadata is not None:
        header["__metadata__"] = metadata
    for name, (dtype, shape, data) in tensors.items():
        assert len(data) == math.prod(shape) * WIDTH[dtype]
        header[name] = {"dtype": dtype, "shape": shape, "data_offsets": [offset, offset + len(data)]}
        blobs.append(data + b"\xee" * gap)
        offset += len(data) + gap
    body = json.dumps(header).encode()
    Path(path).write_bytes(struct.pack("<Q", len(body)) + body + b"".join(blobs))


def read_tensor_bytes(path: Path, name: str) -> tuple[str, list[int], bytes]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    entry = json.loads(raw[8:8 + n])[name]
    b, e = entry["data_offsets"]
    return entry["dtype"], entry["shape"], raw[8 + n + b:8 + n + e]


def row_gather(data: bytes, shape: list[int], width: int, new_to_old: list[int]) -> bytes:
    """Axis-0 row copy, one row at a time."""
    row = math.prod(shape[1:]) * width
    return b"".join(data[i * row:(i + 1) * row] for i in new_to_old)


def random_tensor(rng: np.random.Generator, dtype: str, shape: list[int]) -> bytes:
    return rng.integers(0, 256, size=math.prod(shape) * WIDTH[dtype], dtype=np.uint8).tobytes()
