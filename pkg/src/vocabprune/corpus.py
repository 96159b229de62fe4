"""Corpus reading, piece frequency tables and the statistics derived from them."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .unigram import Tokenizer, encode

__all__ = [
    "CorpusReader",
    "FrequencyTable",
    "read_corpus",
    "count_frequencies",
    "merge_tables",
    "used_fraction",
    "coverage_curve",
    "coverage_at",
    "pieces_for_coverage",
    "overlap",
    "ranked_ids",
    "write_table",
    "read_table",
]

log = logging.getLogger(__name__)


class CorpusReader:
    """Iterate the sentences of a Leipzig-style file.

    A line ``"<id>\\t<sentence>"`` yields the sentence; a line without a tab
    yields itself. Blank lines are skipped, as are lines that are not valid
    UTF-8 (tallied in ``skipped``).
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"corpus not found: {self.path}")
        self.skipped = 0

    def __iter__(self) -> Iterator[str]:
        self.skipped = 0
        with open(self.path, "rb") as fh:
            for lineno, raw in enumerate(fh, 1):
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError:
                    self.skipped += 1
                    continue
                line = line.rstrip("\r\n")
                if "\t" in line:
                    line = line.split("\t", 1)[1]
                if line.strip():
                    yield line
        if self.skipped:
            log.warning("%s: skipped %d line(s) that were not valid UTF-8", self.path, self.skipped)


def read_corpus(path: str | Path) -> CorpusReader:
    return CorpusReader(path)


@dataclass(frozen=True)
class FrequencyTable:
    """Occurrence counts indexed by piece id."""

    counts: np.ndarray  # int64, shape (vocab_size,)

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, vocab_size: int) -> FrequencyTable:
        return cls(np.zeros(vocab_size, dtype=np.int64))

    @classmethod
    def from_mapping(cls, counts: Mapping[int, int], vocab_size: int) -> FrequencyTable:
        arr = np.zeros(vocab_size, dtype=np.int64)
        for i, c in counts.items():
            if not 0 <= i < vocab_size:
                raise ValueError(f"piece id {i} out of range for vocab_size {vocab_size}")
            arr[i] = c
        return cls(arr)

    @property
    def vocab_size(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def used(self) -> np.ndarray:
        return np.flatnonzero(self.counts)

    def as_dict(self) -> dict[int, int]:
        return {int(i): int(self.counts[i]) for i in self.used()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrequencyTable):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None  # type: ignore[assignment]


def _count_chunk(tok: Tokenizer, sentences: Sequence[str]) -> np.ndarray:
    ids: list[int] = []
    for s in sentences:
        ids.extend(encode(tok, s))
    return np.bincount(np.asarray(ids, dtype=np.int64), minlength=len(tok))


def _chunks(items: Iterable[str], size: int) -> Iterator[list[str]]:
    it = iter(items)
    while chunk := list(islice(it, size)):
        yield chunk


def count_frequencies(
    tok: Tokenizer,
    sentences: Iterable[str],
    workers: int = 1,
    chunk_size: int = 20_000,
) -> FrequencyTable:
    """Count piece occurrences over ``encode`` of every sentence.

    With ``workers > 1`` the stream is cut into chunks that are counted in
    separate processes and summed; the result does not depend on the split.
    """
    total = np.zeros(len(tok), dtype=np.int64)
    if workers <= 1:
        for chunk in _chunks(sentences, chunk_size):
            total += _count_chunk(tok, chunk)
        return FrequencyTable(total)

    with ProcessPoolExecutor(max_workers=workers) as pool:
        pending = []
        for chunk in _chunks(sentences, chunk_size):
            pending.append(pool.submit(_count_chunk, tok, chunk))
            if len(pending) >= 2 * workers:
                total += pending.pop(0).result()
        for fut in pending:
            total += fut.result()
    return FrequencyTable(total)


def merge_tables(a: FrequencyTable, b: FrequencyTable) -> FrequencyTable:
    if a.vocab_size != b.vocab_size:
        raise ValueError(f"vocab_size mismatch: {a.vocab_size} != {b.vocab_size}")
    return FrequencyTable(a.counts + b.counts)


def used_fraction(t: FrequencyTable) -> float:
    if t.vocab_size == 0:
        raise ValueError("vocab_size must be positive")
    return int(np.count_nonzero(t.counts)) / t.vocab_size


def ranked_ids(t: FrequencyTable) -> np.ndarray:
    """Ids with a nonzero count, most frequent first, ties by ascending id."""
    used = t.used()
    order = np.lexsort((used, -t.counts[used]))
    return used[order]


def coverage_curve(t: FrequencyTable) -> list[tuple[int, float]]:
    """Cumulative share of all occurrences held by the top-k pieces, k = 1..#used."""
    total = t.total
    if total == 0:
        raise ValueError("coverage of an empty table is undefined")
    cum = np.cumsum(t.counts[ranked_ids(t)])
    return [(k, int(c) / total) for k, c in enumerate(cum.tolist(), 1)]


def coverage_at(t: FrequencyTable, k: int) -> float:
    """Coverage of the top ``k`` pieces; saturates at 1.0 past the used count."""
    total = t.total
    if total == 0:
        raise ValueError("coverage of an empty table is undefined")
    top = t.counts[ranked_ids(t)[:k]]
    return int(top.sum()) / total


def pieces_for_coverage(t: FrequencyTable, fraction: float) -> int:
    """Smallest k whose top-k pieces cover at least ``fraction`` of all occurrences."""
    total = t.total
    if total == 0:
        raise ValueError("coverage of an empty table is undefined")
    cum = np.cumsum(t.counts[ranked_ids(t)])
    need = fraction * total
    return int(np.searchsorted(cum, need - 1e-9 * total, side="left")) + 1


def overlap(a: FrequencyTable, b: FrequencyTable) -> float:
    """Share of the pieces used by ``a`` that ``b`` also uses."""
    if a.vocab_size != b.vocab_size:
        raise ValueError(f"vocab_size mismatch: {a.vocab_size} != {b.vocab_size}")
    used_a = a.counts > 0
    n_a = int(used_a.sum())
    if n_a == 0:
        raise ValueError("first table uses no pieces")
    return int((used_a & (b.counts > 0)).sum()) / n_a


# -- TSV persistence ---------------------------------------------------------

_ESCAPES = str.maketrans({"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"})


def write_table(t: FrequencyTable, path: str | Path, texts: Sequence[str] | None = None) -> None:
    """Write ``piece_id<TAB>piece_text<TAB>count`` rows, most frequent first.

    The first line is ``# vocab_size=<V>\\ttotal=<N>``. Zero counts are omitted.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# vocab_size={t.vocab_size}\ttotal={t.total}\n")
        for i in ranked_ids(t).tolist():
            text = texts[i].translate(_ESCAPES) if texts is not None else ""
            fh.write(f"{i}\t{text}\t{int(t.counts[i])}\n")


def read_table(path: str | Path) -> FrequencyTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("# "):
            raise ValueError(f"{path}: missing table header")
        meta = dict(kv.split("=", 1) for kv in header[2:].split("\t"))
        vocab_size, total = int(meta["vocab_size"]), int(meta["total"])
        counts = np.zeros(vocab_size, dtype=np.int64)
        for line in fh:
            pid, _, count = line.rstrip("\n").split("\t")
            counts[int(pid)] = int(count)
    table = FrequencyTable(counts)
    if table.total != total:
        raise ValueError(f"{path}: header total {total} != sum of counts {table.total}")
    return table
