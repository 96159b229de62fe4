"""Unigram-LM segmentation over the pieces of a parsed SentencePiece model."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .spmodel import PieceKind, SpModel

__all__ = [
    "SPACE_MARKER",
    "DEFAULT_UNK_PENALTY",
    "Tokenizer",
    "build_tokenizer",
    "normalize",
    "encode",
    "decode",
    "segment",
]

SPACE_MARKER = "▁"
DEFAULT_UNK_PENALTY = 10.0

_MATCHABLE = frozenset({PieceKind.NORMAL, PieceKind.USER_DEFINED, PieceKind.BYTE})
_SPACES = re.compile(" +")


@dataclass(frozen=True)
class Tokenizer:
    """Immutable lookup tables for Viterbi segmentation.

    ``prefixes`` holds every proper prefix of every matchable piece so the
    inner loop can stop extending a candidate as soon as it leaves the trie.
    """

    vocab: dict[str, tuple[int, float]]
    texts: tuple[str, ...]
    unk_id: int
    unk_penalty: float
    min_score: float
    max_piece_len: int
    prefixes: frozenset[str] = field(repr=False)

    @property
    def unk_score(self) -> float:
        return self.min_score - self.unk_penalty

    def __len__(self) -> int:
        return len(self.texts)

    def lookup(self, text: str) -> tuple[int, float] | None:
        return self.vocab.get(text)


def build_tokenizer(model: SpModel, unk_penalty: float = DEFAULT_UNK_PENALTY) -> Tokenizer:
    """Index the scoreable pieces of ``model``.

    CONTROL and UNUSED pieces never match input text. If two pieces share a
    text, the lower id wins, as in the reference implementation.
    """
    if not model.pieces:
        raise ValueError("model has no pieces")
    unk_id = model.unk_id
    if unk_id is None:
        raise ValueError("model has no UNKNOWN piece")

    vocab: dict[str, tuple[int, float]] = {}
    prefixes: set[str] = set()
    for i, p in enumerate(model.pieces):
        if p.kind not in _MATCHABLE or not p.text or p.text in vocab:
            continue
        vocab[p.text] = (i, p.score)
        for k in range(1, len(p.text)):
            prefixes.add(p.text[:k])

    normal = [p.score for p in model.pieces if p.kind is PieceKind.NORMAL]
    min_score = min(normal) if normal else 0.0
    return Tokenizer(
        vocab=vocab,
        texts=tuple(p.text for p in model.pieces),
        unk_id=unk_id,
        unk_penalty=float(unk_penalty),
        min_score=min_score,
        max_piece_len=max((len(t) for t in vocab), default=1),
        prefixes=frozenset(prefixes),
    )


def normalize(text: str) -> str:
    """Apply the dummy-prefix and whitespace rules.

    Leading and trailing spaces are dropped, runs of interior spaces collapse
    to a single marker, and a marker is prepended to non-empty text.
    """
    text = _SPACES.sub(" ", text.strip(" "))
    if not text:
        return ""
    return SPACE_MARKER + text.replace(" ", SPACE_MARKER)


def segment(tok: Tokenizer, normalized: str) -> tuple[list[int], list[int], float]:
    """Viterbi over already-normalized text.

    Returns ``(ids, boundaries, score)`` where ``boundaries`` are the end
    offsets of each piece. A single-character unknown edge is available at
    every position not starting a one-character piece.

    The pass runs right to left: ``best[i]`` is the best segmentation of the
    suffix starting at ``i``. Ties on score prefer fewer pieces, then the
    smallest next boundary, which makes the chosen boundary list the
    lexicographically smallest among the optimal ones.
    """
    n = len(normalized)
    vocab, prefixes, max_len = tok.vocab, tok.prefixes, tok.max_piece_len
    unk_id, unk_score = tok.unk_id, tok.unk_score

    score = [0.0] * (n + 1)
    count = [0] * (n + 1)
    nxt = [n] * (n + 1)
    pid = [-1] * (n + 1)
    for i in range(n - 1, -1, -1):
        best_s = best_c = best_j = best_id = None
        single = False
        stop = min(n, i + max_len)
        for j in range(i + 1, stop + 1):
            sub = normalized[i:j]
            hit = vocab.get(sub)
            if hit is not None:
                if j == i + 1:
                    single = True
                s = hit[1] + score[j]
                c = count[j] + 1
                if best_s is None or s > best_s or (s == best_s and c < best_c):
                    best_s, best_c, best_j, best_id = s, c, j, hit[0]
            if sub not in prefixes:
                break
        if not single:
            s = unk_score + score[i + 1]
            c = count[i + 1] + 1
            if best_s is None or s > best_s or (s == best_s and (c < best_c or (c == best_c and i + 1 < best_j))):
                best_s, best_c, best_j, best_id = s, c, i + 1, unk_id
        score[i], count[i], nxt[i], pid[i] = best_s, best_c, best_j, best_id

    ids: list[int] = []
    bounds: list[int] = []
    i = 0
    while i < n:
        ids.append(pid[i])
        i = nxt[i]
        bounds.append(i)
    return ids, bounds, score[0]


def encode(tok: Tokenizer, text: str) -> list[int]:
    """Normalize ``text`` and return its highest-scoring piece ids."""
    normalized = normalize(text)
    if not normalized:
        return []
    return segment(tok, normalized)[0]


def encode_many(tok: Tokenizer, texts: Iterable[str]) -> list[list[int]]:
    return [encode(tok, t) for t in texts]


def decode(tok: Tokenizer, ids: Sequence[int]) -> str:
    """Concatenate piece texts and turn markers back into spaces."""
    n = len(tok.texts)
    parts = []
    for i in ids:
        if not 0 <= i < n:
            raise IndexError(f"piece id {i} out of range for {n} pieces")
        parts.append(tok.texts[i])
    text = "".join(parts).replace(SPACE_MARKER, " ")
    return text[1:] if text.startswith(" ") else text
