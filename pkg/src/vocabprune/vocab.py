"""Fixed-budget vocabulary selection and the parameter/size estimator."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import FrequencyTable, merge_tables, ranked_ids
from .spmodel import SpModel

__all__ = [
    "Group",
    "SelectionParams",
    "VocabPlan",
    "ModelDims",
    "ReductionEstimate",
    "default_specials",
    "top_k",
    "select_vocabulary",
    "predict_param_reduction",
    "MB",
]

log = logging.getLogger(__name__)

MB = 1_000_000
_EXTRA_ID = re.compile(r"<extra_id_(\d+)>")


class Group(str, enum.Enum):
    ORIGINAL_TOP = "ORIGINAL_TOP"
    SECONDARY = "SECONDARY"
    SPECIAL = "SPECIAL"
    TARGET = "TARGET"


def default_specials(n_sentinels: int = 100) -> list[str]:
    return ["<pad>", "</s>", "<unk>"] + [f"<extra_id_{i}>" for i in range(n_sentinels)]


@dataclass(frozen=True)
class SelectionParams:
    """Budget composition.

    ``top_original`` picks how the always-kept original pieces are chosen:
    ``"lowest_id"`` (the first ``n_top_original`` ids) or ``"frequency"``
    (the most frequent ids over both corpora combined).

    ``extra_ids`` enables the T5 sentinel convention for models whose
    ``<extra_id_N>`` tokens live past the end of the piece list: such a text,
    when it is not a piece, resolves to ``n_pieces + extra_ids - 1 - N``.
    """

    n_total: int = 30_000
    n_top_original: int = 1_000
    n_secondary: int = 10_000
    specials: tuple[str, ...] = field(default_factory=lambda: tuple(default_specials()))
    top_original: str = "lowest_id"
    extra_ids: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "specials", tuple(self.specials))
        if min(self.n_total, self.n_top_original, self.n_secondary, self.extra_ids) < 0:
            raise ValueError("selection sizes must be non-negative")
        if self.n_top_original + self.n_secondary + len(self.specials) > self.n_total:
            raise ValueError(
                f"n_top_original + n_secondary + |specials| = "
                f"{self.n_top_original + self.n_secondary + len(self.specials)} exceeds n_total {self.n_total}"
            )
        if self.top_original not in ("lowest_id", "frequency"):
            raise ValueError(f"unknown top_original mode {self.top_original!r}")


@dataclass(frozen=True)
class VocabPlan:
    """Kept ids in ascending old-id order; the list index is the new id."""

    new_to_old: tuple[int, ...]
    groups: tuple[Group, ...]
    v_old: int
    n_total: int
    pieces: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "new_to_old", tuple(int(i) for i in self.new_to_old))
        object.__setattr__(self, "groups", tuple(Group(g) for g in self.groups))
        object.__setattr__(self, "pieces", tuple(self.pieces))
        if len(self.groups) != len(self.new_to_old):
            raise ValueError("groups and new_to_old differ in length")
        prev = -1
        for old in self.new_to_old:
            if old <= prev:
                raise ValueError("new_to_old must be strictly increasing")
            prev = old
        if self.new_to_old and self.new_to_old[-1] >= self.v_old:
            raise ValueError(f"id {self.new_to_old[-1]} out of range for v_old {self.v_old}")

    @property
    def v_new(self) -> int:
        return len(self.new_to_old)

    @property
    def complete(self) -> bool:
        return self.v_new == self.n_total

    def group_counts(self) -> dict[str, int]:
        counts = {g.value: 0 for g in Group}
        for g in self.groups:
            counts[g.value] += 1
        return counts

    def old_to_new(self) -> dict[int, int]:
        return {old: new for new, old in enumerate(self.new_to_old)}

    def to_json(self) -> str:
        doc = {
            "n_total": self.n_total,
            "v_old": self.v_old,
            "v_new": self.v_new,
            "complete": self.complete,
            "group_counts": self.group_counts(),
            "new_to_old": list(self.new_to_old),
            "groups": [g.value for g in self.groups],
            "pieces": list(self.pieces),
        }
        return json.dumps(doc, ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> VocabPlan:
        doc = json.loads(text)
        return cls(
            new_to_old=doc["new_to_old"],
            groups=doc["groups"],
            v_old=doc["v_old"],
            n_total=doc["n_total"],
            pieces=doc.get("pieces", ()),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> VocabPlan:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def top_k(t: FrequencyTable, k: int) -> list[int]:
    if k < 0:
        raise ValueError("k must be non-negative")
    return ranked_ids(t)[:k].tolist()


def _resolve_special(text: str, model: SpModel, index: dict[str, int], extra_ids: int) -> int:
    if text in index:
        return index[text]
    m = _EXTRA_ID.fullmatch(text)
    if extra_ids and m and int(m.group(1)) < extra_ids:
        return len(model.pieces) + extra_ids - 1 - int(m.group(1))
    raise KeyError(f"special token {text!r} not found in model")


def select_vocabulary(
    params: SelectionParams,
    freq_target: FrequencyTable,
    freq_secondary: FrequencyTable,
    model: SpModel,
    v_old: int | None = None,
) -> VocabPlan:
    """Compose the kept vocabulary.

    Groups are claimed in priority order: original top ids, the secondary
    corpus's top ``n_secondary``, the special tokens, then target-corpus ids
    by descending count until the budget is filled. An id belongs to the
    first group that claimed it. If the candidates run out before
    ``n_total`` the plan is returned short, with ``complete`` false.

    ``v_old`` is the number of embedding rows; it defaults to the piece
    count plus any T5 extra ids and may exceed it (padded vocabularies).
    """
    n_pieces = len(model.pieces)
    if v_old is None:
        v_old = n_pieces + params.extra_ids
    if v_old < n_pieces + params.extra_ids:
        raise ValueError(f"v_old {v_old} is smaller than the tokenizer vocabulary")
    for name, t in (("target", freq_target), ("secondary", freq_secondary)):
        if t.vocab_size != n_pieces:
            raise ValueError(f"{name} table has vocab_size {t.vocab_size}, model has {n_pieces} pieces")

    index: dict[str, int] = {}
    for i, p in enumerate(model.pieces):
        index.setdefault(p.text, i)

    claimed: dict[int, Group] = {}

    def claim(ids: Sequence[int], group: Group) -> None:
        for i in ids:
            claimed.setdefault(int(i), group)

    if params.top_original == "lowest_id":
        claim(range(min(params.n_top_original, n_pieces)), Group.ORIGINAL_TOP)
    else:
        claim(top_k(merge_tables(freq_target, freq_secondary), params.n_top_original), Group.ORIGINAL_TOP)
    claim(top_k(freq_secondary, params.n_secondary), Group.SECONDARY)
    claim([_resolve_special(s, model, index, params.extra_ids) for s in params.specials], Group.SPECIAL)

    for i in ranked_ids(freq_target).tolist():
        if len(claimed) >= params.n_total:
            break
        claimed.setdefault(i, Group.TARGET)

    new_to_old = sorted(claimed)
    plan = VocabPlan(
        new_to_old=new_to_old,
        groups=[claimed[i] for i in new_to_old],
        v_old=v_old,
        n_total=params.n_total,
        pieces=[_piece_text(model, i, params.extra_ids) for i in new_to_old],
    )
    if not plan.complete:
        log.warning("budget unreachable: %d candidates for a budget of %d", plan.v_new, params.n_total)
    return plan


def _piece_text(model: SpModel, i: int, extra_ids: int) -> str:
    n = len(model.pieces)
    if i < n:
        return model.pieces[i].text
    if i < n + extra_ids:
        return f"<extra_id_{n + extra_ids - 1 - i}>"
    return ""


@dataclass(frozen=True)
class ModelDims:
    v_old: int
    d_model: int
    n_vocab_matrices: int
    total_params_old: int
    bytes_per_param: int = 4

    def __post_init__(self) -> None:
        for name in ("v_old", "d_model", "n_vocab_matrices", "total_params_old", "bytes_per_param"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ReductionEstimate:
    params_new: int
    params_removed: int
    bytes_old: int
    bytes_new: int
    reduction_fraction: float

    @property
    def params_old(self) -> int:
        return self.params_new + self.params_removed

    @property
    def param_fraction(self) -> float:
        return self.params_new / self.params_old


def predict_param_reduction(dims: ModelDims, v_new: int) -> ReductionEstimate:
    """Parameters and bytes left after cutting every vocabulary matrix to ``v_new`` rows."""
    if not 0 <= v_new <= dims.v_old:
        raise ValueError(f"v_new {v_new} must lie in [0, v_old={dims.v_old}]")
    removed = dims.n_vocab_matrices * (dims.v_old - v_new) * dims.d_model
    if removed > dims.total_params_old:
        raise ValueError("vocabulary matrices exceed the total parameter count")
    params_new = dims.total_params_old - removed
    bytes_old = dims.total_params_old * dims.bytes_per_param
    bytes_new = params_new * dims.bytes_per_param
    return ReductionEstimate(
        params_new=params_new,
        params_removed=removed,
        bytes_old=bytes_old,
        bytes_new=bytes_new,
        reduction_fraction=1.0 - bytes_new / bytes_old,
    )
