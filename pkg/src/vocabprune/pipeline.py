"""Stage orchestration: analyze, select, prune the tokenizer and checkpoint, verify, report.

Every stage reads its inputs from files and writes its artifacts to the output
directory before the next stage starts. A stage is skipped when the digest of
its inputs matches the one recorded in ``.stamps.json`` and its outputs exist.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TextIO

from . import __version__
from .config import PipelineConfig
from .corpus import (
    FrequencyTable,
    count_frequencies,
    coverage_at,
    overlap,
    pieces_for_coverage,
    read_corpus,
    read_table,
    used_fraction,
    write_table,
)
from .spmodel import SpModel, load_sp_model, prune_pieces, save_sp_model
from .surgery import (
    Mismatch,
    SurgeryReport,
    VerifyResult,
    default_file_mode,
    file_sha256,
    prune_checkpoint,
    read_tensor_index,
    verify_checkpoint,
)
from .unigram import build_tokenizer, encode
from .vocab import MB, ModelDims, VocabPlan, predict_param_reduction, select_vocabulary

__all__ = [
    "STAGES",
    "ARTIFACTS",
    "StageError",
    "Pipeline",
    "run_pipeline",
    "verify_all",
    "emit_report",
    "format_summary",
    "estimate_summary",
]

log = logging.getLogger(__name__)

STAGES = ("analyze", "select", "prune-tokenizer", "prune-model", "verify", "report")
COVERAGE_MILESTONES = (1_000, 10_000, 20_000, 30_000)
COVERAGE_TARGETS = (0.95, 0.98)

ARTIFACTS = {
    "target_table": "target.tsv",
    "secondary_table": "secondary.tsv",
    "stats": "stats.json",
    "plan": "plan.json",
    "tokenizer": "spiece.model",
    "checkpoint": "model.safetensors",
    "surgery": "surgery.json",
    "verify": "verify.json",
    "report": "report.json",
}
STAMPS = ".stamps.json"
TIMINGS = "timings.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, artifact: Path | None, message: str) -> None:
        where = f" [{artifact}]" if artifact is not None else ""
        super().__init__(f"stage {stage}{where}: {message}")
        self.stage = stage
        self.artifact = artifact


def _dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _atomic_write(path: Path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        os.chmod(tmp, default_file_mode())
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _load_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


# -- corpus statistics -------------------------------------------------------


def corpus_stats(table: FrequencyTable, sentences: int, skipped: int) -> dict:
    doc: dict[str, Any] = {
        "sentences": sentences,
        "skipped_lines": skipped,
        "tokens": table.total,
        "pieces_used": int((table.counts > 0).sum()),
        "used_fraction": used_fraction(table),
    }
    if table.total:
        doc["coverage"] = {str(k): coverage_at(table, k) for k in COVERAGE_MILESTONES}
        doc["pieces_for_coverage"] = {str(f): pieces_for_coverage(table, f) for f in COVERAGE_TARGETS}
    return doc


def _count_corpus(tok, path: Path, workers: int) -> tuple[FrequencyTable, int, int]:
    reader = read_corpus(path)
    n = 0

    def counted():
        nonlocal n
        for s in reader:
            n += 1
            yield s

    table = count_frequencies(tok, counted(), workers=workers)
    return table, n, reader.skipped


# -- model dimensions --------------------------------------------------------


def checkpoint_dims(path: Path, names: tuple[str, ...], axis: int) -> ModelDims:
    """Read the estimator inputs off a checkpoint header."""
    index = read_tensor_index(path)
    if not names:
        raise ValueError("no vocabulary tensors configured")
    for n in names:
        if n not in index:
            raise KeyError(f"vocabulary tensor {n!r} not in checkpoint")
    first = index[names[0]]
    if axis >= len(first.shape):
        raise ValueError(f"tensor {first.name!r} has no axis {axis}")
    v_old = first.shape[axis]
    d_model = first.numel // v_old if v_old else 0
    for n in names[1:]:
        m = index[n]
        if axis >= len(m.shape) or m.shape[axis] != v_old or m.numel != first.numel or m.width != first.width:
            raise ValueError(f"vocabulary tensors {first.name!r} and {n!r} disagree in layout")
    return ModelDims(
        v_old=v_old,
        d_model=d_model,
        n_vocab_matrices=len(names),
        total_params_old=sum(m.numel for m in index.metas),
        bytes_per_param=first.width,
    )


# -- verification ------------------------------------------------------------


@dataclass
class FullVerification:
    result: VerifyResult = field(default_factory=VerifyResult)
    pieces_checked: int = 0
    tokenizer_mismatches: int = 0
    checkpoint_mismatches: int | None = None
    sample: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.result.ok

    def to_dict(self) -> dict:
        doc = self.result.to_dict()
        doc["tokenizer"] = {"pieces_checked": self.pieces_checked, "mismatches": self.tokenizer_mismatches}
        doc["checkpoint"] = {
            "checked": self.checkpoint_mismatches is not None,
            "mismatches": self.checkpoint_mismatches,
        }
        doc["sample"] = self.sample
        return doc


def check_tokenizer(original: SpModel, pruned: SpModel, plan: VocabPlan) -> list[Mismatch]:
    """Kept pieces must match the original text, score bits and kind under the id map."""
    expected = [old for old in plan.new_to_old if old < len(original.pieces)]
    out: list[Mismatch] = []
    if len(pruned.pieces) != len(expected):
        out.append(Mismatch("piece count", "tokenizer", detail=f"{len(pruned.pieces)} != {len(expected)}"))
    for new, old in enumerate(expected[: len(pruned.pieces)]):
        a, b = original.pieces[old], pruned.pieces[new]
        diffs = [
            name for name, same in (
                ("text", a.text == b.text),
                ("score", a.score_bytes == b.score_bytes),
                ("kind", a.kind == b.kind),
            ) if not same
        ]
        if diffs:
            out.append(Mismatch("piece", "tokenizer", row=new, detail=f"old id {old}: {', '.join(diffs)} differ"))
    return out


def sample_stats(original: SpModel, pruned: SpModel, plan: VocabPlan, sample: Path, unk_penalty: float):
    """Encode ``sample`` with both tokenizers; returns (stats, out-of-range mismatches)."""
    tok_new = build_tokenizer(pruned, unk_penalty)
    tok_old = build_tokenizer(original, unk_penalty)
    kept = set(plan.new_to_old)
    sentences = tokens = unk = old_tokens = dropped = 0
    bad: set[int] = set()
    for s in read_corpus(sample):
        sentences += 1
        ids = encode(tok_new, s)
        tokens += len(ids)
        unk += sum(1 for i in ids if i == tok_new.unk_id)
        bad.update(i for i in ids if not 0 <= i < len(pruned.pieces))
        old_ids = encode(tok_old, s)
        old_tokens += len(old_ids)
        dropped += sum(1 for i in old_ids if i not in kept)
    stats = {
        "sentences": sentences,
        "tokens": tokens,
        "unk_tokens": unk,
        "unk_rate": unk / tokens if tokens else 0.0,
        "original_tokens": old_tokens,
        "dropped_tokens": dropped,
        "dropped_rate": dropped / old_tokens if old_tokens else 0.0,
    }
    mismatches = [Mismatch("sample id", "tokenizer", row=i, detail="id outside the pruned vocabulary") for i in sorted(bad)]
    return stats, mismatches


def verify_all(cfg: PipelineConfig) -> FullVerification:
    """Check the persisted pruned tokenizer and checkpoint against their sources."""
    out = cfg.output_dir
    plan_path = out / ARTIFACTS["plan"]
    tok_path = out / ARTIFACTS["tokenizer"]
    for p in (plan_path, tok_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing artifact {p}")
    plan = VocabPlan.load(plan_path)
    original = load_sp_model(cfg.tokenizer)
    pruned = load_sp_model(tok_path)

    v = FullVerification()
    tok_mm = check_tokenizer(original, pruned, plan)
    v.pieces_checked = min(len(pruned.pieces), sum(1 for i in plan.new_to_old if i < len(original.pieces)))
    v.sample, sample_mm = sample_stats(original, pruned, plan, cfg.sample_path, cfg.unk_penalty)
    v.tokenizer_mismatches = len(tok_mm) + len(sample_mm)
    v.result.mismatches.extend(tok_mm + sample_mm)

    if cfg.checkpoint is not None:
        ckpt = out / ARTIFACTS["checkpoint"]
        if not ckpt.is_file():
            raise FileNotFoundError(f"missing artifact {ckpt}")
        r = verify_checkpoint(cfg.checkpoint, ckpt, plan, cfg.vocab_tensor_names, axis=cfg.vocab_axis)
        v.checkpoint_mismatches = len(r.mismatches)
        v.result.extend(r)
    return v


# -- report ------------------------------------------------------------------


def _estimate_doc(dims: ModelDims, v_new: int) -> dict:
    e = predict_param_reduction(dims, v_new)
    return {
        "dims": {
            "v_old": dims.v_old,
            "d_model": dims.d_model,
            "n_vocab_matrices": dims.n_vocab_matrices,
            "total_params_old": dims.total_params_old,
            "bytes_per_param": dims.bytes_per_param,
        },
        "v_new": v_new,
        "params_old": e.params_old,
        "params_new": e.params_new,
        "params_removed": e.params_removed,
        "param_fraction": e.param_fraction,
        "bytes_old": e.bytes_old,
        "bytes_new": e.bytes_new,
        "bytes_removed": e.bytes_old - e.bytes_new,
        "reduction_fraction": e.reduction_fraction,
    }


def estimate_summary(dims: ModelDims, v_new: int) -> str:
    return format_summary({"estimate": _estimate_doc(dims, v_new)})


def _count(n: int) -> str:
    return f"{n / 1e6:.1f} million" if n >= 1_000_000 else f"{n:,}"


def _bytes(n: int) -> str:
    return f"{n / MB:.1f} MB" if n >= MB else f"{n:,} bytes"


def format_summary(report: dict) -> str:
    lines = []
    est = report.get("estimate")
    plan = report.get("plan")
    if plan:
        lines.append(
            f"vocabulary    {plan['v_old']:,} -> {plan['v_new']:,} entries "
            f"({plan['v_new'] / plan['v_old']:.1%} kept, budget {'met' if plan['complete'] else 'NOT met'})"
        )
        groups = ", ".join(f"{k} {v:,}" for k, v in plan["group_counts"].items())
        lines.append(f"composition   {groups}")
    elif est:
        lines.append(f"vocabulary    {est['dims']['v_old']:,} -> {est['v_new']:,} entries")
    if est:
        lines.append(
            f"parameters    {_count(est['params_old'])} -> {_count(est['params_new'])} "
            f"({est['param_fraction']:.0%} of original)"
        )
        lines.append(
            f"model size    {_bytes(est['bytes_old'])} -> {_bytes(est['bytes_new'])} "
            f"({est['reduction_fraction']:.0%} reduction)"
        )
    actual = report.get("actual")
    if actual:
        lines.append(
            f"checkpoint    {_bytes(actual['bytes_old'])} -> {_bytes(actual['bytes_new'])} on disk "
            f"({(actual['bytes_new'] - actual['bytes_old']) / actual['bytes_old']:+.1%}, header included)"
        )
    agreement = report.get("agreement")
    if agreement:
        lines.append(
            f"agreement     predicted {agreement['predicted_payload_bytes_removed']:,} vs actual "
            f"{agreement['actual_payload_bytes_removed']:,} payload bytes removed "
            f"({'exact' if agreement['equal'] else 'DIFFERENT'})"
        )
    corpus = report.get("corpus") or {}
    for name in ("target", "secondary"):
        doc = corpus.get(name)
        if not doc:
            continue
        cov = doc.get("coverage", {})
        lines.append(
            f"{name:<13} {doc['sentences']:,} sentences, {doc['tokens']:,} tokens, "
            f"{doc['used_fraction']:.1%} of vocabulary used, top-20K coverage {cov.get('20000', 0.0):.1%}"
        )
    ov = corpus.get("overlap")
    if ov:
        lines.append(
            f"overlap       target in secondary {ov['target_in_secondary']:.1%}, "
            f"secondary in target {ov['secondary_in_target']:.1%}"
        )
    ver = report.get("verification")
    if ver is not None:
        lines.append(f"verification  {'ok' if ver['ok'] else 'FAILED'} ({ver['mismatches']} mismatches)")
    return "\n".join(lines) + "\n"


def emit_report(report: dict, path: Path | None, stream: TextIO | None = sys.stdout) -> None:
    """Write the report as sorted-key JSON and print the summary."""
    if path is not None:
        _atomic_write(Path(path), _dumps(report))
    if stream is not None:
        stream.write(format_summary(report))


# -- orchestration -----------------------------------------------------------


@dataclass
class Stage:
    name: str
    inputs: Callable[[], dict[str, Path]]
    params: Callable[[], dict]
    outputs: Callable[[], list[Path]]
    body: Callable[[], None]


class Pipeline:
    def __init__(self, cfg: PipelineConfig, force: bool = False) -> None:
        self.cfg = cfg
        self.force = force
        self._digests: dict[tuple, str] = {}
        self._model: SpModel | None = None
        self.timings: dict[str, dict] = {}
        self.stages = {
            "analyze": Stage("analyze", self._in_analyze, self._p_analyze, self._out_analyze, self._analyze),
            "select": Stage("select", self._in_select, self._p_select, self._out("plan"), self._select),
            "prune-tokenizer": Stage("prune-tokenizer", self._in_prune_tok, dict, self._out("tokenizer"), self._prune_tok),
            "prune-model": Stage("prune-model", self._in_prune_model, self._p_model, self._out_prune_model, self._prune_model),
            "verify": Stage("verify", self._in_verify, self._p_verify, self._out("verify"), self._verify),
            "report": Stage("report", self._in_report, self._p_report, self._out("report"), self._report),
        }

    # helpers
    def path(self, key: str) -> Path:
        return self.cfg.output_dir / ARTIFACTS[key]

    def _out(self, *keys: str) -> Callable[[], list[Path]]:
        return lambda: [self.path(k) for k in keys]

    def digest(self, path: Path) -> str:
        st = path.stat()
        key = (str(path.resolve()), st.st_size, st.st_mtime_ns)
        if key not in self._digests:
            self._digests[key] = file_sha256(path)
        return self._digests[key]

    @property
    def model(self) -> SpModel:
        if self._model is None:
            self._model = load_sp_model(self.cfg.tokenizer)
        return self._model

    def config_digest(self) -> str:
        return self.cfg.digest({k: self.digest(p) for k, p in self.cfg.input_paths().items()})

    def _require(self, stage: str, *paths: Path) -> None:
        for p in paths:
            if not p.is_file():
                raise StageError(stage, p, "missing artifact; run the earlier stages first")

    # stamps
    def _stamps(self) -> dict:
        p = self.cfg.output_dir / STAMPS
        try:
            return _load_json(p)
        except (FileNotFoundError, ValueError):
            return {}

    def _stage_digest(self, stage: Stage) -> str:
        inputs = stage.inputs()
        self._require(stage.name, *inputs.values())
        doc = {
            "stage": stage.name,
            "version": __version__,
            "inputs": {k: self.digest(p) for k, p in sorted(inputs.items())},
            "params": stage.params(),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def run_stage(self, name: str) -> bool:
        """Run one stage unless it is up to date; returns whether it ran."""
        stage = self.stages[name]
        self.cfg.output_dir.mkdir(parents=True, exist_ok=True)
        outputs = stage.outputs()
        try:
            stamp = self._stage_digest(stage)
            if not self.force and self._stamps().get(name) == stamp and all(p.is_file() for p in outputs):
                log.info("%s: up to date", name)
                self.timings[name] = {"seconds": 0.0, "skipped": True}
                return False
            log.info("%s: running", name)
            t0 = time.perf_counter()
            stage.body()
        except StageError:
            raise
        except Exception as exc:
            artifact = outputs[0] if outputs else None
            raise StageError(name, artifact, f"{type(exc).__name__}: {exc}") from exc
        self.timings[name] = {"seconds": round(time.perf_counter() - t0, 6), "skipped": False}
        stamps = self._stamps()
        stamps[name] = stamp
        _atomic_write(self.cfg.output_dir / STAMPS, _dumps(stamps))
        return True

    def write_timings(self) -> None:
        p = self.cfg.output_dir / TIMINGS
        try:
            doc = _load_json(p)
        except (FileNotFoundError, ValueError):
            doc = {}
        doc.update(self.timings)
        _atomic_write(p, _dumps(doc))

    def run(self, stages: tuple[str, ...] = STAGES) -> None:
        try:
            for name in stages:
                self.run_stage(name)
        finally:
            if self.timings:
                self.write_timings()

    # analyze
    def _in_analyze(self) -> dict[str, Path]:
        d = {"tokenizer": self.cfg.tokenizer, "target_corpus": self.cfg.target_corpus}
        if self.cfg.secondary_corpus is not None:
            d["secondary_corpus"] = self.cfg.secondary_corpus
        return d

    def _p_analyze(self) -> dict:
        return {"unk_penalty": self.cfg.unk_penalty}

    def _out_analyze(self) -> list[Path]:
        return [self.path("target_table"), self.path("secondary_table"), self.path("stats")]

    def _analyze(self) -> None:
        cfg = self.cfg
        tok = build_tokenizer(self.model, cfg.unk_penalty)
        texts = [p.text for p in self.model.pieces]
        target, n_t, skip_t = _count_corpus(tok, cfg.target_corpus, cfg.workers)
        stats: dict[str, Any] = {"vocab_size": len(texts), "target": corpus_stats(target, n_t, skip_t)}
        if cfg.secondary_corpus is not None:
            secondary, n_s, skip_s = _count_corpus(tok, cfg.secondary_corpus, cfg.workers)
            stats["secondary"] = corpus_stats(secondary, n_s, skip_s)
            if target.total and secondary.total:
                stats["overlap"] = {
                    "target_in_secondary": overlap(target, secondary),
                    "secondary_in_target": overlap(secondary, target),
                }
        else:
            secondary = FrequencyTable.empty(len(texts))
            stats["secondary"] = None
        write_table(target, self.path("target_table"), texts)
        write_table(secondary, self.path("secondary_table"), texts)
        _atomic_write(self.path("stats"), _dumps(stats))

    # select
    def _in_select(self) -> dict[str, Path]:
        return {
            "tokenizer": self.cfg.tokenizer,
            "target_table": self.path("target_table"),
            "secondary_table": self.path("secondary_table"),
        }

    def _v_old(self) -> int | None:
        cfg = self.cfg
        if cfg.checkpoint is not None:
            return checkpoint_dims(cfg.checkpoint, cfg.vocab_tensor_names, cfg.vocab_axis).v_old
        return cfg.dims.get("v_old")

    def _p_select(self) -> dict:
        return {"selection": self.cfg.settings()["selection"], "v_old": self._v_old()}

    def _select(self) -> None:
        target = read_table(self.path("target_table"))
        secondary = read_table(self.path("secondary_table"))
        plan = select_vocabulary(self.cfg.selection, target, secondary, self.model, v_old=self._v_old())
        _atomic_write(self.path("plan"), plan.to_json())

    # prune-tokenizer
    def _in_prune_tok(self) -> dict[str, Path]:
        return {"tokenizer": self.cfg.tokenizer, "plan": self.path("plan")}

    def _prune_tok(self) -> None:
        plan = VocabPlan.load(self.path("plan"))
        keep = [i for i in plan.new_to_old if i < len(self.model.pieces)]
        dropped = plan.v_new - len(keep)
        if dropped:
            log.info("prune-tokenizer: %d kept id(s) have no tokenizer piece (reserved rows)", dropped)
        pruned = prune_pieces(self.model, keep)
        dst = self.path("tokenizer")
        save_sp_model(pruned, dst)

    # prune-model
    def _in_prune_model(self) -> dict[str, Path]:
        d = {"plan": self.path("plan")}
        if self.cfg.checkpoint is not None:
            d["checkpoint"] = self.cfg.checkpoint
        return d

    def _p_model(self) -> dict:
        return {"vocab_tensor_names": list(self.cfg.vocab_tensor_names), "vocab_axis": self.cfg.vocab_axis}

    def _out_prune_model(self) -> list[Path]:
        if self.cfg.checkpoint is None:
            return []
        return [self.path("checkpoint"), self.path("surgery")]

    def _prune_model(self) -> None:
        cfg = self.cfg
        if cfg.checkpoint is None:
            log.info("prune-model: no checkpoint configured, nothing to do")
            return
        plan = VocabPlan.load(self.path("plan"))
        report = prune_checkpoint(cfg.checkpoint, self.path("checkpoint"), plan, cfg.vocab_tensor_names, cfg.vocab_axis)
        if not report.size_law_holds:
            raise RuntimeError("size law violated by the rewritten checkpoint")
        _atomic_write(self.path("surgery"), _dumps(report.to_dict()))

    # verify
    def _in_verify(self) -> dict[str, Path]:
        d = {
            "tokenizer": self.cfg.tokenizer,
            "pruned_tokenizer": self.path("tokenizer"),
            "plan": self.path("plan"),
            "sample": self.cfg.sample_path,
        }
        if self.cfg.checkpoint is not None:
            d["checkpoint"] = self.cfg.checkpoint
            d["pruned_checkpoint"] = self.path("checkpoint")
        return d

    def _p_verify(self) -> dict:
        return {**self._p_model(), "unk_penalty": self.cfg.unk_penalty}

    def _verify(self) -> None:
        result = verify_all(self.cfg)
        _atomic_write(self.path("verify"), _dumps(result.to_dict()))
        for m in result.result.mismatches[:20]:
            log.error("verify: %s", m)

    # report
    def _in_report(self) -> dict[str, Path]:
        d = {"stats": self.path("stats"), "plan": self.path("plan"), "verify": self.path("verify")}
        if self.cfg.checkpoint is not None:
            d["surgery"] = self.path("surgery")
            d["pruned_checkpoint"] = self.path("checkpoint")
        return d

    def _p_report(self) -> dict:
        return {"config_digest": self.config_digest(), "dims": dict(sorted(self.cfg.dims.items()))}

    def build_report(self) -> dict:
        cfg = self.cfg
        stats = _load_json(self.path("stats"))
        plan = VocabPlan.load(self.path("plan"))
        verification = _load_json(self.path("verify"))

        dims: ModelDims | None
        if cfg.checkpoint is not None:
            base = checkpoint_dims(cfg.checkpoint, cfg.vocab_tensor_names, cfg.vocab_axis)
            fields = {k: getattr(base, k) for k in ModelDims.__dataclass_fields__}
            fields.update(cfg.dims)
            dims = ModelDims(**fields)
        else:
            dims = cfg.full_dims()

        report: dict[str, Any] = {
            "version": __version__,
            "config_digest": self.config_digest(),
            "corpus": {
                "vocab_size": stats["vocab_size"],
                "target": stats["target"],
                "secondary": stats["secondary"],
                "overlap": stats.get("overlap"),
            },
            "plan": {
                "v_old": plan.v_old,
                "v_new": plan.v_new,
                "n_total": plan.n_total,
                "complete": plan.complete,
                "group_counts": plan.group_counts(),
                "sha256": self.digest(self.path("plan")),
            },
            "estimate": _estimate_doc(dims, plan.v_new) if dims is not None and dims.v_old >= plan.v_new else None,
            "actual": None,
            "agreement": None,
            "verification": {
                "ok": verification["ok"],
                "mismatches": len(verification["mismatches"]),
                "tokenizer": verification["tokenizer"],
                "checkpoint": verification["checkpoint"],
                "sample": verification["sample"],
            },
            "timings": TIMINGS,
        }
        if cfg.checkpoint is not None:
            surgery = SurgeryReport.from_dict(_load_json(self.path("surgery")))
            src_index = read_tensor_index(cfg.checkpoint)
            dst_index = read_tensor_index(self.path("checkpoint"))
            actual = surgery.to_dict()
            actual["params_old"] = sum(m.numel for m in src_index.metas)
            actual["params_new"] = sum(m.numel for m in dst_index.metas)
            actual["sha256"] = self.digest(self.path("checkpoint"))
            report["actual"] = actual
            if report["estimate"] is not None:
                predicted = report["estimate"]["bytes_removed"]
                report["agreement"] = {
                    "predicted_payload_bytes_removed": predicted,
                    "actual_payload_bytes_removed": surgery.payload_bytes_removed,
                    "equal": predicted == surgery.payload_bytes_removed,
                    "predicted_params_removed": report["estimate"]["params_removed"],
                    "actual_params_removed": actual["params_old"] - actual["params_new"],
                }
        return report

    def _report(self) -> None:
        emit_report(self.build_report(), self.path("report"), stream=None)


def run_pipeline(cfg: PipelineConfig, force: bool = False, stages: tuple[str, ...] = STAGES) -> dict | None:
    """Run ``stages`` in order and return the report document if one exists."""
    pipe = Pipeline(cfg, force=force)
    pipe.run(stages)
    report = cfg.output_dir / ARTIFACTS["report"]
    return _load_json(report) if report.is_file() else None


def verification_ok(cfg: PipelineConfig) -> bool | None:
    p = cfg.output_dir / ARTIFACTS["verify"]
    if not p.is_file():
        return None
    return bool(_load_json(p)["ok"])
