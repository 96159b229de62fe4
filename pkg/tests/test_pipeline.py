from __future__ import annotations

import dataclasses
import json
import sys

import pytest

from vocabprune.cli import main
from vocabprune.config import ConfigError, load_config
from vocabprune.pipeline import ARTIFACTS, STAMPS, Pipeline, StageError, run_pipeline
from vocabprune.spmodel import load_sp_model, save_sp_model
from vocabprune.surgery import read_tensor_index
from vocabprune.vocab import VocabPlan

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DETERMINISTIC = sorted(ARTIFACTS.values()) + [STAMPS]


@pytest.fixture
def toy_config(toy_dir):
    return toy_dir / "toy.toml"


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def toy_run(toy_config, out, *extra) -> int:
    return run_cli("pipeline", "-c", toy_config, "--output-dir", out, *extra)


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


# -- config ------------------------------------------------------------------


def test_toml_and_json_configs_agree(toy_config, toy_dir, tmp_path):
    a = load_config(toy_config, {"output_dir": tmp_path})
    doc = tomllib.loads(toy_config.read_text())
    doc["paths"] = {k: str(toy_dir / v) for k, v in doc["paths"].items()}
    (tmp_path / "toy.json").write_text(json.dumps(doc))
    b = load_config(tmp_path / "toy.json", {"output_dir": tmp_path})
    assert a == b
    assert a.tokenizer == toy_dir / "toy.model"
    assert a.selection.n_total == 29 and a.vocab_tensor_names == ("shared.weight", "lm_head.weight")


def test_flags_override_config(toy_config, tmp_path):
    cfg = load_config(toy_config, {"output_dir": tmp_path, "n_total": 28, "workers": 3, "specials": ("<unk>",)})
    assert (cfg.selection.n_total, cfg.workers, cfg.selection.specials) == (28, 3, ("<unk>",))


@pytest.mark.parametrize(
    "body, match",
    [
        ('[paths]\ntokenizer = "toy.model"\n', "target_corpus is required"),
        ('[paths]\ntokenizer = "toy.model"\ntarget_corpus = "t.txt"\noutput_dir = "o"\n[bogus]\n', "unknown config section"),
        ('[paths]\ntokenizer = "x"\ntarget_corpus = "y"\noutput_dir = "o"\n[selection]\nn_totl = 3\n', "unknown config key"),
        ('[paths]\ntokenizer = "x"\ntarget_corpus = "y"\noutput_dir = "o"\n[run]\nworkers = "2"\n', "wrong type"),
        ('[paths]\ntokenizer = "x"\ntarget_corpus = "y"\noutput_dir = "o"\n[selection]\nn_total = 2\n', "exceeds"),
        ("[paths\n", "cannot parse"),
    ],
)
def test_config_errors(tmp_path, body, match):
    p = tmp_path / "bad.toml"
    p.write_text(body)
    with pytest.raises(ConfigError, match=match):
        load_config(p, check_paths=False)


def test_missing_corpus_fails_before_any_artifact(toy_dir, tmp_path, capsys):
    out = tmp_path / "out"
    code = run_cli(
        "pipeline", "--tokenizer", toy_dir / "toy.model", "--target-corpus", tmp_path / "absent.txt",
        "--output-dir", out,
    )
    assert code == 3
    assert not out.exists()


# -- end to end --------------------------------------------------------------


def test_toy_pipeline(toy_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    printed = capsys.readouterr().out
    assert "verification  ok" in printed

    plan = VocabPlan.load(out / "plan.json")
    assert plan.complete and plan.v_new == 29 and plan.v_old == 32
    report = read_json(out / "report.json")
    assert report["verification"]["ok"]
    assert report["agreement"]["equal"]
    assert report["agreement"]["predicted_payload_bytes_removed"] == 2 * 3 * 4 * 4
    assert report["actual"]["size_law_holds"]
    assert report["verification"]["sample"]["unk_tokens"] == 0
    assert list(report) == sorted(report)

    pruned = load_sp_model(out / "spiece.model")
    assert len(pruned) == 29
    index = read_tensor_index(out / "model.safetensors")
    assert index["shared.weight"].shape == (29, 4) and index["lm_head.weight"].shape == (29, 4)


def test_two_runs_are_byte_identical(toy_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert toy_run(toy_config, a) == 0
    assert toy_run(toy_config, b, "--force") == 0
    for name in DETERMINISTIC:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_rerun_skips_and_force_reproduces(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    before = {n: ((out / n).stat().st_mtime_ns, (out / n).read_bytes()) for n in DETERMINISTIC}
    assert toy_run(toy_config, out) == 0
    assert {n: ((out / n).stat().st_mtime_ns, (out / n).read_bytes()) for n in DETERMINISTIC} == before
    assert all(t["skipped"] for t in read_json(out / "timings.json").values())
    assert toy_run(toy_config, out, "--force") == 0
    assert {n: (out / n).read_bytes() for n in DETERMINISTIC} == {n: v[1] for n, v in before.items()}


def test_changed_setting_reruns_downstream_only(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    tsv = (out / "target.tsv").stat().st_mtime_ns
    assert toy_run(toy_config, out, "--n-total", 28) == 0
    assert (out / "target.tsv").stat().st_mtime_ns == tsv
    assert VocabPlan.load(out / "plan.json").v_new == 28
    assert read_json(out / "report.json")["plan"]["v_new"] == 28


def test_report_stage_in_isolation(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    original = (out / "report.json").read_bytes()
    (out / "report.json").unlink()
    assert run_cli("report", "-c", toy_config, "--output-dir", out) == 0
    assert (out / "report.json").read_bytes() == original


def test_stage_needs_earlier_artifacts(toy_config, tmp_path):
    assert run_cli("select", "-c", toy_config, "--output-dir", tmp_path / "o") == 1


def test_stage_failure_keeps_prior_artifacts(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out, "--vocab-tensor-names", "missing.weight") == 1
    assert (out / "target.tsv").is_file() and (out / "stats.json").is_file()
    assert not (out / "plan.json").exists() and not (out / "report.json").exists()


def test_stage_error_names_stage(toy_config, tmp_path):
    cfg = load_config(toy_config, {"output_dir": tmp_path, "vocab_tensor_names": ("nope",)})
    with pytest.raises(StageError, match="stage select"):
        run_pipeline(cfg)


def test_corrupted_tokenizer_piece_is_one_mismatch(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    model = load_sp_model(out / "spiece.model")
    pieces = list(model.pieces)
    pieces[3] = dataclasses.replace(pieces[3], text=pieces[3].text + "x")
    save_sp_model(dataclasses.replace(model, pieces=tuple(pieces)), out / "spiece.model")

    assert run_cli("verify", "-c", toy_config, "--output-dir", out) == 2
    doc = read_json(out / "verify.json")
    assert not doc["ok"] and doc["tokenizer"]["mismatches"] == 1
    assert [(m["kind"], m["row"]) for m in doc["mismatches"]] == [("piece", 3)]
    assert run_cli("report", "-c", toy_config, "--output-dir", out) == 2
    assert read_json(out / "report.json")["verification"]["ok"] is False


def test_corrupted_checkpoint_fails_pipeline(toy_config, tmp_path):
    out = tmp_path / "run"
    assert toy_run(toy_config, out) == 0
    ckpt = out / "model.safetensors"
    index = read_tensor_index(ckpt)
    raw = bytearray(ckpt.read_bytes())
    raw[index.data_start + index["lm_head.weight"].data_offsets[0] + 17] ^= 0x40
    ckpt.write_bytes(bytes(raw))
    # Only verify and report see a changed input; the checkpoint itself is not rewritten.
    assert toy_run(toy_config, out) == 2
    mismatches = read_json(out / "verify.json")["mismatches"]
    assert [(m["kind"], m["tensor"], m["row"]) for m in mismatches] == [("row", "lm_head.weight", 1)]


def test_without_checkpoint(toy_config, tmp_path):
    cfg = load_config(toy_config, {"output_dir": tmp_path})
    cfg = dataclasses.replace(cfg, checkpoint=None)
    report = run_pipeline(cfg)
    assert report["actual"] is None and report["estimate"] is None
    assert report["verification"]["ok"] and report["verification"]["checkpoint"]["checked"] is False
    assert not (tmp_path / "model.safetensors").exists()


def test_parallel_counting_gives_identical_tables(toy_config, tmp_path):
    a = load_config(toy_config, {"output_dir": tmp_path / "a"})
    b = load_config(toy_config, {"output_dir": tmp_path / "b", "workers": 2})
    Pipeline(a).run(("analyze",))
    Pipeline(b).run(("analyze",))
    for name in ("target.tsv", "secondary.tsv", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_estimate_prints_headline_numbers(capsys, tmp_path):
    cfg = tmp_path / "dims.toml"
    cfg.write_text(
        "[selection]\nn_total = 30000\n[model.dims]\nv_old = 250112\nd_model = 768\n"
        "n_vocab_matrices = 2\ntotal_params_old = 582401280\nbytes_per_param = 4\n"
    )
    assert run_cli("estimate", "-c", cfg) == 0
    printed = capsys.readouterr().out
    assert "58%" in printed and "244.3 million" in printed and "42% of original" in printed


def test_estimate_needs_dims(capsys):
    assert run_cli("estimate", "--v-old", 10) == 3


def test_report_digest_ignores_output_location(toy_config, tmp_path):
    a = load_config(toy_config, {"output_dir": tmp_path / "a"})
    b = load_config(toy_config, {"output_dir": tmp_path / "b"})
    assert Pipeline(a).config_digest() == Pipeline(b).config_digest()
    c = load_config(toy_config, {"output_dir": tmp_path / "a", "n_total": 28})
    assert Pipeline(c).config_digest() != Pipeline(a).config_digest()
