from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterator, List

import pytest

import knowledge_tuning.datagen as dg
import knowledge_tuning.retrieval as rt
import knowledge_tuning.seed as seed
from knowledge_tuning.cli import main

from conftest import write_jsonl


def _run(capsys: pytest.CaptureFixture, argv: List[str]) -> dict:
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


@pytest.fixture(autouse=True)
def _reset_package_logger() -> Iterator[None]:
    yield
    root = logging.getLogger("knowledge_tuning")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.propagate = True


@pytest.fixture
def script_path(tmp_path: Path, toy_dataset, templates) -> Path:
    table = seed.gold_script(toy_dataset, templates, include_datagen=True)
    return write_jsonl(tmp_path / "script.jsonl", seed.script_records(table))


def test_kb_build_writes_snapshot_and_manifest(capsys, toy_kb_path: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"
    result = _run(capsys, ["kb", "build", "--in", str(toy_kb_path), "--out", str(out / "kb.idx"), "--out-dir", str(out)])

    assert result["instances"] == 3
    kb, bm25, dense = rt.load_snapshot(out / "kb.idx")
    assert len(kb) == 3 and bm25 is not None and dense is not None

    manifest = json.loads((out / "manifest_kb_build.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "kb build"
    assert manifest["inputs"][0]["path"] == str(toy_kb_path)
    assert len(manifest["inputs"][0]["sha256"]) == 64


def test_kb_lookup_hit_and_miss(capsys, toy_kb_path: Path, tmp_path: Path) -> None:
    common = ["--kb", str(toy_kb_path), "--out-dir", str(tmp_path)]
    hit = _run(capsys, ["kb", "lookup", "--entity", "Gastric Cancer", "--attribute", "symptom", *common])
    assert hit["hit"] is True
    assert hit["content"] == seed.TOY_KNOWLEDGE[2][2]

    miss = _run(capsys, ["kb", "lookup", "--entity", "gastric cancer", "--attribute", "treatment", *common])
    assert miss == {"entity": "gastric cancer", "attribute": "treatment", "hit": False, "content": None}


def test_retrieve_bm25_from_snapshot(capsys, toy_kb_path: Path, tmp_path: Path) -> None:
    index = tmp_path / "kb.idx"
    _run(capsys, ["kb", "build", "--in", str(toy_kb_path), "--out", str(index), "--out-dir", str(tmp_path)])
    result = _run(capsys, ["retrieve", "bm25", "--kb", str(index), "--query", "pyloric obstruction", "-k", "1",
                           "--out-dir", str(tmp_path)])
    assert [hit["id"] for hit in result["results"]] == [1]


def test_usage_errors_exit_one(toy_kb_path: Path, tmp_path: Path) -> None:
    assert main(["kb", "lookup", "--kb", str(toy_kb_path), "--bogus"]) == 1
    assert main(["infer", "--kb", str(toy_kb_path), "--query", "q?", "--out-dir", str(tmp_path)]) == 1
    assert main(["infer", "--kb", str(toy_kb_path), "--query", "q?", "--backend", "scripted",
                 "--out-dir", str(tmp_path)]) == 1


def test_bad_kb_exits_two(tmp_path: Path) -> None:
    row = {"entity": "gastric cancer", "attribute": "symptom", "content": "x"}
    bad = write_jsonl(tmp_path / "dup.jsonl", [row, row])
    assert main(["kb", "lookup", "--kb", str(bad), "--entity", "a", "--attribute", "b", "--out-dir", str(tmp_path)]) == 2


def test_unusable_paths_exit_two(toy_kb_path: Path, script_path: Path, tmp_path: Path) -> None:
    missing_templates = ["infer", "--kb", str(toy_kb_path), "--query", "q?", "--backend", "scripted",
                         "--script", str(script_path), "--templates", str(tmp_path / "nope.yaml"),
                         "--out-dir", str(tmp_path)]
    assert main(missing_templates) == 2

    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    unwritable = ["kb", "build", "--in", str(toy_kb_path), "--out", str(blocker / "kb.idx"), "--out-dir", str(tmp_path)]
    assert main(unwritable) == 2


def test_infer_single_query(capsys, toy_kb_path: Path, script_path: Path, tmp_path: Path) -> None:
    question = seed.TOY_QA[2][0]
    result = _run(capsys, ["infer", "--kb", str(toy_kb_path), "--query", question, "--backend", "scripted",
                           "--script", str(script_path), "--out-dir", str(tmp_path)])
    assert result["grounded"] is True
    assert result["response"] == seed.TOY_QA[2][1]
    assert [p["tag"] for p in result["trace"]["prompts"]] == ["entity", "attribute", "response_k"]


def test_script_miss_exits_three(toy_kb_path: Path, script_path: Path, tmp_path: Path) -> None:
    argv = ["infer", "--kb", str(toy_kb_path), "--query", "Is this scripted?", "--backend", "scripted",
            "--script", str(script_path), "--out-dir", str(tmp_path)]
    assert main(argv) == 3


def _pipeline(capsys, kb: Path, out: Path, backend: List[str]) -> bytes:
    common = ["--out-dir", str(out), *backend]
    _run(capsys, ["datagen", "generate", "--kb", str(kb), *common])
    _run(capsys, ["infer", "--kb", str(kb), "--queries", str(out / "dataset.jsonl"), *common])
    report = _run(capsys, ["eval", "report", "--responses", str(out / "responses.jsonl"),
                           "--gold", str(out / "dataset.jsonl"), "--judge", *common])
    assert report["knowledge_accuracy"] == 1.0
    assert report["judge"]["mean"] == 3.0
    return (out / "report.json").read_bytes()


def test_record_then_replay_reproduces_report(capsys, toy_kb_path: Path, script_path: Path, tmp_path: Path,
                                              toy_dataset) -> None:
    cache = tmp_path / "cache.jsonl"
    recorded = _pipeline(capsys, toy_kb_path, tmp_path / "record",
                         ["--backend", "replay", "--cache", str(cache), "--record-from", "scripted",
                          "--script", str(script_path)])
    assert dg.load_dataset(tmp_path / "record" / "dataset.jsonl") == toy_dataset

    replayed = _pipeline(capsys, toy_kb_path, tmp_path / "replay", ["--backend", "replay", "--cache", str(cache)])
    assert replayed == recorded

    manifest = json.loads((tmp_path / "replay" / "manifest_eval_report.json").read_text(encoding="utf-8"))
    assert manifest["backend"] == {"kind": "replay", "cache": str(cache), "mode": "replay"}


def test_json_logs_go_to_stderr(capsys, toy_kb_path: Path, tmp_path: Path) -> None:
    argv = ["kb", "build", "--in", str(toy_kb_path), "--out", str(tmp_path / "kb.idx"), "--no-dense",
            "--out-dir", str(tmp_path), "--json-logs"]
    assert main(argv) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["dense"] == 0
    records = [json.loads(line) for line in captured.err.splitlines() if line.strip()]
    assert records and all({"ts", "level", "logger", "message"} <= set(r) for r in records)
