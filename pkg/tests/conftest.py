from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable

import pytest

import knowledge_tuning.prompts as pr
import knowledge_tuning.seed as seed
from knowledge_tuning.gateway import ScriptedBackend


def write_jsonl(path: Path, rows: Iterable[Dict[str, Any]]) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def templates() -> pr.PromptTemplates:
    return pr.load_templates()


@pytest.fixture
def toy_kb():
    return seed.build_toy_kb()


@pytest.fixture
def toy_dataset():
    return seed.build_toy_dataset()


@pytest.fixture
def toy_kb_path(tmp_path: Path) -> Path:
    rows = [{"entity": e, "attribute": a, "content": c} for e, a, c in seed.TOY_KNOWLEDGE]
    return write_jsonl(tmp_path / "toy_kb.jsonl", rows)


@pytest.fixture
def gold_backend(toy_dataset, templates) -> ScriptedBackend:
    return ScriptedBackend(seed.gold_script(toy_dataset, templates, include_datagen=True), source="gold")
