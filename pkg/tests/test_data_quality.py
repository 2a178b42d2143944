from __future__ import annotations

from pathlib import Path

import pandas as pd
import pytest

import knowledge_tuning.data_quality as dq
from knowledge_tuning.errors import DataError

from conftest import write_jsonl


def test_validate_table_reports_file_lines() -> None:
    df = pd.DataFrame(
        {
            "rater_id": ["r1", "r1"],
            "item_id": ["0", "1"],
            "helpfulness": [3.0, 4.0],
            "harmlessness": [3.0, 3.0],
            "line": [2, 3],
        }
    )
    with pytest.raises(DataError, match="line 3: helpfulness"):
        dq.validate_table(df, "ratings")


def test_training_records_schema_is_strict() -> None:
    row = {"loss_component": "entity", "prompt": "p", "target": "t", "source_id": "0-0"}
    dq.validate_table(pd.DataFrame([row]), "training_records")
    with pytest.raises(DataError):
        dq.validate_table(pd.DataFrame([{**row, "extra": 1}]), "training_records")
    with pytest.raises(DataError):
        dq.validate_table(pd.DataFrame([{**row, "loss_component": "summary"}]), "training_records")


def test_assert_unique_names_duplicate_line() -> None:
    df = pd.DataFrame({"entity": ["a", "b", "a"], "line": [1, 2, 3]})
    dq.assert_unique(df.iloc[:2], "kb", ["entity"], "entity")
    with pytest.raises(DataError, match="line 3"):
        dq.assert_unique(df, "kb", ["entity"], "entity")


def test_iter_jsonl_skips_blank_lines_and_rejects_non_objects(tmp_path: Path) -> None:
    path = tmp_path / "rows.jsonl"
    path.write_text('{"a": 1}\n\n{"a": 2}\n', encoding="utf-8")
    assert list(dq.iter_jsonl(path)) == [(1, {"a": 1}), (3, {"a": 2})]

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"a": 1}\n[1, 2]\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        list(dq.iter_jsonl(bad))


def test_load_table_by_suffix(tmp_path: Path) -> None:
    rows = [{"entity": "gastric cancer", "attribute": "symptom"}]
    assert dq.load_table(write_jsonl(tmp_path / "t.jsonl", rows)).to_dict("records") == rows

    csv_path = tmp_path / "t.csv"
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    assert dq.load_table(csv_path).to_dict("records") == rows

    with pytest.raises(DataError, match="Unsupported"):
        dq.load_table(write_jsonl(tmp_path / "t.txt", rows))
    with pytest.raises(DataError, match="Missing"):
        dq.load_table(tmp_path / "absent.jsonl")
