from __future__ import annotations

from pathlib import Path

import pytest

import knowledge_tuning.kb_store as kb_store
import knowledge_tuning.seed as seed
from knowledge_tuning.errors import DataError

from conftest import write_jsonl


def test_load_toy_kb_keeps_records_verbatim(toy_kb_path: Path) -> None:
    kb = kb_store.load_kb(toy_kb_path)

    assert len(kb) == 3
    assert [inst.id for inst in kb.instances] == [0, 1, 2]
    assert kb.get(0).content == "Agitated, nausea, vomiting, constipation, dizziness, seizure, excitement."


def test_lookup_examples(toy_kb) -> None:
    assert (
        kb_store.lookup(toy_kb, "cicatricial pyloric obstruction", "symptom")
        == "vomiting during afternoon and night, abdominal pain during the night and after eating."
    )
    assert kb_store.lookup(toy_kb, "gastric cancer", "nonexistent-attr") is None
    assert kb_store.lookup(toy_kb, " Gastric Cancer ", "symptom") == kb_store.lookup(toy_kb, "gastric cancer", "symptom")


def test_normalize_folds_case_space_and_punctuation() -> None:
    assert kb_store.normalize("  Gastric-Cancer! ") == "gastriccancer"
    assert kb_store.normalize("ＧＡＳＴＲＩＣ cancer") == "gastriccancer"
    assert kb_store.normalize("胃癌，症状。") == "胃癌症状"
    assert kb_store.normalize("") == ""


@pytest.mark.parametrize("text", ["Gastric Cancer", "é - x", "胃 癌！", "Ａ.b,c", "  "])
def test_normalize_is_idempotent(text: str) -> None:
    once = kb_store.normalize(text)
    assert kb_store.normalize(once) == once


def test_resolve_attribute_ladder(toy_kb) -> None:
    assert kb_store.resolve_attribute(toy_kb, "gastric cancer", "symptom") == "symptom"
    assert kb_store.resolve_attribute(toy_kb, "gastric cancer", "symptoms") == "symptom"
    assert kb_store.resolve_attribute(toy_kb, "gastric cancer", "symptum") == "symptom"
    assert kb_store.resolve_attribute(toy_kb, "gastric cancer", "etiology") is None
    assert kb_store.resolve_attribute(toy_kb, "gastric cancer", "") is None
    assert kb_store.resolve_attribute(toy_kb, "unknown disease", "symptom") is None


def test_dice_of_disjoint_bigrams_is_zero() -> None:
    assert kb_store.dice("etiology", "symptom") == 0.0
    assert kb_store.dice("symptum", "symptom") == pytest.approx(8 / 12)


def test_duplicate_pair_after_normalization_is_rejected(tmp_path: Path) -> None:
    path = write_jsonl(
        tmp_path / "kb.jsonl",
        [
            {"entity": "Gastric cancer", "attribute": "symptom", "content": "a"},
            {"entity": "gastric  cancer ", "attribute": "Symptom", "content": "b"},
        ],
    )
    with pytest.raises(DataError, match="line 2"):
        kb_store.load_kb(path)


def test_extra_or_missing_keys_name_the_line(tmp_path: Path) -> None:
    path = write_jsonl(
        tmp_path / "kb.jsonl",
        [
            {"entity": "gastric cancer", "attribute": "symptom", "content": "a"},
            {"entity": "x", "attribute": "y", "content": "z", "source": "web"},
        ],
    )
    with pytest.raises(DataError, match="line 2"):
        kb_store.load_kb(path)


def test_malformed_json_names_the_line(tmp_path: Path) -> None:
    path = tmp_path / "kb.jsonl"
    path.write_text('{"entity": "a", "attribute": "b", "content": "c"}\n{not json\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        kb_store.load_kb(path)


def test_field_empty_after_normalization_is_rejected(tmp_path: Path) -> None:
    path = write_jsonl(tmp_path / "kb.jsonl", [{"entity": "!!!", "attribute": "symptom", "content": "a"}])
    with pytest.raises(DataError):
        kb_store.load_kb(path)


def test_csv_kb_loads_and_checks_header(tmp_path: Path) -> None:
    good = tmp_path / "kb.csv"
    good.write_text('entity,attribute,content\ngastric cancer,symptom,"nausea, vomiting"\n', encoding="utf-8")
    kb = kb_store.load_kb(good)
    assert kb_store.lookup(kb, "gastric cancer", "symptom") == "nausea, vomiting"

    bad = tmp_path / "bad.csv"
    bad.write_text("name,attribute,content\nx,y,z\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        kb_store.load_kb(bad)


def test_csv_duplicate_reports_file_line(tmp_path: Path) -> None:
    path = tmp_path / "kb.csv"
    path.write_text("entity,attribute,content\na,b,c\nA,B,d\n", encoding="utf-8")
    with pytest.raises(DataError, match="line 3"):
        kb_store.load_kb(path)


def test_csv_line_numbers_count_quoted_newlines(tmp_path: Path) -> None:
    path = tmp_path / "kb.csv"
    path.write_text('entity,attribute,content\na,b,"first\nsecond"\nc,d,e\nC,D,f\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 5"):
        kb_store.load_kb(path)


def test_save_kb_into_unwritable_location_is_a_data_error(toy_kb, tmp_path: Path) -> None:
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    with pytest.raises(DataError, match="Cannot create output directory"):
        kb_store.save_kb(toy_kb, blocker / "kb.jsonl")


def test_save_and_reload_preserves_instances(toy_kb, tmp_path: Path) -> None:
    for name in ("kb.jsonl", "kb.csv"):
        reloaded = kb_store.load_kb(kb_store.save_kb(toy_kb, tmp_path / name))
        assert reloaded.instances == toy_kb.instances


def test_attributes_of_is_sorted_and_frame_has_ids(toy_kb) -> None:
    assert kb_store.attributes_of(toy_kb, "GASTRIC CANCER") == ["symptom"]
    frame = toy_kb.to_frame()
    assert list(frame.columns) == ["id", "entity", "attribute", "content"]
    assert frame["id"].tolist() == [0, 1, 2]


def test_missing_file_and_unknown_id() -> None:
    with pytest.raises(DataError):
        kb_store.load_kb(Path("does/not/exist.jsonl"))
    kb = kb_store.build_kb([kb_store.KnowledgeInstance(0, "a", "b", "c")])
    with pytest.raises(DataError):
        kb.get(5)


def test_shipped_toy_kb_matches_seed_tables() -> None:
    shipped = kb_store.load_kb(Path(__file__).resolve().parents[1] / "data" / "toy_kb.jsonl")
    assert shipped.instances == seed.build_toy_kb().instances
