from __future__ import annotations

from pathlib import Path

import pytest

import knowledge_tuning.prompts as pr
from knowledge_tuning.errors import DataError, PromptError

Q = "What are the common symptoms of gastric cancer?"


def test_entity_prompt_embeds_question_and_instruction(templates) -> None:
    prompt = pr.render_entity_prompt(templates, Q)
    assert Q in prompt
    assert "What medical entity, like disease or drug, is mentioned in this question?" in prompt
    assert prompt == pr.render_entity_prompt(templates, Q)


def test_empty_inputs_raise_prompt_error(templates) -> None:
    with pytest.raises(PromptError):
        pr.render_entity_prompt(templates, "")
    with pytest.raises(PromptError):
        pr.render_attr_prompt(templates, Q, "  ")
    with pytest.raises(PromptError):
        pr.render_rk_prompt(templates, Q, "")


def test_attribute_prompt_lists_candidates_in_order(templates) -> None:
    plain = pr.render_attr_prompt(templates, Q, "gastric cancer")
    assert "What attribute about the gastric cancer is mentioned in this question?" in plain
    assert pr.render_attr_prompt(templates, Q, "gastric cancer", []) == plain

    listed = pr.render_attr_prompt(templates, Q, "gastric cancer", ["symptom", "pathogeny"])
    assert listed.startswith(plain)
    assert listed.endswith("Candidate attributes:\n1. symptom\n2. pathogeny")


def test_knowledge_and_plain_response_prompts(templates) -> None:
    rk = pr.render_rk_prompt(templates, Q, "Mostly no obvious symptoms.")
    assert rk.startswith(f"{templates.knowledge_marker} Mostly no obvious symptoms.")
    assert rk.endswith("Answer the question with the above medical knowledge.")

    plain = pr.render_plain_prompt(templates, Q)
    assert templates.knowledge_marker not in plain
    assert plain.endswith("Answer the question.")


def test_literal_plain_wording_keeps_no_knowledge() -> None:
    literal = pr.load_templates(literal_plain=True)
    plain = pr.render_plain_prompt(literal, Q)
    assert plain.endswith("Answer the question with the above medical knowledge.")
    assert literal.knowledge_marker not in plain
    assert literal.digest() != pr.load_templates().digest()


def test_chinese_templates_render() -> None:
    zh = pr.load_templates(locale="zh")
    assert zh.locale == "zh"
    assert zh.knowledge_marker == "医学知识："
    prompt = pr.render_rk_prompt(zh, "胃癌的常见症状是什么？", "早期多无明显症状。")
    assert "早期多无明显症状。" in prompt
    assert pr.match_categories("好", zh.judge_keywords) == ["good"]


def test_override_file_must_keep_allowed_slots(tmp_path: Path) -> None:
    good = tmp_path / "good.yaml"
    good.write_text('p_entity: "Q: {question}\\nName the entity."\n', encoding="utf-8")
    assert pr.load_templates(good).p_entity == "Q: {question}\nName the entity."

    bad = tmp_path / "bad.yaml"
    bad.write_text('p_entity: "Q: {question} {entity}"\n', encoding="utf-8")
    with pytest.raises(DataError, match="p_entity"):
        pr.load_templates(bad)

    not_mapping = tmp_path / "list.yaml"
    not_mapping.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(DataError):
        pr.load_templates(not_mapping)


def test_unreadable_override_file_is_a_data_error(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="Cannot read template file"):
        pr.load_templates(tmp_path / "absent.yaml")

    broken = tmp_path / "broken.yaml"
    broken.write_text("p_entity: [unclosed\n", encoding="utf-8")
    with pytest.raises(DataError, match="invalid YAML"):
        pr.load_templates(broken)


def test_unknown_locale_is_rejected() -> None:
    with pytest.raises(DataError):
        pr.load_templates(locale="fr")


def test_match_categories_uses_word_boundaries(templates) -> None:
    assert pr.match_categories("Good.", templates.judge_keywords) == ["good"]
    assert pr.match_categories("good and bad", templates.judge_keywords) == ["good", "bad"]
    assert pr.match_categories("goodness", templates.judge_keywords) == []
    assert pr.match_categories("Yes, it is.", templates.verdict_keywords) == ["yes"]
    assert pr.match_categories("I know", templates.verdict_keywords) == []


def test_longer_keyword_hides_the_one_inside_it() -> None:
    zh = pr.load_templates(locale="zh")
    assert pr.match_categories("不好", zh.judge_keywords) == ["bad"]
    assert pr.match_categories("好", zh.judge_keywords) == ["good"]
    assert pr.match_categories("不是", zh.verdict_keywords) == ["no"]
    assert pr.match_categories("是的", zh.verdict_keywords) == ["yes"]
    assert pr.match_categories("是，不是", zh.verdict_keywords) == ["yes", "no"]


def test_digest_is_stable(templates) -> None:
    assert templates.digest() == pr.load_templates().digest()
    assert len(templates.digest()) == 64
