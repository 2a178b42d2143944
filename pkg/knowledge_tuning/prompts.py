"""Prompt templates for entity, attribute, response, data generation and judging."""

from __future__ import annotations

import json
import re
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import yaml

from .errors import DataError, PromptError
from .utils import sha256_text

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"
LOCALES = ("en", "zh")

# allowed slots per template
SLOTS: Dict[str, Set[str]] = {
    "p_entity": {"question"},
    "p_attribute": {"question", "entity"},
    "p_response_knowledge": {"question", "knowledge"},
    "p_response_plain": {"question"},
    "p_response_plain_literal": {"question"},
    "p_datagen": {"entity", "attribute", "knowledge"},
    "p_self_assess": {"question", "answer", "knowledge"},
    "p_judge": {"question", "response"},
}


@dataclass(frozen=True)
class PromptTemplates:
    p_entity: str
    p_attribute: str
    p_response_knowledge: str
    p_response_plain: str
    p_datagen: str
    p_self_assess: str
    p_judge: str
    candidates_header: str
    judge_keywords: Mapping[str, Tuple[str, ...]]
    verdict_keywords: Mapping[str, Tuple[str, ...]]
    locale: str = "en"
    knowledge_marker: str = ""

    def digest(self) -> str:
        return sha256_text(json.dumps(asdict(self), sort_keys=True, ensure_ascii=False))


def _slots_of(template: str) -> Set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}


def _keyword_table(raw: Any, name: str) -> Dict[str, Tuple[str, ...]]:
    if not isinstance(raw, dict) or not raw:
        raise DataError(f"Template key '{name}' must be a non-empty mapping")
    return {str(category): tuple(str(k) for k in keywords) for category, keywords in raw.items()}


def load_templates(
    path: Optional[Path] = None,
    locale: str = "en",
    literal_plain: bool = False,
) -> PromptTemplates:
    """Load the shipped templates for ``locale``, overlaid with keys from ``path`` if given."""
    if locale not in LOCALES:
        raise DataError(f"Unsupported locale '{locale}'. Expected one of {list(LOCALES)}.")
    with open(TEMPLATE_DIR / f"{locale}.yaml", "r", encoding="utf-8") as handle:
        data: Dict[str, Any] = yaml.safe_load(handle)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                override = yaml.safe_load(handle) or {}
        except OSError as exc:
            raise DataError(f"Cannot read template file '{path}': {exc}") from exc
        except yaml.YAMLError as exc:
            raise DataError(f"{Path(path).name}: invalid YAML: {exc}") from exc
        if not isinstance(override, dict):
            raise DataError(f"{Path(path).name}: template file must be a YAML mapping")
        data.update(override)

    missing = sorted(set(SLOTS) - set(data))
    if missing:
        raise DataError(f"Templates missing keys: {missing}")
    for name, allowed in SLOTS.items():
        used = _slots_of(data[name])
        if used != allowed:
            raise DataError(f"Template '{name}' uses slots {sorted(used)}, expected {sorted(allowed)}")

    # text preceding the knowledge slot marks knowledge-bearing prompts
    marker = data["p_response_knowledge"].split("{knowledge}", 1)[0].strip().splitlines()[-1]
    plain_key = "p_response_plain_literal" if literal_plain else "p_response_plain"
    return PromptTemplates(
        p_entity=data["p_entity"],
        p_attribute=data["p_attribute"],
        p_response_knowledge=data["p_response_knowledge"],
        p_response_plain=data[plain_key],
        p_datagen=data["p_datagen"],
        p_self_assess=data["p_self_assess"],
        p_judge=data["p_judge"],
        candidates_header=str(data.get("candidates_header", "")),
        judge_keywords=_keyword_table(data.get("judge_keywords"), "judge_keywords"),
        verdict_keywords=_keyword_table(data.get("verdict_keywords"), "verdict_keywords"),
        locale=str(data.get("locale", locale)),
        knowledge_marker=marker,
    )


def _require(value: str, what: str) -> str:
    if value is None or not str(value).strip():
        raise PromptError(f"Cannot render prompt: empty {what}")
    return value


def render_entity_prompt(templates: PromptTemplates, q: str) -> str:
    return templates.p_entity.format(question=_require(q, "query"))


def render_attr_prompt(
    templates: PromptTemplates,
    q: str,
    entity: str,
    candidates: Optional[Sequence[str]] = None,
) -> str:
    prompt = templates.p_attribute.format(question=_require(q, "query"), entity=_require(entity, "entity"))
    if candidates:
        listing = "\n".join(f"{i}. {attr}" for i, attr in enumerate(candidates, start=1))
        prompt = f"{prompt}\n{templates.candidates_header}\n{listing}"
    return prompt


def render_rk_prompt(templates: PromptTemplates, q: str, c: str) -> str:
    return templates.p_response_knowledge.format(question=_require(q, "query"), knowledge=_require(c, "knowledge"))


def render_plain_prompt(templates: PromptTemplates, q: str) -> str:
    return templates.p_response_plain.format(question=_require(q, "query"))


def render_datagen_prompt(templates: PromptTemplates, entity: str, attribute: str, content: str) -> str:
    return templates.p_datagen.format(
        entity=_require(entity, "entity"),
        attribute=_require(attribute, "attribute"),
        knowledge=_require(content, "knowledge"),
    )


def render_self_assess_prompt(templates: PromptTemplates, question: str, answer: str, content: str) -> str:
    return templates.p_self_assess.format(
        question=_require(question, "question"),
        answer=_require(answer, "answer"),
        knowledge=_require(content, "knowledge"),
    )


def render_judge_prompt(templates: PromptTemplates, q: str, response: str) -> str:
    return templates.p_judge.format(question=_require(q, "query"), response=_require(response, "response"))


def _keyword_pattern(keyword: str) -> re.Pattern[str]:
    escaped = re.escape(keyword.lower())
    if keyword.isascii():
        return re.compile(rf"(?<![a-z]){escaped}(?![a-z])")
    return re.compile(escaped)


def match_categories(text: str, table: Mapping[str, Sequence[str]]) -> List[str]:
    """Categories of ``table`` with at least one keyword present in ``text``.

    A hit lying inside a longer hit is dropped, so a negated keyword such as
    ``不好`` counts only for its own category and not for the one holding ``好``.
    """
    lowered = (text or "").lower()
    hits: List[Tuple[int, int, str]] = []
    for category, keywords in table.items():
        for keyword in keywords:
            if keyword:
                hits.extend((m.start(), m.end(), category) for m in _keyword_pattern(keyword).finditer(lowered))
    kept = {
        category
        for start, end, category in hits
        if not any(s <= start and end <= e and e - s > end - start for s, e, _ in hits)
    }
    return [category for category in table if category in kept]
