"""Knowledge-guided QA generation and training-record emission."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import pandas as pd
import yaml

from . import data_quality as dq
from . import prompts as pr
from .config import TRAINING_HYPERPARAMETERS
from .errors import DataError, KnowledgeTuningError, QAParseError
from .gateway import Backend, GenerationRequest, generate
from .kb_store import KnowledgeBase, KnowledgeInstance
from .prompts import PromptTemplates
from .utils import prepare_output
from .validation import validate_dataset_against_kb

logger = logging.getLogger(__name__)

KEEP = "keep"
FLAG = "flag"

_QUESTION_END = re.compile(r"[?？]")
_QUESTION_PREFIX = re.compile(r"^\s*(?:Q|Question|问|问题)\s*[:：]\s*", re.IGNORECASE)
_ANSWER_PREFIX = re.compile(r"^\s*(?:A|Answer|答|回答)\s*[:：]\s*", re.IGNORECASE)


@dataclass(frozen=True)
class DatasetInstance:
    id: str
    entity: str
    attribute: str
    content: str
    question: str
    answer: str
    flags: FrozenSet[str] = field(default_factory=frozenset)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "entity": self.entity,
            "attribute": self.attribute,
            "content": self.content,
            "question": self.question,
            "answer": self.answer,
            "flags": sorted(self.flags),
        }


@dataclass(frozen=True)
class TrainingRecord:
    loss_component: str
    prompt: str
    target: str
    source_id: str

    def to_dict(self) -> Dict[str, str]:
        return {
            "loss_component": self.loss_component,
            "prompt": self.prompt,
            "target": self.target,
            "source_id": self.source_id,
        }


def parse_qa(text: str) -> Tuple[str, str]:
    """Split generated text at the first question mark: question up to it, answer after."""
    match = _QUESTION_END.search(text or "")
    if match is None:
        raise QAParseError("Generated text has no question mark", raw=text)
    question = _QUESTION_PREFIX.sub("", text[: match.end()]).strip()
    answer = _ANSWER_PREFIX.sub("", text[match.end():]).strip()
    if not question or not answer:
        raise QAParseError("Generated text lacks a question/answer boundary", raw=text)
    return question, answer


def generate_qa(
    backend: Backend,
    templates: PromptTemplates,
    k: KnowledgeInstance,
    temperature: float = 0.7,
    max_tokens: int = 512,
) -> Tuple[str, str]:
    prompt = pr.render_datagen_prompt(templates, k.entity, k.attribute, k.content)
    text = generate(backend, GenerationRequest(prompt=prompt, tag="datagen", temperature=temperature, max_tokens=max_tokens))
    return parse_qa(text)


def self_assess(backend: Backend, templates: PromptTemplates, inst: DatasetInstance) -> str:
    """Ask the backend whether the answer is faithful; anything but a clear yes flags the instance."""
    prompt = pr.render_self_assess_prompt(templates, inst.question, inst.answer, inst.content)
    verdict = generate(backend, GenerationRequest(prompt=prompt, tag="self_assess", max_tokens=8))
    matched = pr.match_categories(verdict, templates.verdict_keywords)
    return KEEP if matched == ["yes"] else FLAG


@dataclass
class GenerationFailure:
    knowledge_id: int
    error: str
    raw: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {"knowledge_id": self.knowledge_id, "error": self.error, "raw": self.raw}


def _generate_one(
    backend: Backend,
    templates: PromptTemplates,
    k: KnowledgeInstance,
    repeat: int,
    self_check: bool,
    temperature: float,
) -> DatasetInstance | GenerationFailure:
    try:
        question, answer = generate_qa(backend, templates, k, temperature=temperature)
        inst = DatasetInstance(
            id=f"{k.id}-{repeat}",
            entity=k.entity,
            attribute=k.attribute,
            content=k.content,
            question=question,
            answer=answer,
        )
        if self_check and self_assess(backend, templates, inst) == FLAG:
            inst = replace(inst, flags=inst.flags | {"chatgpt_flagged"})
        return inst
    except QAParseError as exc:
        return GenerationFailure(knowledge_id=k.id, error=str(exc), raw=exc.raw)
    except KnowledgeTuningError as exc:
        return GenerationFailure(knowledge_id=k.id, error=str(exc))


def build_dataset(
    backend: Backend,
    templates: PromptTemplates,
    kb: KnowledgeBase,
    repeats: int = 1,
    self_check: bool = True,
    concurrency: int = 1,
    temperature: float = 0.7,
) -> Tuple[List[DatasetInstance], List[GenerationFailure]]:
    """Generate ``repeats`` QA pairs per knowledge triple; parse failures come back as records."""
    if repeats < 1:
        raise DataError(f"repeats must be >= 1, got {repeats}")
    if concurrency < 1:
        raise DataError(f"concurrency must be >= 1, got {concurrency}")
    jobs = [(k, r) for k in kb.instances for r in range(repeats)]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        outcomes = list(
            pool.map(lambda job: _generate_one(backend, templates, job[0], job[1], self_check, temperature), jobs)
        )
    instances = [o for o in outcomes if isinstance(o, DatasetInstance)]
    failures = [o for o in outcomes if isinstance(o, GenerationFailure)]
    flagged = sum("chatgpt_flagged" in inst.flags for inst in instances)
    logger.info("Generated %d instances (%d flagged), %d failures", len(instances), flagged, len(failures))
    return instances, failures


def derive_dstar(dataset: Sequence[DatasetInstance]) -> List[Dict[str, str]]:
    return [{"id": inst.id, "question": inst.question, "answer": inst.answer} for inst in dataset]


def emit_training_records(
    inst: DatasetInstance,
    templates: PromptTemplates,
    candidates: Optional[Sequence[str]] = None,
) -> List[TrainingRecord]:
    """Four records, one per loss term: entity, attribute, knowledge response, plain response."""
    pairs = [
        ("entity", pr.render_entity_prompt(templates, inst.question), inst.entity),
        ("attribute", pr.render_attr_prompt(templates, inst.question, inst.entity, candidates), inst.attribute),
        ("response_k", pr.render_rk_prompt(templates, inst.question, inst.content), inst.answer),
        ("response_plain", pr.render_plain_prompt(templates, inst.question), inst.answer),
    ]
    return [TrainingRecord(component, prompt, target, inst.id) for component, prompt, target in pairs]


def emit_dataset_records(
    dataset: Sequence[DatasetInstance],
    templates: PromptTemplates,
    kb: Optional[KnowledgeBase] = None,
) -> List[TrainingRecord]:
    """Training records for every instance, checked against the training_records schema."""
    if kb is not None:
        validate_dataset_against_kb(dataset, kb)
    records: List[TrainingRecord] = []
    for inst in dataset:
        records.extend(emit_training_records(inst, templates))
    if records:
        dq.validate_table(pd.DataFrame([r.to_dict() for r in records]), "training_records")
    return records


def emit_training_config(path: Optional[Path] = None) -> Dict[str, Any]:
    """Trainer hyperparameters as a flat mapping, optionally written as YAML."""
    config = dict(TRAINING_HYPERPARAMETERS)
    if path is not None:
        try:
            with open(prepare_output(path), "w", encoding="utf-8") as handle:
                yaml.safe_dump(config, handle, sort_keys=False, allow_unicode=True)
        except OSError as exc:
            raise DataError(f"Cannot write training config '{path}': {exc}") from exc
    return config


def load_training_config(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return yaml.safe_load(handle)


def _flags(value: Any) -> FrozenSet[str]:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return frozenset()
    if isinstance(value, str):
        return frozenset(v for v in value.split("|") if v)
    return frozenset(str(v) for v in value)


def load_dataset(path: Path) -> List[DatasetInstance]:
    df = dq.load_table(Path(path))
    if df.empty:
        return []
    if "flags" not in df.columns:
        df["flags"] = [[] for _ in range(len(df))]
    df["flags"] = df["flags"].map(lambda v: sorted(_flags(v)))
    df["id"] = df["id"].astype(str)
    dq.validate_table(df, "dataset")
    return [
        DatasetInstance(
            id=row.id,
            entity=row.entity,
            attribute=row.attribute,
            content=row.content,
            question=row.question,
            answer=row.answer,
            flags=frozenset(row.flags),
        )
        for row in df.itertuples(index=False)
    ]
