"""Knowledge-tuning inference: entity -> attribute -> knowledge lookup -> grounded response."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import prompts as pr
from .data_quality import iter_jsonl
from .errors import BackendError, DataError, KnowledgeTuningError
from .gateway import Backend, GenerationRequest, generate
from .kb_store import KnowledgeBase, attributes_of, lookup_instance, normalize, resolve_attribute
from .prompts import PromptTemplates

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class InferenceOptions:
    use_candidates: bool = False
    key_temperature: float = 0.0
    response_temperature: float = 0.0
    key_max_tokens: int = 64
    response_max_tokens: int = 512


@dataclass(frozen=True)
class Provenance:
    entity: str
    attribute: str
    content: str


@dataclass
class StageTrace:
    entity_raw: Optional[str] = None
    entity_normalized: Optional[str] = None
    attribute_raw: Optional[str] = None
    attribute_resolved: Optional[str] = None
    candidates: List[str] = field(default_factory=list)
    lookup_hit: Optional[bool] = None
    prompts: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def stages(self) -> List[str]:
        return [tag for tag, _ in self.prompts]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "entity_raw": self.entity_raw,
            "entity_normalized": self.entity_normalized,
            "attribute_raw": self.attribute_raw,
            "attribute_resolved": self.attribute_resolved,
            "candidates": list(self.candidates),
            "lookup_hit": self.lookup_hit,
            "prompts": [{"tag": tag, "prompt": prompt} for tag, prompt in self.prompts],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StageTrace":
        return cls(
            entity_raw=data.get("entity_raw"),
            entity_normalized=data.get("entity_normalized"),
            attribute_raw=data.get("attribute_raw"),
            attribute_resolved=data.get("attribute_resolved"),
            candidates=list(data.get("candidates") or []),
            lookup_hit=data.get("lookup_hit"),
            prompts=[(p["tag"], p["prompt"]) for p in data.get("prompts") or []],
        )


@dataclass
class GroundedResponse:
    query: str
    response: str
    trace: StageTrace
    provenance: Optional[Provenance] = None
    item_id: Optional[str] = None
    error: Optional[str] = None

    @property
    def grounded(self) -> bool:
        return self.provenance is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "item_id": self.item_id,
            "query": self.query,
            "response": self.response,
            "grounded": self.grounded,
            "provenance": None if self.provenance is None else vars(self.provenance).copy(),
            "trace": self.trace.to_dict(),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GroundedResponse":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"Unsupported response schema version {data.get('schema_version')!r}")
        provenance = data.get("provenance")
        result = cls(
            query=data["query"],
            response=data.get("response") or "",
            trace=StageTrace.from_dict(data.get("trace") or {}),
            provenance=Provenance(**provenance) if provenance else None,
            item_id=data.get("item_id"),
            error=data.get("error"),
        )
        if bool(data.get("grounded")) != result.grounded:
            raise DataError(f"Response {result.item_id!r}: grounded flag disagrees with provenance")
        return result


def _first_line(text: str) -> str:
    lines = (text or "").strip().splitlines()
    return lines[0].strip() if lines else ""


def _run(backend: Backend, trace: StageTrace, tag: str, prompt: str, temperature: float, max_tokens: int) -> str:
    trace.prompts.append((tag, prompt))
    request = GenerationRequest(prompt=prompt, tag=tag, temperature=temperature, max_tokens=max_tokens)
    try:
        return generate(backend, request)
    except BackendError as exc:
        exc.stage = tag
        exc.trace = trace
        raise


def predict_entity(
    backend: Backend,
    templates: PromptTemplates,
    q: str,
    options: InferenceOptions = InferenceOptions(),
    trace: Optional[StageTrace] = None,
) -> Tuple[str, str]:
    trace = trace if trace is not None else StageTrace()
    prompt = pr.render_entity_prompt(templates, q)
    raw = _first_line(_run(backend, trace, "entity", prompt, options.key_temperature, options.key_max_tokens))
    trace.entity_raw, trace.entity_normalized = raw, normalize(raw)
    return raw, trace.entity_normalized


def predict_attribute(
    backend: Backend,
    templates: PromptTemplates,
    kb: KnowledgeBase,
    q: str,
    e_pred: str,
    options: InferenceOptions = InferenceOptions(),
    trace: Optional[StageTrace] = None,
) -> Tuple[str, Optional[str]]:
    trace = trace if trace is not None else StageTrace()
    candidates = attributes_of(kb, e_pred) if options.use_candidates else []
    trace.candidates = candidates
    prompt = pr.render_attr_prompt(templates, q, e_pred, candidates)
    raw = _first_line(_run(backend, trace, "attribute", prompt, options.key_temperature, options.key_max_tokens))
    resolved = resolve_attribute(kb, e_pred, raw)
    trace.attribute_raw, trace.attribute_resolved = raw, resolved
    return raw, resolved


def infer(
    backend: Backend,
    templates: PromptTemplates,
    kb: KnowledgeBase,
    q: str,
    options: InferenceOptions = InferenceOptions(),
    item_id: Optional[str] = None,
) -> GroundedResponse:
    """Answer ``q`` through the knowledge function, falling back to a plain answer on a lookup miss."""
    if not q or not q.strip():
        raise DataError("Cannot infer an empty query")
    trace = StageTrace()

    e_pred, _ = predict_entity(backend, templates, q, options, trace)
    if not e_pred:
        raise BackendError("Entity prediction is empty", stage="entity", trace=trace)
    _, attr = predict_attribute(backend, templates, kb, q, e_pred, options, trace)

    knowledge = lookup_instance(kb, e_pred, attr) if attr else None
    trace.lookup_hit = knowledge is not None

    if knowledge is not None:
        prompt = pr.render_rk_prompt(templates, q, knowledge.content)
        text = _run(backend, trace, "response_k", prompt, options.response_temperature, options.response_max_tokens)
        provenance = Provenance(entity=knowledge.entity, attribute=knowledge.attribute, content=knowledge.content)
        return GroundedResponse(query=q, response=text, trace=trace, provenance=provenance, item_id=item_id)

    prompt = pr.render_plain_prompt(templates, q)
    text = _run(backend, trace, "response_plain", prompt, options.response_temperature, options.response_max_tokens)
    return GroundedResponse(query=q, response=text, trace=trace, item_id=item_id)


def _infer_or_record(
    backend: Backend,
    templates: PromptTemplates,
    kb: KnowledgeBase,
    q: str,
    options: InferenceOptions,
    item_id: Optional[str],
) -> GroundedResponse:
    try:
        return infer(backend, templates, kb, q, options, item_id=item_id)
    except KnowledgeTuningError as exc:
        trace = getattr(exc, "trace", None) or StageTrace()
        logger.warning("Inference failed for item %s: %s", item_id, exc)
        return GroundedResponse(query=q, response="", trace=trace, item_id=item_id, error=str(exc))


def infer_batch(
    backend: Backend,
    templates: PromptTemplates,
    kb: KnowledgeBase,
    queries: Sequence[str],
    concurrency: int = 1,
    options: InferenceOptions = InferenceOptions(),
    item_ids: Optional[Sequence[str]] = None,
) -> List[GroundedResponse]:
    """Run ``infer`` over ``queries``; results keep input order and failures stay inline."""
    if concurrency < 1:
        raise DataError(f"concurrency must be >= 1, got {concurrency}")
    if item_ids is not None and len(item_ids) != len(queries):
        raise DataError("item_ids must align with queries")
    ids = list(item_ids) if item_ids is not None else [str(i) for i in range(len(queries))]
    if not queries:
        return []

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(
            pool.map(lambda pair: _infer_or_record(backend, templates, kb, pair[1], options, pair[0]), zip(ids, queries))
        )
    grounded = sum(r.grounded for r in results)
    failed = sum(r.error is not None for r in results)
    logger.info("Inference over %d queries: %d grounded, %d fallback, %d failed",
                len(results), grounded, len(results) - grounded - failed, failed)
    return results


def load_queries(path: Path) -> Tuple[List[str], List[str]]:
    """Read ``{id, question}`` JSONL (dataset files qualify); returns (ids, questions)."""
    ids: List[str] = []
    questions: List[str] = []
    for line_number, record in iter_jsonl(Path(path)):
        question = record.get("question") or record.get("query")
        if not question:
            raise DataError(f"{Path(path).name}: line {line_number} has no question")
        ids.append(str(record.get("id", line_number)))
        questions.append(question)
    return ids, questions


def load_responses(path: Path) -> List[GroundedResponse]:
    return [GroundedResponse.from_dict(record) for _, record in iter_jsonl(Path(path))]
