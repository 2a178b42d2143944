"""Metrics: entity/attribute/knowledge accuracy, BLEU-1, Cohen's kappa, H2 ratings and LLM judging."""

from __future__ import annotations

import logging
import math
import numbers
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sacrebleu.metrics import BLEU
from sklearn.metrics import cohen_kappa_score

from . import data_quality as dq
from . import prompts as pr
from .datagen import DatasetInstance
from .errors import DataError
from .gateway import Backend, GenerationRequest, generate
from .kb_store import KnowledgeBase, normalize
from .pipeline import GroundedResponse
from .prompts import PromptTemplates
from .retrieval import tokenize
from .splits import sample_without_replacement
from .validation import validate_alignment

logger = logging.getLogger(__name__)

JUDGE_SCORES = {"good": 3, "moderate": 2, "bad": 1}
GROUP_BY = ("system", "grounded", "none")
DEFAULT_EVAL_SAMPLE = 200

_BLEU1 = BLEU(max_ngram_order=1, tokenize="none", smooth_method="none", effective_order=True)


def _check_pair(preds: Sequence[Any], golds: Sequence[Any]) -> None:
    if len(preds) != len(golds):
        raise DataError(f"Length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise DataError("Cannot score empty lists")


def entity_accuracy(preds: Sequence[str], golds: Sequence[str], strict: bool = False) -> float:
    """Share of exact matches; normalized comparison unless ``strict``."""
    _check_pair(preds, golds)
    key = (lambda s: (s or "").strip()) if strict else normalize
    return float(np.mean([key(p) == key(g) for p, g in zip(preds, golds)]))


def _aligned(responses: Sequence[GroundedResponse], golds: Sequence[DatasetInstance]) -> List[Tuple[GroundedResponse, DatasetInstance]]:
    _check_pair(responses, golds)
    validate_alignment(responses, golds)
    by_id = {g.id: g for g in golds}
    return [(r, by_id[str(r.item_id)]) for r in responses]


def knowledge_accuracy(responses: Sequence[GroundedResponse], golds: Sequence[DatasetInstance]) -> float:
    """Grounded and the provenance content equals the gold content after normalization."""
    pairs = _aligned(responses, golds)
    return float(np.mean([
        r.grounded and normalize(r.provenance.content) == normalize(g.content) for r, g in pairs
    ]))


def pair_accuracy(responses: Sequence[GroundedResponse], golds: Sequence[DatasetInstance]) -> float:
    pairs = _aligned(responses, golds)
    return float(np.mean([
        r.grounded
        and normalize(r.provenance.entity) == normalize(g.entity)
        and normalize(r.provenance.attribute) == normalize(g.attribute)
        for r, g in pairs
    ]))


def attribute_accuracy(
    responses: Sequence[GroundedResponse],
    golds: Sequence[DatasetInstance],
    resolved: bool = True,
) -> float:
    pairs = _aligned(responses, golds)
    picked = [(r.trace.attribute_resolved if resolved else r.trace.attribute_raw) or "" for r, _ in pairs]
    return entity_accuracy(picked, [g.attribute for _, g in pairs])


def grounded_rate(responses: Sequence[GroundedResponse]) -> float:
    if not responses:
        raise DataError("Cannot score an empty response list")
    return float(np.mean([r.grounded for r in responses]))


def retrieval_accuracy(
    top_ids: Sequence[Optional[int]],
    golds: Sequence[DatasetInstance],
    kb: KnowledgeBase,
) -> float:
    """Top-1 retrieved instance carries the gold (entity, attribute) pair."""
    _check_pair(top_ids, golds)
    hits = []
    for doc_id, gold in zip(top_ids, golds):
        if doc_id is None:
            hits.append(False)
            continue
        inst = kb.get(doc_id)
        hits.append(
            normalize(inst.entity) == normalize(gold.entity) and normalize(inst.attribute) == normalize(gold.attribute)
        )
    return float(np.mean(hits))


def bleu1(candidate: str, reference: str) -> float:
    """Clipped unigram precision times brevity penalty, over the retrieval tokenizer."""
    ref_tokens = tokenize(reference)
    if not ref_tokens:
        raise DataError("BLEU-1 needs a non-empty reference")
    cand_tokens = tokenize(candidate)
    if not cand_tokens:
        return 0.0
    score = _BLEU1.sentence_score(" ".join(cand_tokens), [" ".join(ref_tokens)]).score / 100.0
    return min(1.0, max(0.0, score))


def mean_bleu1(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_pair(candidates, references)
    return float(np.mean([bleu1(c, r) for c, r in zip(candidates, references)]))


def _category(value: Hashable) -> str:
    # 1, 1.0 and np.int64(1) name the same rating
    if isinstance(value, numbers.Real) and not isinstance(value, bool):
        return repr(float(value))
    return str(value)


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    if len(a) != len(b):
        raise DataError(f"Length mismatch: {len(a)} vs {len(b)} labels")
    if len(a) < 2:
        raise DataError("Cohen's kappa needs at least two rated items")
    labels = [_category(v) for v in a], [_category(v) for v in b]
    if len(set(labels[0]) | set(labels[1])) == 1:
        # chance agreement is 1: both raters used one identical category
        return 1.0
    return float(cohen_kappa_score(*labels))


@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    item_id: str
    helpfulness: float
    harmlessness: float
    grounded: Optional[bool] = None
    system: Optional[str] = None


def _ratings_frame(ratings: Sequence[RatingRecord]) -> pd.DataFrame:
    df = pd.DataFrame([vars(r) for r in ratings])
    if df.empty:
        raise DataError("No ratings to aggregate")
    dq.validate_table(df.drop(columns=["grounded", "system"]), "ratings")
    dq.assert_unique(df, "ratings", ["rater_id", "item_id"], "(rater_id, item_id) rating")
    return df


def _parse_bool(value: Any) -> Optional[bool]:
    if value is None or value == "" or (isinstance(value, float) and math.isnan(value)):
        return None
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    text = str(value).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise DataError(f"Not a boolean: {value!r}")


def _optional_text(value: Any) -> Optional[str]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return str(value) or None


def load_ratings(path: Path) -> List[RatingRecord]:
    """Read a ratings CSV/JSONL; scores must sit on the half-point grid and (rater, item) be unique."""
    df = dq.load_table(Path(path))
    missing = [c for c in dq.RATING_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{Path(path).name}: missing rating columns {missing}")
    df["line"] = range(2, len(df) + 2)
    df["rater_id"] = df["rater_id"].astype(str)
    df["item_id"] = df["item_id"].astype(str)
    try:
        df["helpfulness"] = pd.to_numeric(df["helpfulness"])
        df["harmlessness"] = pd.to_numeric(df["harmlessness"])
    except ValueError as exc:
        raise DataError(f"{Path(path).name}: non-numeric score: {exc}") from exc
    dq.validate_table(df[[*dq.RATING_COLUMNS, "line"]], "ratings")
    dq.assert_unique(df, "ratings", ["rater_id", "item_id"], "(rater_id, item_id) rating")
    return [
        RatingRecord(
            rater_id=str(row["rater_id"]),
            item_id=str(row["item_id"]),
            helpfulness=float(row["helpfulness"]),
            harmlessness=float(row["harmlessness"]),
            grounded=_parse_bool(row.get("grounded")),
            system=_optional_text(row.get("system")),
        )
        for _, row in df.iterrows()
    ]


def attach_grounded(ratings: Sequence[RatingRecord], responses: Sequence[GroundedResponse]) -> List[RatingRecord]:
    grounded = {str(r.item_id): r.grounded for r in responses}
    unknown = sorted({r.item_id for r in ratings} - set(grounded))
    if unknown:
        raise DataError(f"Ratings reference {len(unknown)} unknown items. Examples: {unknown[:5]}")
    return [RatingRecord(**{**vars(r), "grounded": grounded[r.item_id]}) for r in ratings]


@dataclass(frozen=True)
class H2Summary:
    helpfulness: float
    harmlessness: float
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return {"helpfulness": self.helpfulness, "harmlessness": self.harmlessness, "n": self.n}


def h2_aggregate(ratings: Sequence[RatingRecord], group_by: str = "none") -> Dict[str, H2Summary]:
    """Mean helpfulness and harmlessness per group ("all" when ungrouped)."""
    if group_by not in GROUP_BY:
        raise DataError(f"Unknown grouping '{group_by}'. Expected one of {list(GROUP_BY)}.")
    df = _ratings_frame(ratings)
    if group_by == "none":
        df["group"] = "all"
    else:
        if df[group_by].isna().any():
            raise DataError(f"Ratings lack the '{group_by}' field needed for grouping")
        df["group"] = df[group_by].map(lambda v: str(v).lower() if isinstance(v, (bool, np.bool_)) else str(v))
    summary = df.groupby("group", sort=True).agg(
        helpfulness=("helpfulness", "mean"),
        harmlessness=("harmlessness", "mean"),
        n=("item_id", "size"),
    )
    return {
        str(group): H2Summary(float(row.helpfulness), float(row.harmlessness), int(row.n))
        for group, row in summary.iterrows()
    }


def rating_kappa(ratings: Sequence[RatingRecord], dimension: str) -> float:
    """Cohen's kappa between the two raters on the items both rated, for one H2 dimension."""
    if dimension not in ("helpfulness", "harmlessness"):
        raise DataError(f"Unknown rating dimension '{dimension}'")
    df = _ratings_frame(ratings)
    raters = sorted(df["rater_id"].unique())
    if len(raters) != 2:
        raise DataError(f"Kappa needs exactly two raters, found {len(raters)}: {raters[:5]}")
    wide = df.pivot(index="item_id", columns="rater_id", values=dimension).dropna()
    return cohen_kappa(wide[raters[0]].tolist(), wide[raters[1]].tolist())


@dataclass(frozen=True)
class JudgeVerdict:
    item_id: Optional[str]
    category: Optional[str]
    score: Optional[int]
    raw: str = ""

    @property
    def parseable(self) -> bool:
        return self.category is not None

    def to_dict(self) -> Dict[str, Any]:
        return {"item_id": self.item_id, "category": self.category, "score": self.score, "raw": self.raw}


def parse_verdict(text: str, templates: PromptTemplates, item_id: Optional[str] = None) -> JudgeVerdict:
    matched = pr.match_categories(text, templates.judge_keywords)
    if len(matched) != 1 or matched[0] not in JUDGE_SCORES:
        return JudgeVerdict(item_id=item_id, category=None, score=None, raw=text)
    return JudgeVerdict(item_id=item_id, category=matched[0], score=JUDGE_SCORES[matched[0]], raw=text)


def judge(
    backend: Backend,
    templates: PromptTemplates,
    q: str,
    response: str,
    item_id: Optional[str] = None,
) -> JudgeVerdict:
    """Classify a response as good/moderate/bad; ambiguous output yields an unparseable verdict."""
    prompt = pr.render_judge_prompt(templates, q, response)
    text = generate(backend, GenerationRequest(prompt=prompt, tag="judge", max_tokens=8))
    verdict = parse_verdict(text, templates, item_id)
    if not verdict.parseable:
        logger.warning("Unparseable judge verdict for item %s: %r", item_id, text[:80])
    return verdict


def judge_responses(
    backend: Backend,
    templates: PromptTemplates,
    responses: Sequence[GroundedResponse],
    concurrency: int = 1,
) -> List[JudgeVerdict]:
    scorable = [r for r in responses if r.error is None and r.response.strip()]
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        return list(pool.map(lambda r: judge(backend, templates, r.query, r.response, r.item_id), scorable))


@dataclass(frozen=True)
class JudgeSummary:
    mean: float
    n: int
    excluded: int

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "n": self.n, "excluded": self.excluded}


def mean_judge_score(verdicts: Sequence[JudgeVerdict]) -> JudgeSummary:
    scores = [v.score for v in verdicts if v.parseable]
    if not scores:
        raise DataError("No parseable judge verdicts to average")
    return JudgeSummary(mean=sum(scores) / len(scores), n=len(scores), excluded=len(verdicts) - len(scores))


def sample_eval_set(test: Sequence[Any], n: int = DEFAULT_EVAL_SAMPLE, seed: int = 42) -> List[Any]:
    if n > len(test):
        raise DataError(f"Cannot sample {n} items from a test set of {len(test)}")
    return sample_without_replacement(test, n, seed)


def build_report(
    responses: Sequence[GroundedResponse],
    golds: Sequence[DatasetInstance],
    verdicts: Optional[Sequence[JudgeVerdict]] = None,
    ratings: Optional[Sequence[RatingRecord]] = None,
    backend: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """Every metric in one JSON-ready document; contains no timestamps."""
    pairs = _aligned(responses, golds)
    entity_preds = [r.trace.entity_raw or "" for r, _ in pairs]
    entity_golds = [g.entity for _, g in pairs]
    scored = [(r, g) for r, g in pairs if r.error is None and r.response.strip()]

    report: Dict[str, Any] = {
        "n_items": len(pairs),
        "n_errors": sum(r.error is not None for r, _ in pairs),
        "seed": seed,
        "backend": backend,
        "entity_accuracy": {
            "normalized": entity_accuracy(entity_preds, entity_golds),
            "strict": entity_accuracy(entity_preds, entity_golds, strict=True),
        },
        "attribute_accuracy": {
            "resolved": attribute_accuracy(responses, golds, resolved=True),
            "raw": attribute_accuracy(responses, golds, resolved=False),
        },
        "knowledge_accuracy": knowledge_accuracy(responses, golds),
        "pair_accuracy": pair_accuracy(responses, golds),
        "grounded_rate": grounded_rate(responses),
        "bleu1": mean_bleu1([r.response for r, _ in scored], [g.answer for _, g in scored]) if scored else None,
    }

    if verdicts:
        report["judge"] = mean_judge_score(verdicts).to_dict()
        grounded_ids = {str(r.item_id) for r, _ in pairs if r.grounded}
        grounded_verdicts = [v for v in verdicts if str(v.item_id) in grounded_ids and v.parseable]
        report["judge_grounded"] = mean_judge_score(grounded_verdicts).to_dict() if grounded_verdicts else None

    if ratings:
        report["h2"] = {k: v.to_dict() for k, v in h2_aggregate(ratings).items()}
        if all(r.grounded is not None for r in ratings):
            report["h2_by_grounded"] = {k: v.to_dict() for k, v in h2_aggregate(ratings, "grounded").items()}
        try:
            report["kappa"] = {dim: rating_kappa(ratings, dim) for dim in ("helpfulness", "harmlessness")}
        except DataError as exc:
            logger.warning("Kappa not reported: %s", exc)
            report["kappa"] = None
    return report
