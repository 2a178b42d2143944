"""Referential checks between datasets, responses and the knowledge base."""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

from .errors import DataError
from .kb_store import KnowledgeBase, lookup

if TYPE_CHECKING:
    from .datagen import DatasetInstance
    from .pipeline import GroundedResponse


def validate_dataset_against_kb(dataset: Sequence["DatasetInstance"], kb: KnowledgeBase) -> None:
    """Every instance's (entity, attribute) must exist in ``kb`` with identical content."""
    missing = []
    mismatched = []
    for inst in dataset:
        content = lookup(kb, inst.entity, inst.attribute)
        if content is None:
            missing.append(inst.id)
        elif content != inst.content:
            mismatched.append(inst.id)
    if missing:
        raise DataError(f"[KB FAIL] dataset->kb: {len(missing)} orphan pairs. Examples: {missing[:5]}")
    if mismatched:
        raise DataError(f"[KB FAIL] dataset->kb: {len(mismatched)} content mismatches. Examples: {mismatched[:5]}")


def validate_alignment(responses: Sequence["GroundedResponse"], golds: Sequence["DatasetInstance"]) -> None:
    """Responses and gold instances must carry the same ids."""
    response_ids = [r.item_id for r in responses]
    gold_ids = [g.id for g in golds]
    if len(set(response_ids)) != len(response_ids):
        raise DataError("responses: duplicate item ids")
    unmatched = sorted(set(map(str, response_ids)) ^ set(gold_ids))
    if unmatched:
        raise DataError(f"[ID FAIL] responses<->gold: {len(unmatched)} unmatched ids. Examples: {unmatched[:5]}")
