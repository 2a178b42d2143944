"""Structured knowledge base: loading, normalization and the exact knowledge function."""

from __future__ import annotations

import csv
import json
import logging
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from . import data_quality as dq
from .errors import DataError
from .utils import prepare_output

logger = logging.getLogger(__name__)

DICE_THRESHOLD = 0.5

_ASCII_PUNCTUATION = frozenset(string.punctuation)


@dataclass(frozen=True)
class KnowledgeInstance:
    id: int
    entity: str
    attribute: str
    content: str

    def document_text(self) -> str:
        return f"{self.entity} {self.attribute} {self.content}"

    def to_dict(self) -> Dict[str, str]:
        return {"entity": self.entity, "attribute": self.attribute, "content": self.content}


@dataclass(frozen=True)
class KnowledgeBase:
    instances: Tuple[KnowledgeInstance, ...]
    pair_index: Mapping[Tuple[str, str], int]
    entity_index: Mapping[str, Tuple[str, ...]]
    source: str = "unknown"
    _by_id: Mapping[int, KnowledgeInstance] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.instances)

    def get(self, instance_id: int) -> KnowledgeInstance:
        try:
            return self._by_id[instance_id]
        except KeyError:
            raise DataError(f"Unknown knowledge instance id {instance_id}") from None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"id": k.id, **k.to_dict()} for k in self.instances],
            columns=["id", "entity", "attribute", "content"],
        )


def _is_dropped(ch: str) -> bool:
    return ch.isspace() or ch in _ASCII_PUNCTUATION or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """NFKC, ASCII-lowercase, and drop whitespace and punctuation.

    A trailing NFKC pass recomposes marks that were separated by dropped
    characters, which keeps the function idempotent.
    """
    if not text:
        return ""
    folded = unicodedata.normalize("NFKC", text)
    folded = "".join(ch.lower() if ch.isascii() else ch for ch in folded)
    kept = "".join(ch for ch in folded if not _is_dropped(ch))
    return unicodedata.normalize("NFKC", kept)


def build_kb(instances: Sequence[KnowledgeInstance], source: str = "unknown") -> KnowledgeBase:
    pair_index: Dict[Tuple[str, str], int] = {}
    entity_index: Dict[str, List[str]] = {}
    for inst in instances:
        key = (normalize(inst.entity), normalize(inst.attribute))
        if not all(key) or not normalize(inst.content):
            raise DataError(f"Knowledge instance {inst.id} has an empty field after normalization")
        if key in pair_index:
            raise DataError(f"Duplicate (entity, attribute) pair {key} for instance {inst.id}")
        pair_index[key] = inst.id
        entity_index.setdefault(key[0], []).append(inst.attribute)

    return KnowledgeBase(
        instances=tuple(instances),
        pair_index=MappingProxyType(pair_index),
        entity_index=MappingProxyType({e: tuple(sorted(attrs)) for e, attrs in entity_index.items()}),
        source=source,
        _by_id=MappingProxyType({inst.id: inst for inst in instances}),
    )


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        if fmt not in ("jsonl", "csv"):
            raise DataError(f"Unsupported knowledge base format '{fmt}'")
        return fmt
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise DataError(f"Cannot infer knowledge base format from '{path.name}'")


def _read_records(path: Path, fmt: str) -> pd.DataFrame:
    if fmt == "jsonl":
        rows = []
        for line_number, record in dq.iter_jsonl(path):
            if set(record) != set(dq.KB_COLUMNS):
                raise DataError(
                    f"{path.name}: malformed record at line {line_number}; "
                    f"expected keys {list(dq.KB_COLUMNS)}, got {sorted(record)}"
                )
            if not all(isinstance(record[key], str) for key in dq.KB_COLUMNS):
                raise DataError(f"{path.name}: non-string field at line {line_number}")
            rows.append({**record, "line": line_number})
        return pd.DataFrame(rows, columns=[*dq.KB_COLUMNS, "line"])

    df = dq.load_table(path)
    if tuple(df.columns) != dq.KB_COLUMNS:
        raise DataError(f"{path.name}: CSV header must be {','.join(dq.KB_COLUMNS)}, got {','.join(df.columns)}")
    df["line"] = _csv_record_lines(path, len(df))
    return df


def _csv_record_lines(path: Path, n_records: int) -> List[int]:
    """Physical line on which each data record starts; quoted fields may span lines."""
    starts: List[int] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        next(reader, None)
        start = reader.line_num + 1
        for row in reader:
            if row:
                starts.append(start)
            start = reader.line_num + 1
    if len(starts) != n_records:
        # header-plus-row numbering
        logger.warning("%s: could not map CSV records to physical lines", path.name)
        return list(range(2, n_records + 2))
    return starts


def load_kb(path: Path, fmt: Optional[str] = None, source: str = "unknown") -> KnowledgeBase:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing knowledge base file '{path}'.")
    fmt = _infer_format(path, fmt)

    df = _read_records(path, fmt)
    df["line"] = df["line"].astype(int)
    for column in dq.KB_COLUMNS:
        df[f"{column}_key"] = df[column].map(normalize)
    dq.validate_table(df, "kb")
    dq.assert_unique(df, "kb", ["entity_key", "attribute_key"], "(entity, attribute) pair")

    instances = [
        KnowledgeInstance(id=i, entity=row.entity, attribute=row.attribute, content=row.content)
        for i, row in enumerate(df.itertuples(index=False))
    ]
    kb = build_kb(instances, source=source)
    logger.info("Loaded %d knowledge instances (%d entities) from %s", len(kb), len(kb.entity_index), path)
    return kb


def save_kb(kb: KnowledgeBase, path: Path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path = prepare_output(path)
    try:
        if fmt == "jsonl":
            with open(path, "w", encoding="utf-8") as handle:
                for inst in kb.instances:
                    handle.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")
        else:
            kb.to_frame()[list(dq.KB_COLUMNS)].to_csv(path, index=False, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"Cannot write knowledge base '{path}': {exc}") from exc
    return path


def lookup(kb: KnowledgeBase, entity: str, attribute: str) -> Optional[str]:
    """Return the content stored for the pair, or None when the pair is absent."""
    instance_id = kb.pair_index.get((normalize(entity), normalize(attribute)))
    if instance_id is None:
        return None
    return kb.get(instance_id).content


def lookup_instance(kb: KnowledgeBase, entity: str, attribute: str) -> Optional[KnowledgeInstance]:
    instance_id = kb.pair_index.get((normalize(entity), normalize(attribute)))
    return None if instance_id is None else kb.get(instance_id)


def attributes_of(kb: KnowledgeBase, entity: str) -> List[str]:
    return list(kb.entity_index.get(normalize(entity), ()))


def _bigrams(text: str) -> set[str]:
    return {text[i : i + 2] for i in range(len(text) - 1)}


def dice(a: str, b: str) -> float:
    """Character-bigram Dice coefficient of two already-normalized strings."""
    left, right = _bigrams(a), _bigrams(b)
    if not left or not right:
        return 0.0
    return 2.0 * len(left & right) / (len(left) + len(right))


def resolve_attribute(kb: KnowledgeBase, entity: str, attr_pred: str) -> Optional[str]:
    """Map a predicted attribute onto a canonical attribute of ``entity``.

    Ladder: exact normalized match, then substring containment either way,
    then the best bigram Dice score at or above 0.5. Ties go to the
    lexicographically smallest candidate.
    """
    candidates = attributes_of(kb, entity)
    target = normalize(attr_pred)
    if not candidates or not target:
        return None

    keyed = [(normalize(c), c) for c in candidates]
    for key, canonical in keyed:
        if key == target:
            return canonical

    contained = sorted(c for key, c in keyed if target in key or key in target)
    if contained:
        return contained[0]

    best: Optional[Tuple[float, str]] = None
    for key, canonical in keyed:
        score = dice(target, key)
        if score < DICE_THRESHOLD:
            continue
        if best is None or score > best[0] or (score == best[0] and canonical < best[1]):
            best = (score, canonical)
    return best[1] if best else None
