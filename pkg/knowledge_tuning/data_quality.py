"""Data quality checks and table loading for knowledge, dataset and rating files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, Tuple

import pandas as pd
import pandera as pa
from pandera import Check

from .errors import DataError

SCORE_GRID = (1.0, 1.5, 2.0, 2.5, 3.0)
LOSS_COMPONENTS = ("entity", "attribute", "response_k", "response_plain")
DATASET_FLAGS = frozenset({"chatgpt_flagged", "expert_verified"})

KB_COLUMNS = ("entity", "attribute", "content")
DATASET_COLUMNS = ("id", "entity", "attribute", "content", "question", "answer", "flags")
RATING_COLUMNS = ("rater_id", "item_id", "helpfulness", "harmlessness")

_not_blank = Check(lambda s: s.astype(str).str.strip().str.len() > 0, error="blank value")


def build_schemas() -> Dict[str, pa.DataFrameSchema]:
    return {
        "kb": pa.DataFrameSchema(
            {
                "entity": pa.Column(str),
                "attribute": pa.Column(str),
                "content": pa.Column(str),
                # *_key columns hold normalized text and must survive normalization
                "entity_key": pa.Column(str, Check.str_length(min_value=1)),
                "attribute_key": pa.Column(str, Check.str_length(min_value=1)),
                "content_key": pa.Column(str, Check.str_length(min_value=1)),
                "line": pa.Column(int),
            }
        ),
        "dataset": pa.DataFrameSchema(
            {
                "id": pa.Column(str, _not_blank, unique=True),
                "entity": pa.Column(str, _not_blank),
                "attribute": pa.Column(str, _not_blank),
                "content": pa.Column(str, _not_blank),
                "question": pa.Column(str, _not_blank),
                "answer": pa.Column(str, _not_blank),
                "flags": pa.Column(
                    object,
                    Check(lambda v: set(v) <= DATASET_FLAGS, element_wise=True, error="unknown flag"),
                ),
            }
        ),
        "ratings": pa.DataFrameSchema(
            {
                "rater_id": pa.Column(str, _not_blank),
                "item_id": pa.Column(str, _not_blank),
                "helpfulness": pa.Column(float, Check.isin(SCORE_GRID), coerce=True),
                "harmlessness": pa.Column(float, Check.isin(SCORE_GRID), coerce=True),
                "system": pa.Column(str, required=False, nullable=True),
                "grounded": pa.Column(bool, required=False, coerce=True),
            }
        ),
        "training_records": pa.DataFrameSchema(
            {
                "loss_component": pa.Column(str, Check.isin(LOSS_COMPONENTS)),
                "prompt": pa.Column(str, _not_blank),
                "target": pa.Column(str, _not_blank),
                "source_id": pa.Column(str, _not_blank),
            },
            strict=True,
        ),
    }


SCHEMAS = build_schemas()


def validate_table(df: pd.DataFrame, table_name: str) -> pd.DataFrame:
    """Validate ``df`` against the named schema, reporting file lines when a ``line`` column exists."""
    schema = SCHEMAS[table_name]
    try:
        return schema.validate(df, lazy=True)
    except pa.errors.SchemaErrors as exc:
        failures = exc.failure_cases
        examples: List[str] = []
        for _, case in failures.head(5).iterrows():
            where = ""
            index = case.get("index")
            if "line" in df.columns and index is not None and index in df.index:
                where = f"line {int(df.loc[index, 'line'])}: "
            examples.append(f"{where}{case['column']} failed {case['check']} ({case['failure_case']!r})")
        raise DataError(
            f"{table_name}: {len(failures)} domain constraint failures. Examples: {examples}"
        ) from exc


def assert_unique(df: pd.DataFrame, table_name: str, columns: List[str], label: str) -> None:
    duplicated = df[df.duplicated(subset=columns, keep="first")]
    if duplicated.empty:
        return
    first = duplicated.iloc[0]
    where = f"line {int(first['line'])}" if "line" in df.columns else f"row {duplicated.index[0]}"
    examples = [tuple(row) for row in duplicated[columns].head(5).itertuples(index=False)]
    raise DataError(
        f"{table_name}: duplicate {label} at {where}; {len(duplicated)} duplicates. Examples: {examples}"
    )


def iter_jsonl(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_number, object)`` for every non-blank line of a JSONL file."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name}: malformed JSON at line {line_number}: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise DataError(f"{path.name}: line {line_number} is not a JSON object")
            yield line_number, record


def load_table(path: Path) -> pd.DataFrame:
    """Read a jsonl, csv or parquet table into a frame."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing data file '{path}'.")

    suffix = path.suffix.lower()
    if suffix == ".parquet":
        return pd.read_parquet(path)
    if suffix == ".csv":
        try:
            return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"{path.name}: unreadable CSV: {exc}") from exc
    if suffix in (".jsonl", ".json"):
        rows = [record for _, record in iter_jsonl(path)]
        return pd.DataFrame.from_records(rows)

    raise DataError(f"Unsupported table format for '{path.name}'. Expected .jsonl, .csv or .parquet.")
