"""Export helpers: JSONL/parquet writers and the run manifest."""

from __future__ import annotations

import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import pyarrow
import pandera
import yaml

from . import __version__
from .config import RunConfig
from .errors import DataError
from .utils import prepare_output, sha256_file

logger = logging.getLogger(__name__)

DATASET_FORMATS = ("jsonl", "parquet")
SPLIT_NAMES = ("train", "valid", "test")


def write_jsonl(records: Iterable[Mapping[str, Any]], path: Path) -> Path:
    """One JSON object per line, keys sorted, UTF-8 kept literal."""
    path = prepare_output(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"Cannot write '{path}': {exc}") from exc
    return path


def write_json(payload: Any, path: Path) -> Path:
    path = prepare_output(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, ensure_ascii=False, sort_keys=True, indent=2, default=str)
            handle.write("\n")
    except OSError as exc:
        raise DataError(f"Cannot write '{path}': {exc}") from exc
    return path


def write_dataset(dataset: Sequence[Any], path: Path, fmt: str = "jsonl") -> Path:
    if fmt not in DATASET_FORMATS:
        raise DataError(f"Unsupported dataset format '{fmt}'. Expected one of {list(DATASET_FORMATS)}.")
    rows = [inst.to_dict() for inst in dataset]
    if fmt == "jsonl":
        return write_jsonl(rows, path)
    path = prepare_output(path)
    frame = pd.DataFrame(rows, columns=["id", "entity", "attribute", "content", "question", "answer", "flags"])
    frame.to_parquet(path, index=False)
    return path


def write_splits(splits: Sequence[Sequence[Any]], out_dir: Path) -> Dict[str, Path]:
    if len(splits) != len(SPLIT_NAMES):
        raise DataError(f"Expected {len(SPLIT_NAMES)} splits, got {len(splits)}")
    return {
        name: write_dataset(part, Path(out_dir) / f"{name}.jsonl")
        for name, part in zip(SPLIT_NAMES, splits)
    }


def write_responses(responses: Sequence[Any], path: Path) -> Path:
    return write_jsonl((r.to_dict() for r in responses), path)


def write_training_records(records: Sequence[Any], path: Path) -> Path:
    return write_jsonl((r.to_dict() for r in records), path)


def write_report(report: Mapping[str, Any], path: Path) -> Path:
    return write_json(report, path)


def package_versions() -> Dict[str, str]:
    return {
        "knowledge_tuning": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pandera": pandera.__version__,
        "pyarrow": pyarrow.__version__,
        "pyyaml": yaml.__version__,
    }


def build_manifest(config: RunConfig, outputs: Optional[Sequence[Path]] = None) -> Dict[str, Any]:
    inputs: List[Dict[str, str]] = []
    for path in config.input_paths():
        path = Path(path)
        if path.is_file():
            inputs.append({"path": str(path), "sha256": sha256_file(path)})
    return {
        "command": config.command,
        "seed": config.seed,
        "locale": config.locale,
        "concurrency": config.concurrency,
        "backend": config.backend,
        "backend_kind": (config.backend or {}).get("kind"),
        "template_sha256": config.template_digest,
        "inputs": inputs,
        "outputs": sorted(str(p) for p in outputs or []),
        "options": config.extra,
        "versions": package_versions(),
    }


def emit_manifest(config: RunConfig, outputs: Optional[Sequence[Path]] = None) -> Path:
    """Write ``manifest_<command>.json`` into the run's output directory."""
    manifest = build_manifest(config, outputs)
    manifest["created_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path = Path(config.out_dir) / f"manifest_{config.command.replace(' ', '_')}.json"
    write_json(manifest, path)
    logger.info("Manifest written to %s", path)
    return path
