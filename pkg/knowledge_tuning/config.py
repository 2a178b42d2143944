"""Run configuration and trainer hyperparameter defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

# LoRA fine-tuning setup for the main experiments; consumed by an external trainer.
TRAINING_HYPERPARAMETERS: Dict[str, Any] = {
    "batch_size": 128,
    "max_epoch": 10,
    "learning_rate": 5e-4,
    "lora_rank": 8,
    "lora_alpha": 16,
    "lora_dropout": 0.05,
    "lora_target_modules": ["q_proj", "v_proj"],
}


@dataclass
class RunConfig:
    command: str
    out_dir: Path
    seed: int = 42
    locale: str = "en"
    concurrency: int = 1
    kb_path: Optional[Path] = None
    dataset_paths: List[Path] = field(default_factory=list)
    templates_path: Optional[Path] = None
    template_digest: Optional[str] = None
    backend: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def input_paths(self) -> List[Path]:
        paths = [p for p in (self.kb_path, self.templates_path) if p is not None]
        return paths + list(self.dataset_paths)
