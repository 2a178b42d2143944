"""Seed data: the shipped toy knowledge base and seeded synthetic KBs, datasets and gold scripts."""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import prompts as pr
from .datagen import DatasetInstance
from .kb_store import KnowledgeBase, KnowledgeInstance, attributes_of, build_kb
from .prompts import PromptTemplates

TOY_KNOWLEDGE: Tuple[Tuple[str, str, str], ...] = (
    (
        "acetaminophen dihydrocodeine",
        "adverse reactions",
        "Agitated, nausea, vomiting, constipation, dizziness, seizure, excitement.",
    ),
    (
        "cicatricial pyloric obstruction",
        "symptom",
        "vomiting during afternoon and night, abdominal pain during the night and after eating.",
    ),
    (
        "gastric cancer",
        "symptom",
        "Early stages of gastric cancer: Mostly no obvious symptoms. A few might experience nausea, vomiting, "
        "or discomfort in the upper abdomen, and a feeling of fullness after eating. "
        "Condition progress: Symptoms such as intensified pain in the upper abdomen, decreased appetite, nausea, "
        "vomiting, fatigue, and weight loss gradually appear. Some patients may exhibit signs such as vomiting "
        "blood, passing black stools, or a lump in the upper abdomen.",
    ),
)

TOY_QA: Tuple[Tuple[str, str], ...] = (
    (
        "What are the common adverse reactions to acetaminophen dihydrocodeine?",
        "Adverse reactions to acetaminophen and dihydrocodeine mainly include restlessness, nausea, vomiting, "
        "constipation, dizziness, seizures and excitement.",
    ),
    (
        "When should we suspect a cicatricial pyloric obstruction?",
        "Suspect cicatricial pyloric obstruction when vomiting occurs in the afternoon and at night, together with "
        "abdominal pain during the night and after eating.",
    ),
    (
        "What are the common symptoms of gastric cancer?",
        "In the early stages of gastric cancer, most patients show no obvious symptoms. A few may experience "
        "nausea, vomiting, discomfort in the upper abdomen, or a feeling of fullness after eating. As the disease "
        "progresses, upper abdominal pain, decreased appetite, fatigue and weight loss may emerge.",
    ),
)

ATTRIBUTES = (
    "symptom",
    "pathogeny",
    "treatment",
    "complication",
    "diagnosis",
    "prevention",
    "adverse reactions",
    "contraindication",
)
_PREFIXES = ("cardio", "gastro", "neuro", "hepato", "nephro", "dermato", "osteo", "pneumo", "myo", "entero")
_SUFFIXES = ("itis", "pathy", "algia", "megaly", "sclerosis", "plasia", "emia", "oma")
_VOCABULARY = (
    "pain", "fever", "nausea", "fatigue", "rest", "fluids", "infection", "biopsy", "imaging", "surgery",
    "antibiotics", "inflammation", "swelling", "dizziness", "rash", "diet", "exercise", "screening",
    "vaccination", "bleeding", "cough", "weakness", "therapy", "monitoring", "dose", "allergy",
)


def build_toy_kb() -> KnowledgeBase:
    instances = [
        KnowledgeInstance(id=i, entity=e, attribute=a, content=c) for i, (e, a, c) in enumerate(TOY_KNOWLEDGE)
    ]
    return build_kb(instances, source="toy")


def build_toy_dataset() -> List[DatasetInstance]:
    return [
        DatasetInstance(id=f"{i}-0", entity=e, attribute=a, content=c, question=q, answer=ans)
        for i, ((e, a, c), (q, ans)) in enumerate(zip(TOY_KNOWLEDGE, TOY_QA))
    ]


def build_synthetic_kb(n_triples: int, seed: int = 42) -> KnowledgeBase:
    """Seeded KB of made-up entities, each holding a random subset of ``ATTRIBUTES``."""
    rng = np.random.default_rng(seed)
    instances: List[KnowledgeInstance] = []
    entity_no = 0
    while len(instances) < n_triples:
        entity_no += 1
        entity = f"{rng.choice(_PREFIXES)}{rng.choice(_SUFFIXES)} type {entity_no}"
        n_attrs = int(rng.integers(1, len(ATTRIBUTES) + 1))
        for attribute in rng.choice(ATTRIBUTES, size=n_attrs, replace=False):
            if len(instances) == n_triples:
                break
            words = rng.choice(_VOCABULARY, size=int(rng.integers(4, 12)))
            content = f"{entity} {attribute}: " + ", ".join(str(w) for w in words) + "."
            instances.append(
                KnowledgeInstance(id=len(instances), entity=entity, attribute=str(attribute), content=content)
            )
    return build_kb(instances, source=f"synthetic:{n_triples}:{seed}")


def build_synthetic_dataset(kb: KnowledgeBase) -> List[DatasetInstance]:
    """One gold QA instance per triple; the answer restates the knowledge content."""
    return [
        DatasetInstance(
            id=f"{k.id}-0",
            entity=k.entity,
            attribute=k.attribute,
            content=k.content,
            question=f"What is the {k.attribute} of {k.entity}?",
            answer=f"The {k.attribute} of {k.entity} is as follows. {k.content}",
        )
        for k in kb.instances
    ]


def gold_script(
    dataset: Sequence[DatasetInstance],
    templates: PromptTemplates,
    kb: Optional[KnowledgeBase] = None,
    include_datagen: bool = False,
) -> Dict[Tuple[str, str], str]:
    """(tag, prompt) -> response table that echoes gold entities, attributes and answers.

    With ``kb`` the attribute prompt carries that KB's candidate list.
    """
    table: Dict[Tuple[str, str], str] = {}
    for inst in dataset:
        q = inst.question
        candidates = attributes_of(kb, inst.entity) if kb is not None else None
        table[("entity", pr.render_entity_prompt(templates, q))] = inst.entity
        table[("attribute", pr.render_attr_prompt(templates, q, inst.entity, candidates))] = inst.attribute
        table[("response_k", pr.render_rk_prompt(templates, q, inst.content))] = inst.answer
        table[("response_plain", pr.render_plain_prompt(templates, q))] = inst.answer
        if include_datagen:
            datagen_prompt = pr.render_datagen_prompt(templates, inst.entity, inst.attribute, inst.content)
            table[("datagen", datagen_prompt)] = f"Q: {q} A: {inst.answer}"
            assess_prompt = pr.render_self_assess_prompt(templates, q, inst.answer, inst.content)
            table[("self_assess", assess_prompt)] = "yes"
        table[("judge", pr.render_judge_prompt(templates, q, inst.answer))] = "good"
    return table


def script_records(table: Dict[Tuple[str, str], str]) -> List[Dict[str, Any]]:
    """Rows for a scripted-backend JSONL file."""
    return [{"tag": tag, "prompt": prompt, "response": response} for (tag, prompt), response in table.items()]
