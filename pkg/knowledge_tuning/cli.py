"""Command-line interface for knowledge-tuning: KB building, retrieval, data generation, inference and evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import datagen as dg
from . import evaluation as ev
from . import exporter
from . import retrieval as rt
from .config import RunConfig
from .datagen import DatasetInstance
from .errors import BackendError, DataError, KnowledgeTuningError, UsageError
from .gateway import BACKEND_KINDS, Backend, BackendDescriptor, HttpEmbedder, build_backend
from .kb_store import KnowledgeBase, load_kb, lookup
from .pipeline import GroundedResponse, InferenceOptions, infer, infer_batch, load_queries, load_responses
from .prompts import LOCALES, PromptTemplates, load_templates
from .splits import DEFAULT_ENTITY_FRACTIONS, DEFAULT_FEW_SHOT_SIZES, SplitSpec, few_shot_subsets, split, unseen_entity_splits
from .utils import log_counts, setup_logging
from .validation import validate_alignment

logger = logging.getLogger(__name__)

SNAPSHOT_SUFFIXES = (".idx", ".snapshot")


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises UsageError instead of exiting with status 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="out", help="Output directory for artifacts and manifests (default: out)")
    common.add_argument("--seed", type=int, default=42, help="Random seed (default: 42)")
    common.add_argument("--locale", choices=LOCALES, default="en", help="Prompt template locale (default: en)")
    common.add_argument("--templates", type=Path, default=None, help="YAML file overriding template keys")
    common.add_argument(
        "--literal-plain",
        action="store_true",
        help="Use the literal duplicated wording for the plain-response prompt",
    )
    common.add_argument("--backend", choices=BACKEND_KINDS, default=None, help="Generation backend kind")
    common.add_argument("--script", type=Path, default=None, help="Scripted backend JSONL {prompt, response[, tag]}")
    common.add_argument("--cache", type=Path, default=None, help="Replay cache JSONL")
    common.add_argument(
        "--record-from",
        choices=("http", "scripted"),
        default=None,
        help="With --backend replay: record misses from this backend instead of failing",
    )
    common.add_argument("--endpoint", default=None, help="OpenAI-compatible base URL")
    common.add_argument("--model", default=None, help="Model name for the http backend")
    common.add_argument(
        "--api-key-env",
        default="OPENAI_API_KEY",
        help="Name of the environment variable holding the API key (default: OPENAI_API_KEY)",
    )
    common.add_argument("--max-concurrency", type=int, default=4, help="In-flight HTTP requests (default: 4)")
    common.add_argument("--rpm", type=int, default=0, help="Requests per minute, 0 = unlimited (default: 0)")
    common.add_argument("--concurrency", type=int, default=1, help="Worker threads for batch work (default: 1)")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    common.add_argument("--json-logs", action="store_true", help="Emit logs as JSON lines on stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="knowledge_tuning", description="Knowledge-tuning toolkit for medical QA.")
    commands = parser.add_subparsers(dest="command", required=True)

    def leaf(group: Any, name: str, handler: Callable[..., Dict[str, Any]], help_text: str) -> argparse.ArgumentParser:
        sub = group.add_parser(name, parents=[common], help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        return sub

    kb = commands.add_parser("kb", help="Knowledge base operations").add_subparsers(dest="action", required=True)
    p = leaf(kb, "build", _kb_build, "Load a KB file and write an index snapshot.")
    p.add_argument("--in", dest="input", type=Path, required=True, help="KB file (.jsonl or .csv)")
    p.add_argument("--format", choices=("jsonl", "csv"), default=None, help="KB format (default: from suffix)")
    p.add_argument("--out", type=Path, required=True, help="Snapshot path, e.g. kb.idx")
    p.add_argument("--dim", type=int, default=rt.DEFAULT_DIM, help=f"Embedding dimension (default: {rt.DEFAULT_DIM})")
    p.add_argument("--no-dense", action="store_true", help="Skip the dense index")
    p = leaf(kb, "lookup", _kb_lookup, "Exact (entity, attribute) lookup.")
    p.add_argument("--kb", type=Path, required=True, help="KB file or index snapshot")
    p.add_argument("--entity", required=True)
    p.add_argument("--attribute", required=True)

    retrieve = commands.add_parser("retrieve", help="Baseline retrievers").add_subparsers(dest="action", required=True)
    for name, handler in (("bm25", _retrieve_bm25), ("dense", _retrieve_dense)):
        p = leaf(retrieve, name, handler, f"Top-k {name} retrieval over the knowledge base.")
        p.add_argument("--kb", type=Path, required=True, help="KB file or index snapshot")
        p.add_argument("--query", required=True)
        p.add_argument("-k", type=int, default=5, help="Number of results (default: 5)")
        if name == "dense":
            p.add_argument(
                "--embedder",
                choices=("hash", "http"),
                default="hash",
                help="Hashed character bigrams or an OpenAI-compatible embeddings endpoint (default: hash)",
            )

    data = commands.add_parser("datagen", help="Dataset generation and splitting").add_subparsers(
        dest="action", required=True
    )
    p = leaf(data, "generate", _datagen_generate, "Generate QA pairs for every knowledge triple.")
    p.add_argument("--kb", type=Path, required=True, help="KB file or index snapshot")
    p.add_argument("--out", type=Path, default=None, help="Dataset path (default: <out-dir>/dataset.jsonl)")
    p.add_argument("--format", choices=exporter.DATASET_FORMATS, default="jsonl", help="Dataset format (default: jsonl)")
    p.add_argument("--repeats", type=int, default=1, help="QA pairs per triple (default: 1)")
    p.add_argument("--temperature", type=float, default=0.7, help="Sampling temperature (default: 0.7)")
    p.add_argument("--no-self-check", action="store_true", help="Skip the self-assessment pass")
    p = leaf(data, "split", _datagen_split, "Seeded 7:1:2 train/valid/test split.")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2), help="Split ratios (default: 0.7 0.1 0.2)")
    p = leaf(data, "emit", _datagen_emit, "Emit training records and the trainer config.")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--kb", type=Path, default=None, help="Check every instance against this KB first")
    p.add_argument("--out", type=Path, default=None, help="Records path (default: <out-dir>/training_records.jsonl)")
    p = leaf(data, "fewshot", _datagen_fewshot, "Nested few-shot training subsets.")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_FEW_SHOT_SIZES), help="Subset sizes (default: 100..800)")
    p = leaf(data, "unseen", _datagen_unseen, "Unseen-entity training sets over a fixed test set.")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--fractions", type=float, nargs="+", default=list(DEFAULT_ENTITY_FRACTIONS), help="Entity fractions")

    p = leaf(commands, "infer", _infer, "Answer one query or a batch file through the knowledge function.")
    p.add_argument("--kb", type=Path, required=True, help="KB file or index snapshot")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--query", default=None, help="Single question; prints the response JSON")
    source.add_argument("--queries", type=Path, default=None, help="JSONL of {id, question}")
    p.add_argument("--out", type=Path, default=None, help="Responses path (default: <out-dir>/responses.jsonl)")
    p.add_argument("--use-candidates", action="store_true", help="List the entity's KB attributes in the attribute prompt")
    p.add_argument("--response-temperature", type=float, default=0.0, help="Response sampling temperature (default: 0.0)")

    evaluate = commands.add_parser("eval", help="Metrics").add_subparsers(dest="action", required=True)
    for name, handler, help_text in (
        ("entity", _eval_entity, "Entity accuracy of predicted entities."),
        ("knowledge", _eval_knowledge, "Knowledge accuracy of grounded responses."),
        ("bleu", _eval_bleu, "Mean BLEU-1 of responses against gold answers."),
        ("report", _eval_report, "Full metric report."),
    ):
        p = leaf(evaluate, name, handler, help_text)
        p.add_argument("--responses", type=Path, required=True)
        p.add_argument("--gold", type=Path, required=True, help="Gold dataset")
        if name == "report":
            p.add_argument("--ratings", type=Path, default=None, help="Expert ratings file")
            p.add_argument("--judge", action="store_true", help="Also run the LLM judge (needs --backend)")
    p = leaf(evaluate, "kappa", _eval_kappa, "Cohen's kappa between the two raters.")
    p.add_argument("--ratings", type=Path, required=True)
    p.add_argument("--dimension", choices=("helpfulness", "harmlessness"), default=None, help="Default: both")
    p = leaf(evaluate, "h2", _eval_h2, "Mean helpfulness and harmlessness.")
    p.add_argument("--ratings", type=Path, required=True)
    p.add_argument("--group-by", choices=ev.GROUP_BY, default="none", help="Grouping (default: none)")
    p.add_argument("--responses", type=Path, default=None, help="Copy grounded flags from these responses")
    p = leaf(evaluate, "judge", _eval_judge, "Score responses good/moderate/bad with an LLM judge.")
    p.add_argument("--responses", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="Verdicts path (default: <out-dir>/verdicts.jsonl)")
    p = leaf(evaluate, "sample", _eval_sample, "Seeded evaluation subset of a test set.")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--n", type=int, default=ev.DEFAULT_EVAL_SAMPLE, help=f"Sample size (default: {ev.DEFAULT_EVAL_SAMPLE})")
    p.add_argument("--out", type=Path, default=None, help="Sample path (default: <out-dir>/eval_sample.jsonl)")
    return parser


class _Session:
    """State shared by one command invocation: parsed flags, templates, backend, outputs."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.outputs: List[Path] = []
        self._templates: Optional[PromptTemplates] = None
        self._backend: Optional[Backend] = None
        self.descriptor: Optional[BackendDescriptor] = None
        self.config = RunConfig(
            command=" ".join(p for p in (args.command, getattr(args, "action", None)) if p),
            out_dir=self.out_dir,
            seed=args.seed,
            locale=args.locale,
            concurrency=args.concurrency,
            templates_path=args.templates,
        )

    @property
    def templates(self) -> PromptTemplates:
        if self._templates is None:
            self._templates = load_templates(self.args.templates, self.args.locale, self.args.literal_plain)
            self.config.template_digest = self._templates.digest()
        return self._templates

    def make_descriptor(self, kind: str, record_from: Optional[BackendDescriptor] = None) -> BackendDescriptor:
        a = self.args
        return BackendDescriptor(
            kind=kind,
            endpoint=a.endpoint,
            model=a.model,
            credential_env=a.api_key_env,
            script_path=a.script,
            cache_path=a.cache,
            record_from=record_from,
            max_concurrency=a.max_concurrency,
            requests_per_minute=a.rpm,
        )

    @property
    def backend(self) -> Backend:
        if self._backend is None:
            a = self.args
            if a.backend is None:
                raise UsageError(f"'{self.config.command}' needs a generation backend (--backend)")
            if a.backend == "scripted" and a.script is None:
                raise UsageError("--backend scripted needs --script")
            if a.backend == "replay" and a.cache is None:
                raise UsageError("--backend replay needs --cache")
            if a.record_from and a.backend != "replay":
                raise UsageError("--record-from only applies to --backend replay")
            inner = self.make_descriptor(a.record_from) if a.record_from else None
            self.descriptor = self.make_descriptor(a.backend, record_from=inner)
            self._backend = build_backend(self.descriptor)
            self.config.backend = self._backend.describe()
        return self._backend

    def audit_backend(self) -> Optional[Dict[str, Any]]:
        """Backend summary for reports; recording and replaying the same cache describe alike."""
        if self._backend is None:
            return None
        info = dict(self._backend.describe())
        info.pop("mode", None)
        info.pop("record_from", None)
        return info

    def load_kb(self, path: Path) -> KnowledgeBase:
        self.config.kb_path = path
        if path.suffix.lower() in SNAPSHOT_SUFFIXES:
            return rt.load_snapshot(path)[0]
        return load_kb(path, source=str(path))

    def input(self, path: Optional[Path]) -> Optional[Path]:
        if path is not None:
            self.config.dataset_paths.append(path)
        return path

    def output(self, path: Optional[Path], default_name: str) -> Path:
        path = path if path is not None else self.out_dir / default_name
        self.outputs.append(path)
        return path


def _kb_build(s: _Session) -> Dict[str, Any]:
    a = s.args
    s.config.kb_path = a.input
    kb = load_kb(a.input, fmt=a.format, source=str(a.input))
    bm25 = rt.build_bm25(kb)
    dense = None if a.no_dense else rt.build_embedding_index(kb, dim=a.dim)
    path = rt.save_snapshot(s.output(a.out, "kb.idx"), kb, bm25, dense)
    s.config.extra.update(dim=a.dim, dense=dense is not None)
    return {"instances": len(kb), "vocabulary": len(bm25.postings), "dense": len(dense) if dense else 0, "index": str(path)}


def _kb_lookup(s: _Session) -> Dict[str, Any]:
    a = s.args
    content = lookup(s.load_kb(a.kb), a.entity, a.attribute)
    return {"entity": a.entity, "attribute": a.attribute, "hit": content is not None, "content": content}


def _hits(kb: KnowledgeBase, ranked: Sequence[Any]) -> Dict[str, Any]:
    return {
        "results": [
            {"id": doc_id, "score": score, **kb.get(doc_id).to_dict()} for doc_id, score in ranked
        ]
    }


def _retrieve_bm25(s: _Session) -> Dict[str, Any]:
    a = s.args
    kb, bm25 = s.load_kb(a.kb), None
    if a.kb.suffix.lower() in SNAPSHOT_SUFFIXES:
        bm25 = rt.load_snapshot(a.kb)[1]
    bm25 = bm25 or rt.build_bm25(kb)
    return {"query": a.query, **_hits(kb, rt.bm25_retrieve(bm25, a.query, a.k))}


def _retrieve_dense(s: _Session) -> Dict[str, Any]:
    a = s.args
    kb = s.load_kb(a.kb)
    embedder, tag = None, rt.EMBEDDER_TAG
    if a.embedder == "http":
        embedder = HttpEmbedder(s.make_descriptor("http"))
        tag = embedder.tag
    index = None
    if a.kb.suffix.lower() in SNAPSHOT_SUFFIXES:
        index = rt.load_snapshot(a.kb)[2]
    if index is None or index.embedder_tag != tag:
        index = rt.build_embedding_index(kb, embedder=embedder, embedder_tag=tag)
    return {"query": a.query, **_hits(kb, rt.dense_retrieve(index, a.query, a.k, embedder=embedder))}


def _datagen_generate(s: _Session) -> Dict[str, Any]:
    a = s.args
    kb = s.load_kb(a.kb)
    dataset, failures = dg.build_dataset(
        s.backend,
        s.templates,
        kb,
        repeats=a.repeats,
        self_check=not a.no_self_check,
        concurrency=a.concurrency,
        temperature=a.temperature,
    )
    default_name = "dataset.parquet" if a.format == "parquet" else "dataset.jsonl"
    path = exporter.write_dataset(dataset, s.output(a.out, default_name), fmt=a.format)
    if failures:
        exporter.write_jsonl([f.to_dict() for f in failures], s.output(None, "failures.jsonl"))
    s.config.extra.update(repeats=a.repeats, self_check=not a.no_self_check, temperature=a.temperature)
    return {
        "instances": len(dataset),
        "flagged": sum("chatgpt_flagged" in inst.flags for inst in dataset),
        "failures": len(failures),
        "dataset": str(path),
    }


def _datagen_split(s: _Session) -> Dict[str, Any]:
    a = s.args
    dataset = dg.load_dataset(s.input(a.dataset))
    spec = SplitSpec(seed=a.seed, ratios=tuple(a.ratios))
    train, valid, test = split(dataset, spec)
    parts = {"train": train, "valid": valid, "test": test}
    log_counts("Split", parts, ["train", "valid", "test"])
    paths = exporter.write_splits([train, valid, test], s.out_dir)
    s.outputs.extend(paths.values())
    s.config.extra["ratios"] = list(a.ratios)
    return {name: len(part) for name, part in parts.items()}


def _datagen_emit(s: _Session) -> Dict[str, Any]:
    a = s.args
    dataset = dg.load_dataset(s.input(a.dataset))
    kb = s.load_kb(a.kb) if a.kb is not None else None
    records = dg.emit_dataset_records(dataset, s.templates, kb=kb)
    exporter.write_training_records(records, s.output(a.out, "training_records.jsonl"))
    exporter.write_jsonl(dg.derive_dstar(dataset), s.output(None, "instruction_pairs.jsonl"))
    dg.emit_training_config(s.output(None, "training_config.yaml"))
    counts: Dict[str, int] = {}
    for record in records:
        counts[record.loss_component] = counts.get(record.loss_component, 0) + 1
    return {"instances": len(dataset), "records": counts}


def _datagen_fewshot(s: _Session) -> Dict[str, Any]:
    a = s.args
    dataset = dg.load_dataset(s.input(a.dataset))
    subsets = few_shot_subsets(dataset, a.sizes, seed=a.seed)
    for size, subset in zip(a.sizes, subsets):
        exporter.write_dataset(subset, s.output(None, f"fewshot_{size}.jsonl"))
    s.config.extra["sizes"] = list(a.sizes)
    return {"subsets": {str(size): len(subset) for size, subset in zip(a.sizes, subsets)}}


def _datagen_unseen(s: _Session) -> Dict[str, Any]:
    a = s.args
    dataset = dg.load_dataset(s.input(a.dataset))
    splits, test = unseen_entity_splits(dataset, a.fractions, seed=a.seed)
    summary = {}
    for entry in splits:
        exporter.write_dataset(entry.train, s.output(None, f"unseen_{entry.fraction:g}.jsonl"))
        summary[f"{entry.fraction:g}"] = {"entities": len(entry.entities), "train": len(entry.train)}
    exporter.write_dataset(test, s.output(None, "unseen_test.jsonl"))
    s.config.extra["fractions"] = list(a.fractions)
    return {"fractions": summary, "test": len(test)}


def _infer(s: _Session) -> Dict[str, Any]:
    a = s.args
    kb = s.load_kb(a.kb)
    options = InferenceOptions(use_candidates=a.use_candidates, response_temperature=a.response_temperature)
    s.config.extra.update(use_candidates=a.use_candidates, response_temperature=a.response_temperature)
    if a.query is not None:
        return infer(s.backend, s.templates, kb, a.query, options).to_dict()

    ids, questions = load_queries(s.input(a.queries))
    responses = infer_batch(s.backend, s.templates, kb, questions, a.concurrency, options, item_ids=ids)
    path = exporter.write_responses(responses, s.output(a.out, "responses.jsonl"))
    return {
        "queries": len(responses),
        "grounded": sum(r.grounded for r in responses),
        "errors": sum(r.error is not None for r in responses),
        "responses": str(path),
    }


def _eval_inputs(s: _Session) -> Tuple[List[GroundedResponse], List[DatasetInstance]]:
    responses = load_responses(s.input(s.args.responses))
    golds = dg.load_dataset(s.input(s.args.gold))
    return responses, golds


def _eval_entity(s: _Session) -> Dict[str, Any]:
    responses, golds = _eval_inputs(s)
    by_id = {g.id: g for g in golds}
    validate_alignment(responses, golds)
    preds = [r.trace.entity_raw or "" for r in responses]
    gold_entities = [by_id[str(r.item_id)].entity for r in responses]
    return {
        "n": len(preds),
        "entity_accuracy": ev.entity_accuracy(preds, gold_entities),
        "entity_accuracy_strict": ev.entity_accuracy(preds, gold_entities, strict=True),
    }


def _eval_knowledge(s: _Session) -> Dict[str, Any]:
    responses, golds = _eval_inputs(s)
    return {
        "n": len(responses),
        "knowledge_accuracy": ev.knowledge_accuracy(responses, golds),
        "pair_accuracy": ev.pair_accuracy(responses, golds),
        "grounded_rate": ev.grounded_rate(responses),
    }


def _eval_bleu(s: _Session) -> Dict[str, Any]:
    responses, golds = _eval_inputs(s)
    validate_alignment(responses, golds)
    by_id = {g.id: g for g in golds}
    scored = [r for r in responses if r.error is None and r.response.strip()]
    if not scored:
        raise DataError("No successful responses to score")
    return {
        "n": len(scored),
        "bleu1": ev.mean_bleu1([r.response for r in scored], [by_id[str(r.item_id)].answer for r in scored]),
    }


def _eval_kappa(s: _Session) -> Dict[str, Any]:
    ratings = ev.load_ratings(s.input(s.args.ratings))
    dims = [s.args.dimension] if s.args.dimension else ["helpfulness", "harmlessness"]
    return {"kappa": {dim: ev.rating_kappa(ratings, dim) for dim in dims}}


def _eval_h2(s: _Session) -> Dict[str, Any]:
    a = s.args
    ratings = ev.load_ratings(s.input(a.ratings))
    if a.responses is not None:
        ratings = ev.attach_grounded(ratings, load_responses(s.input(a.responses)))
    groups = ev.h2_aggregate(ratings, a.group_by)
    return {"group_by": a.group_by, "groups": {name: summary.to_dict() for name, summary in groups.items()}}


def _eval_judge(s: _Session) -> Dict[str, Any]:
    a = s.args
    responses = load_responses(s.input(a.responses))
    verdicts = ev.judge_responses(s.backend, s.templates, responses, concurrency=a.concurrency)
    exporter.write_jsonl([v.to_dict() for v in verdicts], s.output(a.out, "verdicts.jsonl"))
    return {"judge": ev.mean_judge_score(verdicts).to_dict()}


def _eval_report(s: _Session) -> Dict[str, Any]:
    a = s.args
    responses, golds = _eval_inputs(s)
    verdicts = ev.judge_responses(s.backend, s.templates, responses, a.concurrency) if a.judge else None
    ratings = None
    if a.ratings is not None:
        ratings = ev.attach_grounded(ev.load_ratings(s.input(a.ratings)), responses)
    report = ev.build_report(responses, golds, verdicts, ratings, backend=s.audit_backend(), seed=a.seed)
    exporter.write_report(report, s.output(None, "report.json"))
    return report


def _eval_sample(s: _Session) -> Dict[str, Any]:
    a = s.args
    dataset = dg.load_dataset(s.input(a.dataset))
    sample = ev.sample_eval_set(dataset, a.n, seed=a.seed)
    path = exporter.write_dataset(sample, s.output(a.out, "eval_sample.jsonl"))
    return {"n": len(sample), "sample": str(path)}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(quiet=args.quiet, json_logs=args.json_logs)
    session = _Session(args)
    try:
        result = args.handler(session)
        exporter.emit_manifest(session.config, session.outputs)
    except UsageError as exc:
        logger.error("%s", exc)
        return 1
    except BackendError as exc:
        logger.error("Backend failure: %s", exc)
        return 3
    except KnowledgeTuningError as exc:
        logger.error("%s", exc)
        return 2
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return 2

    print(json.dumps(result, ensure_ascii=False, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
