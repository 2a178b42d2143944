"""Generation backends: live OpenAI-compatible endpoint, scripted table, record/replay cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .data_quality import iter_jsonl
from .errors import BackendError, CacheMissError, DataError, ScriptMissError
from .retrieval import Embedding
from .utils import prepare_output

logger = logging.getLogger(__name__)

STAGES = ("entity", "attribute", "response_k", "response_plain", "datagen", "self_assess", "judge")
BACKEND_KINDS = ("http", "scripted", "replay")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    tag: str
    max_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.tag not in STAGES:
            raise DataError(f"Unknown generation stage '{self.tag}'")
        if self.temperature < 0:
            raise DataError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise DataError(f"max_tokens must be >= 1, got {self.max_tokens}")

    def cache_key(self) -> str:
        payload = json.dumps([self.tag, self.prompt, self.temperature, self.max_tokens], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    endpoint: Optional[str] = None
    model: Optional[str] = None
    credential_env: str = "OPENAI_API_KEY"
    script_path: Optional[Path] = None
    cache_path: Optional[Path] = None
    record_from: Optional["BackendDescriptor"] = None
    max_concurrency: int = 4
    requests_per_minute: int = 0
    max_retries: int = 4
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise DataError(f"Unknown backend kind '{self.kind}'. Expected one of {list(BACKEND_KINDS)}.")

    def describe(self) -> Dict[str, Any]:
        """Secret-free summary for manifests and reports."""
        info: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "http":
            info.update(endpoint=self.endpoint, model=self.model, credential_env=self.credential_env)
        elif self.kind == "scripted":
            info["script"] = str(self.script_path) if self.script_path else None
        else:
            info["cache"] = str(self.cache_path) if self.cache_path else None
            info["mode"] = "record" if self.record_from else "replay"
            if self.record_from:
                info["record_from"] = self.record_from.describe()
        return info


class Backend(ABC):
    kind = "abstract"

    @abstractmethod
    def generate(self, request: GenerationRequest) -> str:
        """Return the model text for ``request``."""

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class ScriptedBackend(Backend):
    """Deterministic lookup table keyed by prompt, or by (tag, prompt) when a tag is scripted."""

    kind = "scripted"

    def __init__(self, table: Mapping[Any, str], source: Optional[str] = None) -> None:
        self._by_prompt: Dict[str, str] = {}
        self._by_tag: Dict[Tuple[str, str], str] = {}
        for key, response in table.items():
            if isinstance(key, tuple):
                self._by_tag[key] = response
            else:
                self._by_prompt[key] = response
        self.source = source

    @classmethod
    def from_jsonl(cls, path: Path) -> "ScriptedBackend":
        table: Dict[Any, str] = {}
        for line_number, record in iter_jsonl(Path(path)):
            if "prompt" not in record or "response" not in record:
                raise DataError(f"{Path(path).name}: line {line_number} needs 'prompt' and 'response'")
            key = (record["tag"], record["prompt"]) if record.get("tag") else record["prompt"]
            table[key] = str(record["response"])
        return cls(table, source=str(path))

    def generate(self, request: GenerationRequest) -> str:
        response = self._by_tag.get((request.tag, request.prompt))
        if response is None:
            response = self._by_prompt.get(request.prompt)
        if response is None:
            raise ScriptMissError(f"No scripted response for prompt {request.prompt[:80]!r}", stage=request.tag)
        return response

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "script": self.source}


class CallableBackend(Backend):
    """Wraps a plain function; used for oracle and noise scenarios."""

    kind = "scripted"

    def __init__(self, fn: Callable[[GenerationRequest], str], name: str = "callable") -> None:
        self._fn = fn
        self.name = name

    def generate(self, request: GenerationRequest) -> str:
        return self._fn(request)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "script": self.name}


class _RateLimiter:
    def __init__(self, requests_per_minute: int) -> None:
        self._interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self._interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self._interval
        if delay > 0:
            time.sleep(delay)


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client with bounded concurrency, pacing and retries."""

    kind = "http"

    def __init__(self, descriptor: BackendDescriptor, client: Any = None) -> None:
        if not descriptor.model:
            raise BackendError("HTTP backend requires a model name")
        self.descriptor = descriptor
        self._client = client
        self._slots = threading.BoundedSemaphore(max(1, descriptor.max_concurrency))
        self._limiter = _RateLimiter(descriptor.requests_per_minute)

    @property
    def client(self) -> Any:
        if self._client is None:
            api_key = os.environ.get(self.descriptor.credential_env)
            if not api_key:
                raise BackendError(f"Credential environment variable {self.descriptor.credential_env} is not set")
            from openai import OpenAI

            self._client = OpenAI(
                api_key=api_key,
                base_url=self.descriptor.endpoint,
                timeout=self.descriptor.timeout,
                max_retries=0,
            )
        return self._client

    def _call(self, request: GenerationRequest) -> str:
        resp = self.client.chat.completions.create(
            model=self.descriptor.model,
            messages=[{"role": "user", "content": request.prompt}],
            temperature=request.temperature,
            max_tokens=request.max_tokens,
        )
        if not resp.choices or resp.choices[0].message is None:
            raise BackendError("Endpoint returned no choices", stage=request.tag)
        return resp.choices[0].message.content or ""

    def generate(self, request: GenerationRequest) -> str:
        import openai

        transient = (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError)
        attempts = self.descriptor.max_retries + 1
        for attempt in range(attempts):
            self._limiter.wait()
            try:
                with self._slots:
                    return self._call(request)
            except transient as exc:
                if attempt == attempts - 1:
                    raise BackendError(f"Transport failed after {attempts} attempts: {exc}", stage=request.tag) from exc
                delay = min(self.descriptor.backoff_cap, self.descriptor.backoff_base * (2 ** attempt))
                logger.warning("Transient backend error (%s); retrying in %.1fs", exc.__class__.__name__, delay)
                time.sleep(delay)
            except openai.OpenAIError as exc:
                raise BackendError(f"Endpoint error: {exc}", stage=request.tag) from exc
        raise BackendError("unreachable", stage=request.tag)

    def describe(self) -> Dict[str, Any]:
        return self.descriptor.describe()


class ReplayBackend(Backend):
    """Replays cached responses; with ``inner`` set, records misses from it."""

    kind = "replay"

    def __init__(self, cache_path: Path, inner: Optional[Backend] = None) -> None:
        self.cache_path = Path(cache_path)
        self.inner = inner
        self._lock = threading.Lock()
        self._cache: Dict[str, str] = {}
        if self.cache_path.exists():
            for line_number, record in iter_jsonl(self.cache_path):
                if "key" not in record or "response" not in record:
                    raise DataError(f"{self.cache_path.name}: line {line_number} needs 'key' and 'response'")
                self._cache[record["key"]] = str(record["response"])
        elif inner is None:
            raise DataError(f"Replay cache '{self.cache_path}' does not exist")
        logger.info("Replay cache %s holds %d entries", self.cache_path, len(self._cache))

    def __len__(self) -> int:
        return len(self._cache)

    def generate(self, request: GenerationRequest) -> str:
        key = request.cache_key()
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        if self.inner is None:
            raise CacheMissError(f"Replay cache miss for prompt {request.prompt[:80]!r}", stage=request.tag)

        response = self.inner.generate(request)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = response
                record = {"key": key, "prompt": request.prompt, "response": response, "tag": request.tag}
                try:
                    with open(prepare_output(self.cache_path), "a", encoding="utf-8") as handle:
                        handle.write(json.dumps(record, ensure_ascii=False) + "\n")
                except OSError as exc:
                    raise DataError(f"Cannot append to replay cache '{self.cache_path}': {exc}") from exc
            return self._cache[key]

    def describe(self) -> Dict[str, Any]:
        info: Dict[str, Any] = {"kind": self.kind, "cache": str(self.cache_path)}
        info["mode"] = "record" if self.inner else "replay"
        if self.inner:
            info["record_from"] = self.inner.describe()
        return info


def build_backend(descriptor: BackendDescriptor) -> Backend:
    if descriptor.kind == "http":
        return HttpBackend(descriptor)
    if descriptor.kind == "scripted":
        if descriptor.script_path is None:
            raise DataError("Scripted backend requires a script file")
        return ScriptedBackend.from_jsonl(descriptor.script_path)
    if descriptor.cache_path is None:
        raise DataError("Replay backend requires a cache file")
    inner = build_backend(descriptor.record_from) if descriptor.record_from else None
    return ReplayBackend(descriptor.cache_path, inner=inner)


def generate(backend: Backend, request: GenerationRequest) -> str:
    """Run ``request`` on ``backend``, tagging any failure with the request stage."""
    try:
        return backend.generate(request)
    except BackendError as exc:
        if exc.stage is None:
            exc.stage = request.tag
        raise
    except DataError:
        raise
    except Exception as exc:
        raise BackendError(f"{exc.__class__.__name__}: {exc}", stage=request.tag) from exc


@dataclass
class HttpEmbedder:
    """OpenAI-compatible embeddings endpoint usable wherever retrieval expects an embedder."""

    descriptor: BackendDescriptor
    client: Any = None
    _backend: Optional[HttpBackend] = field(default=None, init=False, repr=False)

    @property
    def tag(self) -> str:
        return f"http:{self.descriptor.model}"

    def __call__(self, text: str, dim: int) -> Embedding:
        if self._backend is None:
            self._backend = HttpBackend(self.descriptor, client=self.client)
        try:
            resp = self._backend.client.embeddings.create(model=self.descriptor.model, input=text)
        except Exception as exc:
            raise BackendError(f"Embedding request failed: {exc}", stage="embedding") from exc
        vector = np.asarray(resp.data[0].embedding, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            return Embedding(vector=vector, degenerate=True)
        return Embedding(vector=vector / norm)
