from __future__ import annotations

import json
from pathlib import Path
from types import SimpleNamespace
from typing import Any, List

import httpx
import openai
import pytest

import knowledge_tuning.gateway as gw
from knowledge_tuning.errors import BackendError, CacheMissError, DataError, ScriptMissError

from conftest import write_jsonl


def _request(prompt: str = "P", tag: str = "entity", **kwargs: Any) -> gw.GenerationRequest:
    return gw.GenerationRequest(prompt=prompt, tag=tag, **kwargs)


class _FakeCompletions:
    def __init__(self, outcomes: List[Any]) -> None:
        self.outcomes = outcomes
        self.calls: List[dict] = []

    def create(self, **kwargs: Any) -> Any:
        self.calls.append(kwargs)
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        message = SimpleNamespace(content=outcome)
        return SimpleNamespace(choices=[SimpleNamespace(message=message)])


def _fake_client(outcomes: List[Any]) -> Any:
    completions = _FakeCompletions(outcomes)
    return SimpleNamespace(chat=SimpleNamespace(completions=completions))


def _connection_error() -> openai.APIConnectionError:
    return openai.APIConnectionError(request=httpx.Request("POST", "http://localhost/v1/chat/completions"))


def test_request_validation() -> None:
    with pytest.raises(DataError):
        _request(tag="summary")
    with pytest.raises(DataError):
        _request(temperature=-0.1)
    with pytest.raises(DataError):
        _request(max_tokens=0)


def test_cache_key_covers_decoding_parameters() -> None:
    base = _request()
    assert base.cache_key() == _request().cache_key()
    assert base.cache_key() != _request(temperature=0.7).cache_key()
    assert base.cache_key() != _request(max_tokens=64).cache_key()
    assert base.cache_key() != _request(tag="attribute").cache_key()


def test_scripted_backend_returns_table_entry_and_tags_misses() -> None:
    backend = gw.ScriptedBackend({"P": "gastric cancer", ("attribute", "P"): "symptom"})
    assert gw.generate(backend, _request()) == "gastric cancer"
    assert gw.generate(backend, _request(tag="attribute")) == "symptom"

    with pytest.raises(ScriptMissError) as info:
        gw.generate(backend, _request("unknown", tag="response_k"))
    assert info.value.stage == "response_k"
    assert str(info.value).startswith("[response_k]")


def test_scripted_backend_from_jsonl(tmp_path: Path) -> None:
    path = write_jsonl(
        tmp_path / "script.jsonl",
        [{"prompt": "P", "response": "a"}, {"tag": "attribute", "prompt": "P", "response": "b"}],
    )
    backend = gw.ScriptedBackend.from_jsonl(path)
    assert backend.generate(_request()) == "a"
    assert backend.generate(_request(tag="attribute")) == "b"

    bad = write_jsonl(tmp_path / "bad.jsonl", [{"prompt": "P"}])
    with pytest.raises(DataError, match="line 1"):
        gw.ScriptedBackend.from_jsonl(bad)


def test_unexpected_exception_becomes_stage_tagged_backend_error() -> None:
    def boom(request: gw.GenerationRequest) -> str:
        raise KeyError("socket closed")

    with pytest.raises(BackendError) as info:
        gw.generate(gw.CallableBackend(boom), _request(tag="judge"))
    assert info.value.stage == "judge"


def test_record_then_strict_replay(tmp_path: Path) -> None:
    cache = tmp_path / "cache.jsonl"
    inner = gw.ScriptedBackend({"P": "gastric cancer"})
    recorder = gw.ReplayBackend(cache, inner=inner)
    assert recorder.generate(_request()) == "gastric cancer"
    assert recorder.generate(_request()) == "gastric cancer"

    lines = cache.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["key"] == _request().cache_key()

    replay = gw.ReplayBackend(cache)
    assert len(replay) == 1
    assert replay.generate(_request()) == "gastric cancer"
    with pytest.raises(CacheMissError):
        replay.generate(_request("never recorded"))
    assert replay.describe()["mode"] == "replay"
    assert recorder.describe()["record_from"]["kind"] == "scripted"


def test_strict_replay_needs_existing_cache(tmp_path: Path) -> None:
    with pytest.raises(DataError):
        gw.ReplayBackend(tmp_path / "missing.jsonl")


def test_replay_cache_line_without_key_names_the_line(tmp_path: Path) -> None:
    cache = write_jsonl(tmp_path / "cache.jsonl", [{"key": "k", "response": "r"}, {"response": "orphan"}])
    with pytest.raises(DataError, match="cache.jsonl: line 2 needs 'key' and 'response'"):
        gw.ReplayBackend(cache)


def test_http_backend_sends_single_user_message() -> None:
    client = _fake_client(["gastric cancer"])
    descriptor = gw.BackendDescriptor(kind="http", endpoint="http://localhost/v1", model="m")
    backend = gw.HttpBackend(descriptor, client=client)

    assert backend.generate(_request("P", max_tokens=64)) == "gastric cancer"
    call = client.chat.completions.calls[0]
    assert call["messages"] == [{"role": "user", "content": "P"}]
    assert call["model"] == "m"
    assert call["max_tokens"] == 64
    assert call["temperature"] == 0.0


def test_http_backend_retries_transient_errors() -> None:
    descriptor = gw.BackendDescriptor(kind="http", model="m", max_retries=2, backoff_base=0.0)
    client = _fake_client([_connection_error(), _connection_error(), "ok"])
    assert gw.HttpBackend(descriptor, client=client).generate(_request()) == "ok"
    assert len(client.chat.completions.calls) == 3

    failing = _fake_client([_connection_error()] * 3)
    with pytest.raises(BackendError, match="3 attempts"):
        gw.HttpBackend(descriptor, client=failing).generate(_request())


def test_http_backend_requires_model_and_credentials(monkeypatch: pytest.MonkeyPatch) -> None:
    with pytest.raises(BackendError):
        gw.HttpBackend(gw.BackendDescriptor(kind="http"))

    monkeypatch.delenv("KT_TEST_KEY", raising=False)
    backend = gw.HttpBackend(gw.BackendDescriptor(kind="http", model="m", credential_env="KT_TEST_KEY"))
    with pytest.raises(BackendError, match="KT_TEST_KEY"):
        gw.generate(backend, _request())


def test_descriptor_describe_holds_no_secret(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("KT_TEST_KEY", "sk-secret")
    descriptor = gw.BackendDescriptor(kind="http", endpoint="http://x", model="m", credential_env="KT_TEST_KEY")
    info = descriptor.describe()
    assert info == {"kind": "http", "endpoint": "http://x", "model": "m", "credential_env": "KT_TEST_KEY"}
    assert "sk-secret" not in json.dumps(info)


def test_build_backend_checks_required_files(tmp_path: Path) -> None:
    with pytest.raises(DataError):
        gw.build_backend(gw.BackendDescriptor(kind="scripted"))
    with pytest.raises(DataError):
        gw.build_backend(gw.BackendDescriptor(kind="replay"))
    with pytest.raises(DataError):
        gw.BackendDescriptor(kind="grpc")

    script = write_jsonl(tmp_path / "s.jsonl", [{"prompt": "P", "response": "a"}])
    scripted = gw.BackendDescriptor(kind="scripted", script_path=script)
    recorder = gw.build_backend(gw.BackendDescriptor(kind="replay", cache_path=tmp_path / "c.jsonl", record_from=scripted))
    assert isinstance(recorder, gw.ReplayBackend)
    assert recorder.generate(_request()) == "a"


def test_http_embedder_normalizes_vectors() -> None:
    data = [SimpleNamespace(embedding=[3.0, 4.0])]
    client = SimpleNamespace(embeddings=SimpleNamespace(create=lambda **kwargs: SimpleNamespace(data=data)))
    embedder = gw.HttpEmbedder(gw.BackendDescriptor(kind="http", model="emb"), client=client)
    emb = embedder("gastric cancer", 2)
    assert emb.vector.tolist() == pytest.approx([0.6, 0.8])
    assert embedder.tag == "http:emb"
