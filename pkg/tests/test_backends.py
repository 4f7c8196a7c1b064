import json
import logging
import threading

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.cache import ResponseCache
from src.errors import (
    AuthError,
    BackendError,
    ConfigError,
    ProtocolError,
    RateLimited,
    UnknownReference,
    UnparsableVerdict,
    UnrecognizedPrompt,
)
from src.graph import SemanticGraph, Triple, parse_graph
from src.llm import ChatCompletionsClient, SimulatedLLM, SimulatedLLMConfig, simulated_generate
from src.prompt import PromptSpec, build_base_prompt, build_correction_prompt
from src.verifier import (
    HttpVerifier,
    OracleVerifier,
    VerdictKind,
    VerifierVerdict,
    format_verdict,
    oracle_verify,
    parse_verdict,
)
from tests.conftest import graph_of, small_graphs

API_KEY = "sk-test-do-not-log"


def _chat_body(content: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


class ScriptedServer:
    """MockTransport handler answering with a fixed sequence of (status, body)."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.requests: list[httpx.Request] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(request)
        status, body = self.responses[min(len(self.requests), len(self.responses)) - 1]
        return httpx.Response(status, json=body)


def _client(server, monkeypatch, cache=None, **kwargs) -> ChatCompletionsClient:
    monkeypatch.setenv("VERIGRAPH_TEST_KEY", API_KEY)
    return ChatCompletionsClient(
        "https://llm.example/v1",
        "gpt-test",
        api_key_env="VERIGRAPH_TEST_KEY",
        cache=cache,
        backoff=0,
        transport=httpx.MockTransport(server),
        **kwargs,
    )


# verdicts


def test_parse_verdict_correct():
    for raw in ("Correct", "  correct\n", "CORRECT"):
        verdict = parse_verdict(raw)
        assert verdict.kind is VerdictKind.CORRECT
        assert verdict.raw == raw


def test_parse_verdict_missing():
    verdict = parse_verdict("[Francisco Uranga, occupation, swimmer]")
    assert verdict.kind is VerdictKind.MISSING
    assert verdict.missing == (Triple("Francisco Uranga", "occupation", "swimmer"),)


def test_parse_verdict_multiple_triples():
    assert len(parse_verdict("[a, r, b], [c, s, d]").missing) == 2


def test_parse_verdict_unparsable():
    with pytest.raises(UnparsableVerdict):
        parse_verdict("no idea")


@settings(max_examples=100, deadline=None)
@given(small_graphs(max_triples=3, min_triples=1))
def test_verdict_format_parse_round_trip(g):
    verdict = VerifierVerdict.missing_triples(g.triples)
    assert parse_verdict(format_verdict(verdict)) == verdict
    assert parse_verdict(format_verdict(VerifierVerdict.correct())) == VerifierVerdict.correct()


def test_verdict_invariants():
    with pytest.raises(Exception):
        VerifierVerdict(VerdictKind.MISSING, ())
    with pytest.raises(Exception):
        VerifierVerdict(VerdictKind.CORRECT, (Triple("a", "r", "b"),))


def test_oracle_modes():
    reference = graph_of(("a", "r", "b"), ("c", "s", "d"), ("e", "t", "f"))
    pred = graph_of(("a", "r", "b"))
    assert oracle_verify("t", reference, reference).is_correct
    one = oracle_verify("t", pred, reference, "one_at_a_time")
    assert one.missing == (Triple("c", "s", "d"),)
    everything = oracle_verify("t", pred, reference, "all")
    assert everything.missing == (Triple("c", "s", "d"), Triple("e", "t", "f"))


@settings(max_examples=100, deadline=None)
@given(small_graphs(max_triples=3), small_graphs(max_triples=3, min_triples=1))
def test_oracle_correct_iff_full_recall(pred, reference):
    verdict = oracle_verify("t", pred, reference)
    assert verdict.is_correct == reference.keys() <= pred.keys()


def test_oracle_verifier_counts_calls():
    verifier = OracleVerifier({"some  text": graph_of(("a", "r", "b"))})
    assert verifier.verify("some text", graph_of(("a", "r", "b"))).is_correct
    assert verifier.call_count == 1


def test_oracle_verifier_unknown_text_is_a_backend_error():
    verifier = OracleVerifier({"known text": graph_of(("a", "r", "b"))})
    with pytest.raises(UnknownReference) as excinfo:
        verifier.verify("never seen", graph_of(("a", "r", "b")))
    assert isinstance(excinfo.value, BackendError)
    assert verifier.call_count == 1


# simulated LLM


REFERENCE = graph_of(
    ("Alan Bean", "occupation", "astronaut"),
    ("Alan Bean", "birth place", "Wheeler"),
    ("Alan Bean", "mission", "Apollo 12"),
    ("Apollo 12", "operator", "NASA"),
)
TEXT = "Alan Bean, born in Wheeler, was an astronaut on Apollo 12, operated by NASA."


def test_simulated_identity_configuration():
    prompt = build_base_prompt(PromptSpec(), TEXT)
    assert parse_graph(simulated_generate(prompt, REFERENCE, SimulatedLLMConfig())) == REFERENCE


def test_simulated_drops_are_stable():
    cfg = SimulatedLLMConfig(drop_count=2, rng_seed=4)
    prompt = build_base_prompt(PromptSpec(), TEXT)
    first = simulated_generate(prompt, REFERENCE, cfg)
    assert len(parse_graph(first)) == len(REFERENCE) - 2
    assert simulated_generate(prompt, REFERENCE, cfg) == first


def test_simulated_correction_with_full_compliance_restores_reference():
    cfg = SimulatedLLMConfig(drop_count=2, rng_seed=4)
    base = parse_graph(simulated_generate(build_base_prompt(PromptSpec(), TEXT), REFERENCE, cfg))
    dropped = tuple(t for t in REFERENCE if not base.contains(t))
    correction = build_correction_prompt(PromptSpec(correction=True, accumulated_missing=dropped), TEXT)
    assert parse_graph(simulated_generate(correction, REFERENCE, cfg)).keys() == REFERENCE.keys()


def test_simulated_corruption_marks_relations():
    cfg = SimulatedLLMConfig(corrupt_rate=1.0)
    output = parse_graph(simulated_generate(build_base_prompt(PromptSpec(), TEXT), REFERENCE, cfg))
    assert all(t.predicate.endswith(" (alt)") for t in output)


def test_simulated_preamble_still_parses():
    cfg = SimulatedLLMConfig(preamble="Here is the semantic graph: ")
    output = simulated_generate(build_base_prompt(PromptSpec(), TEXT), REFERENCE, cfg)
    assert output.startswith("Here is")
    assert parse_graph(output) == REFERENCE


def test_simulated_rejects_foreign_prompt():
    with pytest.raises(UnrecognizedPrompt):
        simulated_generate("Write a haiku", REFERENCE, SimulatedLLMConfig())
    llm = SimulatedLLM({TEXT: REFERENCE})
    with pytest.raises(UnrecognizedPrompt):
        llm.generate(build_base_prompt(PromptSpec(), "unknown text"))


def test_simulated_config_validation():
    with pytest.raises(ConfigError):
        SimulatedLLMConfig(compliance=1.5)
    with pytest.raises(ConfigError):
        SimulatedLLMConfig(drop_count=-1)


# HTTP clients


def test_chat_client_retries_after_rate_limit(monkeypatch):
    server = ScriptedServer((429, {"error": "slow down"}), (200, _chat_body("[[a, r, b]]")))
    client = _client(server, monkeypatch)
    assert client.generate("prompt") == "[[a, r, b]]"
    assert len(server.requests) == 2

    payload = json.loads(server.requests[-1].content)
    assert payload["model"] == "gpt-test"
    assert payload["temperature"] == 0.0
    assert [m["role"] for m in payload["messages"]] == ["system", "user"]
    assert payload["messages"][1]["content"] == "prompt"
    assert server.requests[-1].url.path == "/v1/chat/completions"


def test_chat_client_gives_up_on_rate_limit(monkeypatch):
    server = ScriptedServer((429, {}))
    client = _client(server, monkeypatch, max_attempts=3)
    with pytest.raises(RateLimited):
        client.generate("prompt")
    assert len(server.requests) == 3


def test_chat_client_missing_credential(monkeypatch):
    monkeypatch.delenv("VERIGRAPH_MISSING_KEY", raising=False)
    server = ScriptedServer((200, _chat_body("[]")))
    with pytest.raises(AuthError):
        ChatCompletionsClient(
            "https://llm.example/v1", "gpt-test", api_key_env="VERIGRAPH_MISSING_KEY", transport=httpx.MockTransport(server)
        )
    assert server.requests == []


def test_chat_client_rejected_credential(monkeypatch):
    client = _client(ScriptedServer((401, {"error": "bad key"})), monkeypatch)
    with pytest.raises(AuthError):
        client.generate("prompt")


def test_chat_client_bad_body(monkeypatch):
    client = _client(ScriptedServer((200, {"unexpected": True})), monkeypatch)
    with pytest.raises(ProtocolError):
        client.generate("prompt")


def test_chat_client_uses_cache(monkeypatch, tmp_path):
    server = ScriptedServer((200, _chat_body("[[a, r, b]]")))
    cache = ResponseCache(tmp_path / "cache")
    client = _client(server, monkeypatch, cache=cache)
    assert client.generate("prompt") == client.generate("prompt")
    assert len(server.requests) == 1
    assert client.call_count == 1

    # a fresh client with the same identity reads the stored response
    other = _client(ScriptedServer((500, {})), monkeypatch, cache=ResponseCache(tmp_path / "cache"))
    assert other.generate("prompt") == "[[a, r, b]]"
    assert other.call_count == 0


def test_credential_never_logged(monkeypatch, caplog):
    caplog.set_level(logging.DEBUG)
    server = ScriptedServer((503, {}), (200, _chat_body("[]")))
    client = _client(server, monkeypatch)
    client.generate("prompt")
    assert server.requests[0].headers["Authorization"] == f"Bearer {API_KEY}"
    assert API_KEY not in caplog.text


def test_http_verifier_correct_and_missing():
    server = ScriptedServer((200, {"output": "Correct"}), (200, {"output": "[Francisco Uranga, occupation, swimmer]"}))
    verifier = HttpVerifier("https://verifier.example", instruction_prefix="Dataset: kelm. ", transport=httpx.MockTransport(server), backoff=0)
    g = graph_of(("Francisco Uranga", "country", "Argentina"))
    assert verifier.verify("Francisco Uranga is a swimmer.", g).is_correct

    verdict = verifier.verify("Francisco Uranga is a swimmer.", g)
    assert verdict.missing == (Triple("Francisco Uranga", "occupation", "swimmer"),)
    sent = json.loads(server.requests[0].content)["input"]
    assert sent == "Dataset: kelm. Francisco Uranga is a swimmer. <S> [[Francisco Uranga, country, Argentina]]"


def test_http_verifier_server_error_after_retries():
    server = ScriptedServer((500, {}))
    verifier = HttpVerifier("https://verifier.example", transport=httpx.MockTransport(server), backoff=0, max_attempts=2)
    with pytest.raises(ProtocolError):
        verifier.verify("t", graph_of(("a", "r", "b")))
    assert len(server.requests) == 2


def test_http_verifier_unparsable_output():
    server = ScriptedServer((200, {"output": "maybe?"}))
    verifier = HttpVerifier("https://verifier.example", transport=httpx.MockTransport(server), backoff=0)
    with pytest.raises(UnparsableVerdict):
        verifier.verify("t", graph_of(("a", "r", "b")))


# cache


def test_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path)
    assert cache.get("model", "prompt") is None
    cache.put("model", "prompt", "[[a, r, b]]")
    assert cache.get("model", "prompt") == "[[a, r, b]]"
    assert cache.get("other-model", "prompt") is None
    entry = json.loads((tmp_path / f"{ResponseCache.key('model', 'prompt')}.json").read_text(encoding="utf-8"))
    assert set(entry) == {"prompt_hash", "identity", "response", "timestamp"}
    assert len(cache) == 1


def test_cache_computes_once_under_concurrency(tmp_path):
    cache = ResponseCache(tmp_path)
    calls = []
    barrier = threading.Barrier(8)

    def compute():
        calls.append(1)
        return "response"

    def worker():
        barrier.wait()
        assert cache.get_or_compute("model", "prompt", compute) == "response"

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert len(calls) == 1
    assert (cache.misses, cache.hits) == (1, 7)
    assert cache.pending_keys == 0


def test_simulated_llm_counts_calls():
    llm = SimulatedLLM({TEXT: REFERENCE})
    llm.generate(build_base_prompt(PromptSpec(), TEXT))
    assert llm.call_count == 1
    assert isinstance(parse_graph(llm.generate(build_base_prompt(PromptSpec(), TEXT))), SemanticGraph)
