from __future__ import annotations

import json
import random
import threading
from dataclasses import asdict, dataclass
from typing import Mapping, Protocol

import httpx

from src.cache import ResponseCache
from src.errors import ConfigError, ProtocolError, UnrecognizedPrompt
from src.graph import DEFAULT_POLICY, NormalizationPolicy, SemanticGraph, Triple, serialize_graph
from src.http_client import HttpService
from src.logger import get_logger
from src.prompt import parse_query

logger = get_logger(__name__)

SYSTEM_MESSAGE = "You are a helpful assistant that converts text into semantic graphs."
CORRUPTION_MARKER = " (alt)"


class LLMBackend(Protocol):
    identity: str
    call_count: int

    def generate(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 512
    top_p: float = 1.0
    n: int = 1


class ChatCompletionsClient:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        decoding: DecodingParams | None = None,
        cache: ResponseCache | None = None,
        system_message: str = SYSTEM_MESSAGE,
        timeout: float = 60,
        max_attempts: int = 5,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        min_interval: float = 0.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        self.decoding = decoding or DecodingParams()
        self.cache = cache
        self.system_message = system_message
        self.service = HttpService(
            base_url,
            api_key_env=api_key_env,
            require_key=True,
            timeout=timeout,
            max_attempts=max_attempts,
            backoff=backoff,
            max_in_flight=max_in_flight,
            min_interval=min_interval,
            transport=transport,
        )
        self.identity = json.dumps(
            {"model": model, "base_url": base_url, "system": system_message, **asdict(self.decoding)},
            sort_keys=True,
        )
        self._count_lock = threading.Lock()
        self.call_count = 0  # generate() calls that reached the network

    def _request(self, prompt: str) -> str:
        with self._count_lock:
            self.call_count += 1
        body = self.service.post(
            "/chat/completions",
            {
                "model": self.model,
                "messages": [
                    {"role": "system", "content": self.system_message},
                    {"role": "user", "content": prompt},
                ],
                **asdict(self.decoding),
            },
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError("chat completion response has no choices[0].message.content") from e
        if not isinstance(content, str):
            raise ProtocolError("chat completion content is not a string")
        return content

    def generate(self, prompt: str) -> str:
        if self.cache is None:
            return self._request(prompt)
        return self.cache.get_or_compute(self.identity, prompt, lambda: self._request(prompt))

    def close(self) -> None:
        self.service.close()


# Simulated backend


@dataclass(frozen=True)
class SimulatedLLMConfig:
    drop_count: int = 0
    corrupt_rate: float = 0.0
    compliance: float = 1.0
    rng_seed: int = 0
    preamble: str = ""  # chatter before the graph, exercises the tolerant parser

    def __post_init__(self):
        if self.drop_count < 0:
            raise ConfigError(f"drop_count must be >= 0, got {self.drop_count}")
        for name in ("corrupt_rate", "compliance"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")


def _corrupt(t: Triple) -> Triple:
    return Triple(t.subject, t.predicate + CORRUPTION_MARKER, t.object)


def simulated_generate(
    prompt: str,
    reference: SemanticGraph,
    cfg: SimulatedLLMConfig,
    policy: NormalizationPolicy = DEFAULT_POLICY,
) -> str:
    """
    Answer like an LLM that forgets ``drop_count`` reference triples and garbles
    some relations. Which triples are forgotten or garbled depends only on the
    seed and the query text, so the mistakes repeat on every call. A correction
    prompt brings back each given triple with probability ``compliance``.
    """
    parsed = parse_query(prompt, policy)
    if parsed is None:
        raise UnrecognizedPrompt("prompt does not end with a Text/Semantic graph query block")
    text, given = parsed

    rng = random.Random(f"{cfg.rng_seed}:{text}")
    triples = list(reference.triples)
    dropped = set(rng.sample(range(len(triples)), min(cfg.drop_count, len(triples))))
    output = [
        _corrupt(t) if rng.random() < cfg.corrupt_rate else t
        for i, t in enumerate(triples)
        if i not in dropped
    ]

    if given is not None:
        # separate stream so compliance does not shift the base mistakes
        compliance_rng = random.Random(f"{cfg.rng_seed}:{text}:{len(given)}")
        output.extend(t for t in given if compliance_rng.random() < cfg.compliance)

    graph = SemanticGraph(tuple(output), policy)
    return f"{cfg.preamble}{serialize_graph(graph)}"


def _query_key(text: str) -> str:
    return " ".join(text.split())


class SimulatedLLM:
    """Deterministic stand-in LLM that knows the reference graph of every query text."""

    def __init__(
        self,
        references: Mapping[str, SemanticGraph],
        cfg: SimulatedLLMConfig | None = None,
        policy: NormalizationPolicy = DEFAULT_POLICY,
    ):
        self.cfg = cfg or SimulatedLLMConfig()
        self.policy = policy
        self.references = {_query_key(text): graph for text, graph in references.items()}
        self.identity = json.dumps({"model": "simulated", **asdict(self.cfg)}, sort_keys=True)
        self._count_lock = threading.Lock()
        self.call_count = 0

    def generate(self, prompt: str) -> str:
        with self._count_lock:
            self.call_count += 1
        parsed = parse_query(prompt, self.policy)
        if parsed is None:
            raise UnrecognizedPrompt("prompt does not end with a Text/Semantic graph query block")
        reference = self.references.get(_query_key(parsed[0]))
        if reference is None:
            raise UnrecognizedPrompt(f"no reference graph for query text {parsed[0][:60]!r}")
        return simulated_generate(prompt, reference, self.cfg, self.policy)
