"""
Correction loops around an LLM and a verifier.

- Iterative prompting: every round re-queries the LLM with the union of all
  missing triples the verifier reported so far.
- Offline correction: one LLM call, then the reported triples are appended to
  the graph locally until the verifier is satisfied.
- Augmentation: offline correction over an existing parallel corpus, no LLM.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Mapping, Sequence

from src.errors import ConfigError, EmptyDataset, UnparsableVerdict, VerigraphError
from src.graph import (
    DEFAULT_POLICY,
    NormalizationPolicy,
    ParallelRecord,
    SemanticGraph,
    Triple,
    graph_from_value,
    merge_missing,
    parse_graph,
    surface_overlap,
    write_jsonl,
)
from src.llm import LLMBackend
from src.logger import get_logger
from src.metrics import DEFAULT_GED_BUDGET, InstanceScores, MetricReport, format_report_table, score_pair
from src.prompt import Demonstration, PromptSpec, PromptStyle, accumulate, build_base_prompt, build_correction_prompt, select_shots
from src.similarity import EdgeSimilarity
from src.verifier import VerdictKind, VerifierBackend, VerifierVerdict

logger = get_logger(__name__)

Scorer = Callable[[SemanticGraph], InstanceScores]


class PipelineMode(str, Enum):
    PROMPT = "prompt"
    OFFLINE = "offline"


class MalformedOutputHandling(str, Enum):
    EMPTY_GRAPH = "empty_graph"
    ERROR = "error"


class TraceStatus(str, Enum):
    CONVERGED_CORRECT = "converged_correct"
    MAX_ITERATIONS = "max_iterations"
    FAILED = "failed"


@dataclass(frozen=True)
class PipelineConfig:
    mode: PipelineMode = PipelineMode.PROMPT
    max_iterations: int = 3
    augment_max_iterations: int = 4
    shots: int = 0
    style: PromptStyle = PromptStyle.P1
    policy: NormalizationPolicy = DEFAULT_POLICY
    malformed_output_handling: MalformedOutputHandling = MalformedOutputHandling.EMPTY_GRAPH
    parallelism: int = 4
    fail_open: bool = True
    demonstrations: tuple[Demonstration, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mode", PipelineMode(self.mode))
        object.__setattr__(self, "style", PromptStyle(self.style))
        object.__setattr__(self, "malformed_output_handling", MalformedOutputHandling(self.malformed_output_handling))
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.augment_max_iterations < 1:
            raise ConfigError(f"augment_max_iterations must be >= 1, got {self.augment_max_iterations}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        select_shots(self.demonstrations, self.shots)

    @property
    def shot_demos(self) -> tuple[Demonstration, ...]:
        return select_shots(self.demonstrations, self.shots)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    prompt: str | None
    raw_output: str | None
    graph: SemanticGraph
    verdict: VerifierVerdict
    scores: InstanceScores | None = None
    parse_error: str | None = None
    accumulated_missing: tuple[Triple, ...] = ()

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "prompt": self.prompt,
            "raw_output": self.raw_output,
            "graph": self.graph.to_value(),
            "verdict": self.verdict.to_dict(),
            "scores": self.scores.to_dict() if self.scores else None,
            "parse_error": self.parse_error,
            "accumulated_missing": [t.as_list() for t in self.accumulated_missing],
        }

    @classmethod
    def from_dict(cls, data: dict, policy: NormalizationPolicy = DEFAULT_POLICY) -> IterationRecord:
        return cls(
            iteration=data["iteration"],
            prompt=data.get("prompt"),
            raw_output=data.get("raw_output"),
            graph=graph_from_value(data["graph"], policy),
            verdict=VerifierVerdict.from_dict(data["verdict"]),
            scores=InstanceScores(**data["scores"]) if data.get("scores") else None,
            parse_error=data.get("parse_error"),
            accumulated_missing=tuple(Triple.from_sequence(t) for t in data.get("accumulated_missing", [])),
        )


@dataclass
class IterationTrace:
    instance_id: str
    text: str
    mode: PipelineMode
    records: list[IterationRecord] = field(default_factory=list)
    status: TraceStatus = TraceStatus.MAX_ITERATIONS
    error: str | None = None
    llm_calls: int = 0
    verifier_calls: int = 0

    @property
    def final_graph(self) -> SemanticGraph:
        return self.records[-1].graph if self.records else SemanticGraph()

    def graph_at(self, iteration: int) -> SemanticGraph:
        """Graph at a stage; an instance that stopped earlier carries its last graph forward."""
        if not self.records:
            return SemanticGraph()
        return self.records[min(iteration, len(self.records) - 1)].graph

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "text": self.text,
            "mode": self.mode.value,
            "status": self.status.value,
            "error": self.error,
            "llm_calls": self.llm_calls,
            "verifier_calls": self.verifier_calls,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict, policy: NormalizationPolicy = DEFAULT_POLICY) -> IterationTrace:
        return cls(
            instance_id=data["instance_id"],
            text=data["text"],
            mode=PipelineMode(data["mode"]),
            records=[IterationRecord.from_dict(r, policy) for r in data.get("records", [])],
            status=TraceStatus(data["status"]),
            error=data.get("error"),
            llm_calls=data.get("llm_calls", 0),
            verifier_calls=data.get("verifier_calls", 0),
        )


# Single steps


def _parse_output(raw: str, cfg: PipelineConfig) -> tuple[SemanticGraph, str | None]:
    try:
        return parse_graph(raw, cfg.policy), None
    except VerigraphError as e:
        if cfg.malformed_output_handling is MalformedOutputHandling.ERROR:
            raise
        logger.warning(f"unparsable LLM output, scoring it as an empty graph: {e}")
        return SemanticGraph((), cfg.policy), str(e)


def _verify(verifier: VerifierBackend, text: str, graph: SemanticGraph, cfg: PipelineConfig) -> VerifierVerdict:
    try:
        return verifier.verify(text, graph)
    except UnparsableVerdict as e:
        if not cfg.fail_open:
            raise
        logger.warning(f"verifier output unparsable, treating it as Correct: {e.raw[:80]!r}")
        return VerifierVerdict(VerdictKind.CORRECT, (), e.raw, unparsable=True)


def _fail(trace: IterationTrace, e: Exception) -> IterationTrace:
    logger.error(f"✖ Instance {trace.instance_id} failed: {e}")
    trace.status = TraceStatus.FAILED
    trace.error = f"{type(e).__name__}: {e}"
    return trace


# Loops


def run_iterative_prompting(
    text: str,
    llm: LLMBackend,
    verifier: VerifierBackend,
    cfg: PipelineConfig,
    instance_id: str = "",
    scorer: Scorer | None = None,
) -> IterationTrace:
    """
    Base prompt, then up to ``cfg.max_iterations`` correction prompts. Each new
    LLM output replaces the previous graph.
    """
    trace = IterationTrace(instance_id, text, PipelineMode.PROMPT)
    shots = cfg.shot_demos
    accumulated: tuple[Triple, ...] = ()
    prompt = build_base_prompt(PromptSpec(cfg.style, shots), text)

    try:
        for iteration in range(cfg.max_iterations + 1):
            raw = llm.generate(prompt)
            trace.llm_calls += 1
            graph, parse_error = _parse_output(raw, cfg)
            verdict = _verify(verifier, text, graph, cfg)
            trace.verifier_calls += 1
            trace.records.append(
                IterationRecord(
                    iteration, prompt, raw, graph, verdict,
                    scorer(graph) if scorer else None, parse_error, accumulated,
                )
            )
            if verdict.is_correct:
                trace.status = TraceStatus.CONVERGED_CORRECT
                break
            if iteration == cfg.max_iterations:
                trace.status = TraceStatus.MAX_ITERATIONS
                break
            accumulated = accumulate(accumulated, verdict.missing, cfg.policy)
            prompt = build_correction_prompt(PromptSpec(cfg.style, shots, True, accumulated), text, cfg.policy)
    except VerigraphError as e:
        return _fail(trace, e)
    return trace


def _correct_offline(
    trace: IterationTrace,
    text: str,
    graph: SemanticGraph,
    verifier: VerifierBackend,
    cfg: PipelineConfig,
    max_iterations: int,
    scorer: Scorer | None,
    prompt: str | None = None,
    raw: str | None = None,
    parse_error: str | None = None,
) -> IterationTrace:
    for iteration in range(max_iterations + 1):
        verdict = _verify(verifier, text, graph, cfg)
        trace.verifier_calls += 1
        first = iteration == 0
        trace.records.append(
            IterationRecord(
                iteration,
                prompt if first else None,
                raw if first else None,
                graph,
                verdict,
                scorer(graph) if scorer else None,
                parse_error if first else None,
            )
        )
        if verdict.is_correct:
            trace.status = TraceStatus.CONVERGED_CORRECT
            break
        if iteration == max_iterations:
            trace.status = TraceStatus.MAX_ITERATIONS
            break
        graph = merge_missing(graph, verdict.missing, cfg.policy)
    return trace


def run_offline_correction(
    text: str,
    llm: LLMBackend,
    verifier: VerifierBackend,
    cfg: PipelineConfig,
    instance_id: str = "",
    scorer: Scorer | None = None,
) -> IterationTrace:
    """One LLM call, then up to ``cfg.max_iterations`` local merges of the verifier's triples."""
    trace = IterationTrace(instance_id, text, PipelineMode.OFFLINE)
    prompt = build_base_prompt(PromptSpec(cfg.style, cfg.shot_demos), text)
    try:
        raw = llm.generate(prompt)
        trace.llm_calls += 1
        graph, parse_error = _parse_output(raw, cfg)
        return _correct_offline(trace, text, graph, verifier, cfg, cfg.max_iterations, scorer, prompt, raw, parse_error)
    except VerigraphError as e:
        return _fail(trace, e)


def run_instance(
    text: str,
    llm: LLMBackend,
    verifier: VerifierBackend,
    cfg: PipelineConfig,
    instance_id: str = "",
    scorer: Scorer | None = None,
) -> IterationTrace:
    loop = run_offline_correction if cfg.mode is PipelineMode.OFFLINE else run_iterative_prompting
    return loop(text, llm, verifier, cfg, instance_id, scorer)


# Corpus runs


def stage_label(iteration: int) -> str:
    return "Base" if iteration == 0 else f"Iteration {iteration}"


@dataclass
class CorpusRun:
    traces: list[IterationTrace]
    rows: list[tuple[str, MetricReport]]
    n_failed: int = 0

    @property
    def failed_ratio(self) -> float:
        return self.n_failed / len(self.traces) if self.traces else 0.0

    def report_dict(self) -> dict:
        return {
            "rows": [{"stage": label, **report.to_dict()} for label, report in self.rows],
            "n_instances": len(self.traces),
            "n_failed": self.n_failed,
            "failed_ratio": self.failed_ratio,
            "llm_calls": sum(t.llm_calls for t in self.traces),
            "verifier_calls": sum(t.verifier_calls for t in self.traces),
        }

    def table(self) -> str:
        return format_report_table(self.rows)


def replay_report(
    traces: Sequence[IterationTrace],
    references: Mapping[str, SemanticGraph],
    max_iterations: int,
    policy: NormalizationPolicy = DEFAULT_POLICY,
    sim: EdgeSimilarity | None = None,
    budget: int = DEFAULT_GED_BUDGET,
    ged_timeout: float | None = None,
) -> list[tuple[str, MetricReport]]:
    """One MetricReport per stage, Base through ``max_iterations``, from stored traces."""
    if not traces:
        raise EmptyDataset("no traces to report on")
    rows = []
    for iteration in range(max_iterations + 1):
        scores = [
            score_pair(
                trace.graph_at(iteration), references[trace.instance_id], policy, sim, budget, trace.instance_id, ged_timeout
            )
            for trace in traces
        ]
        rows.append((stage_label(iteration), MetricReport.from_scores(scores)))
    return rows


def _trace_filename(instance_id: str) -> str:
    # the digest keeps ids that sanitize alike (doc:1, doc_1) apart
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", instance_id)[:80]
    digest = hashlib.sha256(instance_id.encode("utf-8")).hexdigest()[:10]
    return f"{safe}-{digest}.json"


def load_trace(path: Path, policy: NormalizationPolicy = DEFAULT_POLICY) -> IterationTrace:
    with open(path, "r", encoding="utf-8") as file:
        return IterationTrace.from_dict(json.load(file), policy)


def load_traces(run_dir: str | Path, policy: NormalizationPolicy = DEFAULT_POLICY) -> list[IterationTrace]:
    """Traces of a run directory, in the order ``traces.jsonl`` lists them."""
    path = Path(run_dir) / "traces.jsonl"
    traces = []
    with open(path, "r", encoding="utf-8") as file:
        for line in file:
            if line.strip():
                traces.append(IterationTrace.from_dict(json.loads(line), policy))
    return traces


def _save_trace(path: Path, trace: IterationTrace) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(".tmp")
    with open(tmp_path, "w", encoding="utf-8") as file:
        json.dump(trace.to_dict(), file, indent=2, ensure_ascii=False)
    tmp_path.replace(path)


def _resumed(path: Path, instance_id: str, cfg: PipelineConfig) -> IterationTrace | None:
    if not path.exists():
        return None
    try:
        trace = load_trace(path, cfg.policy)
    except (json.JSONDecodeError, KeyError, ValueError, VerigraphError) as e:
        logger.warning(f"ignoring unreadable trace {path.name}: {e}")
        return None
    if trace.instance_id != instance_id:
        logger.warning(f"trace {path.name} belongs to {trace.instance_id!r}, not {instance_id!r}; rerunning")
        return None
    if trace.status is TraceStatus.FAILED or trace.mode is not cfg.mode:
        return None
    return trace


def run_corpus(
    dataset: Sequence[ParallelRecord],
    llm: LLMBackend,
    verifier: VerifierBackend,
    cfg: PipelineConfig,
    sim: EdgeSimilarity | None = None,
    budget: int = DEFAULT_GED_BUDGET,
    run_dir: str | Path | None = None,
    ged_timeout: float | None = None,
) -> CorpusRun:
    """
    Run every instance with ``cfg.parallelism`` workers and report each stage.

    With ``run_dir`` every finished trace is stored under ``traces/`` and a
    rerun picks those up instead of recomputing them. Only the calling thread
    writes files.

    Args:
        dataset: Records with unique ids.
        llm: Backend answering the base and correction prompts.
        verifier: Backend judging each graph.
        cfg: Loop settings (mode, iteration cap, shots, parallelism).
        sim: Edge similarity for G-BS, token overlap when None.
        budget: Node count up to which GED is searched exactly.
        run_dir: Where traces and reports go, nothing is written when None.
        ged_timeout: Seconds allowed per exact GED search.

    Returns:
        CorpusRun: Traces in dataset order, the per-stage report rows and the
        number of failed instances.

    Raises:
        EmptyDataset: The dataset is empty or its ids repeat.
    """
    if not dataset:
        raise EmptyDataset("dataset is empty")
    references = {record.id: record.graph for record in dataset}
    if len(references) != len(dataset):
        raise EmptyDataset("dataset ids are not unique")

    trace_dir = Path(run_dir) / "traces" if run_dir is not None else None

    def _job(record: ParallelRecord) -> IterationTrace:
        scorer = partial(
            score_pair, gold=record.graph, policy=cfg.policy, sim=sim, budget=budget,
            instance_id=record.id, ged_timeout=ged_timeout,
        )
        return run_instance(record.text, llm, verifier, cfg, record.id, scorer)

    traces: list[IterationTrace] = []
    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        pending = []
        for record in dataset:
            resumed = _resumed(trace_dir / _trace_filename(record.id), record.id, cfg) if trace_dir else None
            pending.append((record, resumed, None if resumed else pool.submit(_job, record)))

        for position, (record, resumed, future) in enumerate(pending, start=1):
            trace = resumed or future.result()
            if trace_dir is not None and resumed is None:
                _save_trace(trace_dir / _trace_filename(record.id), trace)
            traces.append(trace)
            print(f"├── [{position}/{len(pending)}] {record.id}: {trace.status.value}", flush=True)

    rows = replay_report(traces, references, cfg.max_iterations, cfg.policy, sim, budget, ged_timeout)
    run = CorpusRun(traces, rows, sum(1 for t in traces if t.status is TraceStatus.FAILED))

    if run_dir is not None:
        run_dir = Path(run_dir)
        write_jsonl(run_dir / "traces.jsonl", (t.to_dict() for t in traces))
        with open(run_dir / "report.json", "w", encoding="utf-8") as file:
            json.dump(run.report_dict(), file, indent=2)
        (run_dir / "report.txt").write_text(run.table() + "\n", encoding="utf-8")

    logger.info(f"corpus run finished: {len(traces)} instances, {run.n_failed} failed")
    return run


# Augmentation


@dataclass
class AugmentStats:
    kept: int = 0
    dropped: int = 0
    failed: int = 0
    threshold: float = 0.5
    max_iterations: int = 4
    triples_added_per_iteration: list[int] = field(default_factory=list)
    quality_per_iteration: list[float] | None = None

    @property
    def triples_added(self) -> int:
        return sum(self.triples_added_per_iteration)

    def to_dict(self) -> dict:
        return {**asdict(self), "triples_added": self.triples_added}


def run_augmentation(
    pairs: Sequence[ParallelRecord],
    verifier: VerifierBackend,
    overlap_threshold: float = 0.5,
    cfg: PipelineConfig | None = None,
    quality_scorer: Callable[[str, SemanticGraph], float] | None = None,
) -> tuple[list[ParallelRecord], AugmentStats]:
    """
    Drop pairs whose graph is poorly grounded in the text, then grow the graphs
    of the survivors with the verifier's missing triples (existing graph as Base,
    up to ``cfg.augment_max_iterations`` rounds). A pair whose verifier call
    fails is kept unchanged and counted as failed.
    """
    cfg = cfg or PipelineConfig()
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ConfigError(f"overlap_threshold must be in [0, 1], got {overlap_threshold}")
    max_iterations = cfg.augment_max_iterations
    stats = AugmentStats(
        threshold=overlap_threshold,
        max_iterations=max_iterations,
        triples_added_per_iteration=[0] * max_iterations,
    )

    survivors = [p for p in pairs if surface_overlap(p.text, p.graph, cfg.policy) >= overlap_threshold]
    stats.kept = len(survivors)
    stats.dropped = len(pairs) - len(survivors)

    def _job(pair: ParallelRecord) -> IterationTrace:
        trace = IterationTrace(pair.id, pair.text, PipelineMode.OFFLINE)
        try:
            return _correct_offline(trace, pair.text, pair.graph, verifier, cfg, max_iterations, None)
        except VerigraphError as e:
            return _fail(trace, e)

    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        traces = list(pool.map(_job, survivors))

    augmented = []
    for pair, trace in zip(survivors, traces):
        if trace.status is TraceStatus.FAILED:
            stats.failed += 1
            augmented.append(pair)
            continue
        for iteration in range(1, len(trace.records)):
            added = len(trace.records[iteration].graph) - len(trace.records[iteration - 1].graph)
            stats.triples_added_per_iteration[iteration - 1] += added
        augmented.append(ParallelRecord(pair.id, pair.text, trace.final_graph))

    if quality_scorer is not None and survivors:
        stats.quality_per_iteration = []
        for iteration in range(max_iterations + 1):
            values = [
                quality_scorer(pair.text, trace.graph_at(iteration) if trace.records else pair.graph)
                for pair, trace in zip(survivors, traces)
            ]
            stats.quality_per_iteration.append(math.fsum(values) / len(values))

    logger.info(
        f"augmentation kept {stats.kept}, dropped {stats.dropped}, added {stats.triples_added} triples"
    )
    return augmented, stats
