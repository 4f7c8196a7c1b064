# Standard library imports
import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

# Local imports
from src.cache import ResponseCache
from src.errors import ConfigError, GraphError, IdMismatch, VerigraphError
from src.graph import (
    NormalizationPolicy,
    ParallelRecord,
    SemanticGraph,
    graph_from_value,
    load_parallel,
    read_records,
    write_jsonl,
)
from src.llm import ChatCompletionsClient, DecodingParams, SimulatedLLM, SimulatedLLMConfig
from src.load_configs import (
    RunConfig,
    apply_overrides,
    build_run_config,
    load_configs,
    validate,
    write_effective_config,
)
from src.logger import configure_logging, get_logger
from src.metrics import MetricReport, format_report_table, score_corpus
from src.perturb import PerturbationStrategy, build_verifier_dataset, filter_seed_pairs
from src.pipeline import PipelineConfig, load_traces, replay_report, run_augmentation, run_corpus
from src.prompt import load_demonstrations
from src.similarity import make_similarity
from src.verifier import HttpVerifier, OracleVerifier

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(data, file, indent=2, ensure_ascii=False)


def _stats_path(out: Path) -> Path:
    return out.with_name(out.stem + ".stats.json")


# Backend wiring


def _cache(cfg: RunConfig) -> ResponseCache | None:
    return ResponseCache(cfg.cache_dir) if cfg.cache_enabled else None


def make_llm(cfg: RunConfig, dataset: list[ParallelRecord], policy: NormalizationPolicy, cache: ResponseCache | None):
    settings = cfg.llm
    if settings.backend == "simulated":
        sim = settings.simulated
        return SimulatedLLM(
            {record.text: record.graph for record in dataset},
            SimulatedLLMConfig(sim.drop_count, sim.corrupt_rate, sim.compliance, cfg.seed, sim.preamble),
            policy,
        )
    return ChatCompletionsClient(
        settings.base_url,
        settings.model,
        api_key_env=settings.api_key_env,
        decoding=DecodingParams(temperature=settings.temperature, max_tokens=settings.max_tokens),
        cache=cache,
        timeout=settings.timeout,
        max_attempts=settings.max_attempts,
        backoff=settings.backoff,
        max_in_flight=settings.max_in_flight,
        min_interval=settings.min_interval,
    )


def make_verifier(
    cfg: RunConfig,
    dataset: list[ParallelRecord],
    policy: NormalizationPolicy,
    cache: ResponseCache | None,
):
    settings = cfg.verifier
    if settings.backend == "oracle":
        references = dataset
        if settings.oracle_references:
            references = load_parallel(Path(settings.oracle_references), policy)
        return OracleVerifier({record.text: record.graph for record in references}, settings.oracle_mode, policy)
    return HttpVerifier(
        settings.base_url,
        endpoint=settings.endpoint,
        instruction_prefix=settings.instruction_prefix,
        api_key_env=settings.api_key_env,
        cache=cache,
        policy=policy,
        timeout=settings.timeout,
        max_attempts=settings.max_attempts,
        backoff=settings.backoff,
        max_in_flight=settings.max_in_flight,
        min_interval=settings.min_interval,
    )


def pipeline_config(cfg: RunConfig, policy: NormalizationPolicy) -> PipelineConfig:
    p = cfg.pipeline
    demos = ()
    if p.shots > 0:
        demos = tuple(load_demonstrations(cfg.demonstrations, cfg.dataset_tag, policy))
    return PipelineConfig(
        mode=p.mode,
        max_iterations=p.max_iterations,
        augment_max_iterations=p.augment_max_iterations,
        shots=p.shots,
        style=p.style,
        policy=policy,
        malformed_output_handling=p.malformed_output_handling,
        parallelism=p.parallelism,
        fail_open=p.fail_open,
        demonstrations=demos,
    )


# Subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    """
    Build verifier training data from a seed corpus.

    Args:
        args (argparse.Namespace): ``seed_file``, ``out``, ``strategy``, ``repeat``,
            ``prefix`` and ``max_triples``.
        cfg (RunConfig): Supplies the seed and the normalization policy.

    Returns:
        int: Exit status. ``out`` gets the examples, ``<stem>.stats.json`` the counts.
    """
    policy = NormalizationPolicy.from_name(cfg.pipeline.policy)
    seed_path = Path(args.seed_file)
    out = Path(args.out)

    records = read_records(seed_path)
    seed = filter_seed_pairs(records, args.max_triples, policy, source=str(seed_path))
    print(f"├── {len(seed)} of {len(records)} seed pairs kept (max {args.max_triples} triples)", flush=True)

    examples, stats = build_verifier_dataset(
        seed,
        PerturbationStrategy(args.strategy),
        rng_seed=cfg.seed,
        policy=policy,
        repeat=args.repeat,
        prefix=args.prefix,
    )
    write_jsonl(out, (example.to_row() for example in examples))
    _write_json(_stats_path(out), stats.to_dict())
    print(f"└── {stats.n_examples} examples written to {out}", flush=True)
    return EXIT_OK


def cmd_run(args, cfg: RunConfig) -> int:
    """
    Run the correction loop over ``cfg.dataset`` into ``cfg.run_dir``.

    Returns:
        int: EXIT_FAILURE when the share of failed instances exceeds
        ``pipeline.max_failed_ratio``, EXIT_OK otherwise.
    """
    if cfg.dataset is None:
        raise ConfigError("no dataset given (--dataset or data.dataset)")
    policy = NormalizationPolicy.from_name(cfg.pipeline.policy)
    dataset = load_parallel(Path(cfg.dataset), policy)
    pipe = pipeline_config(cfg, policy)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(run_dir / "config.json", cfg)

    cache = _cache(cfg)
    llm = make_llm(cfg, dataset, policy, cache)
    verifier = make_verifier(cfg, dataset, policy, cache)
    sim = make_similarity(cfg.metrics.similarity, cfg.metrics.similarity_endpoint, cfg.metrics.similarity_api_key_env)

    print(f"├── Running {len(dataset)} instances in {pipe.mode.value} mode", flush=True)
    run = run_corpus(dataset, llm, verifier, pipe, sim, cfg.metrics.ged_budget, run_dir, cfg.metrics.ged_timeout)
    print(run.table(), flush=True)
    print(
        f"└── {run.n_failed} failed, {sum(t.llm_calls for t in run.traces)} LLM calls, "
        f"report in {run_dir}",
        flush=True,
    )

    if run.failed_ratio > cfg.pipeline.max_failed_ratio:
        logger.error(f"✖ {run.failed_ratio:.1%} of instances failed (limit {cfg.pipeline.max_failed_ratio:.1%})")
        return EXIT_FAILURE
    return EXIT_OK


def _load_predictions(path: Path, policy: NormalizationPolicy) -> dict[str, SemanticGraph]:
    predictions = {}
    for record in read_records(path, require_text=False):
        try:
            predictions[record.id] = graph_from_value(record.graph, policy)
        except GraphError as e:
            logger.warning(f"{path}:{record.line}: unparsable prediction scored as empty graph: {e}")
            predictions[record.id] = SemanticGraph((), policy)
    return predictions


def cmd_evaluate(args, cfg: RunConfig) -> int:
    """
    Score predicted graphs against gold graphs.

    Args:
        args (argparse.Namespace): ``pred`` and ``gold`` JSONL paths, optional ``out``
            for the JSON report and ``per_instance`` for per-instance scores.
        cfg (RunConfig): Policy, similarity backend and GED settings.

    Returns:
        int: Exit status.

    Raises:
        IdMismatch: The two files do not hold the same ids.
    """
    policy = NormalizationPolicy.from_name(cfg.pipeline.policy)
    gold = load_parallel(Path(args.gold), policy)
    predictions = _load_predictions(Path(args.pred), policy)

    gold_ids = [record.id for record in gold]
    if set(gold_ids) != set(predictions) or len(set(gold_ids)) != len(gold_ids):
        missing = sorted(set(gold_ids) - set(predictions))[:5]
        extra = sorted(set(predictions) - set(gold_ids))[:5]
        raise IdMismatch(f"prediction ids do not match gold ids (missing {missing}, unexpected {extra})")

    sim = make_similarity(cfg.metrics.similarity, cfg.metrics.similarity_endpoint, cfg.metrics.similarity_api_key_env)
    pairs = [(predictions[record.id], record.graph) for record in gold]
    scores = score_corpus(
        pairs, policy, sim, cfg.metrics.ged_budget, gold_ids, cfg.pipeline.parallelism, cfg.metrics.ged_timeout
    )
    report = MetricReport.from_scores(scores)

    print(format_report_table([("Eval", report)]), flush=True)
    if args.per_instance:
        write_jsonl(Path(args.per_instance), (s.to_dict() for s in scores))
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    """
    Filter a parallel corpus by text-graph overlap and grow the kept graphs
    with the verifier. Writes ``out`` and ``<stem>.stats.json``.
    """
    policy = NormalizationPolicy.from_name(cfg.pipeline.policy)
    pairs_path = Path(args.pairs)
    pairs = load_parallel(pairs_path, policy)
    out = Path(args.out)

    verifier = make_verifier(cfg, pairs, policy, _cache(cfg))
    augmented, stats = run_augmentation(
        pairs,
        verifier,
        overlap_threshold=cfg.pipeline.overlap_threshold,
        cfg=pipeline_config(cfg, policy),
    )
    write_jsonl(out, (record.to_row() for record in augmented))
    _write_json(_stats_path(out), stats.to_dict())
    print(
        f"└── kept {stats.kept}, dropped {stats.dropped}, added {stats.triples_added} triples -> {out}",
        flush=True,
    )
    return EXIT_OK


def _recorded_config(run_dir: Path) -> dict:
    path = run_dir / "config.json"
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as file:
        return json.load(file)


def cmd_report(args, cfg: RunConfig) -> int:
    """
    Re-render the per-iteration table of a run directory without calling any backend.

    The settings that shape the table (iteration cap, policy, similarity and GED)
    come from the run's ``config.json`` when it exists, the current config fills
    in the rest.
    """
    run_dir = Path(args.run_dir)
    recorded = _recorded_config(run_dir)
    pipeline = {**asdict(cfg.pipeline), **recorded.get("pipeline", {})}
    metrics = {**asdict(cfg.metrics), **recorded.get("metrics", {})}
    policy = NormalizationPolicy.from_name(pipeline["policy"])

    dataset_path = args.dataset or recorded.get("dataset") or cfg.dataset
    if dataset_path is None:
        raise ConfigError("cannot find the reference dataset; pass --dataset")

    references = {record.id: record.graph for record in load_parallel(Path(dataset_path), policy)}
    traces = load_traces(run_dir, policy)
    unknown = [t.instance_id for t in traces if t.instance_id not in references]
    if unknown:
        raise IdMismatch(f"traces without a reference: {unknown[:5]}")

    sim = make_similarity(metrics["similarity"], metrics["similarity_endpoint"], metrics["similarity_api_key_env"])
    rows = replay_report(
        traces, references, pipeline["max_iterations"], policy, sim, metrics["ged_budget"], metrics.get("ged_timeout")
    )
    table = format_report_table(rows)
    (run_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table, flush=True)
    return EXIT_OK


# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="verigraph",
        description="Verifier-guided text-to-graph generation: data, runs, evaluation and augmentation.",
    )
    parser.add_argument("--config", default=None, help="YAML config file (default: ./configs.yml)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--seed", type=int, default=None, help="Top-level random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Build verifier training data from a seed corpus")
    gen.add_argument("--seed-file", required=True, help="Seed JSONL of {id, text, graph}")
    gen.add_argument("--out", required=True, help="Output JSONL of {input, target}")
    gen.add_argument(
        "--strategy",
        default=PerturbationStrategy.RANDOM_OMIT.value,
        choices=[s.value for s in PerturbationStrategy],
    )
    gen.add_argument("--repeat", type=int, default=1, help="Perturbed examples per seed pair")
    gen.add_argument("--prefix", default="", help="Instruction prefix for a unified verifier")
    gen.add_argument("--max-triples", type=int, default=6, help="Drop seed graphs larger than this")
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser("run", help="Run the correction loop over a dataset")
    run.add_argument("--dataset", help="Input JSONL of {id, text, graph}")
    run.add_argument("--out", help="Run directory")
    run.add_argument("--mode", choices=["prompt", "offline"])
    run.add_argument("--max-iterations", type=int)
    run.add_argument("--shots", type=int)
    run.add_argument("--style", choices=["P1", "P2", "P3"])
    run.add_argument("--llm", choices=["openai", "simulated"], help="LLM backend")
    run.add_argument("--verifier", choices=["http", "oracle"], help="Verifier backend")
    run.add_argument("--parallelism", type=int)
    run.set_defaults(func=cmd_run)

    evaluate = sub.add_parser("evaluate", help="Score predicted graphs against gold graphs")
    evaluate.add_argument("--pred", required=True, help="JSONL of {id, graph} predictions")
    evaluate.add_argument("--gold", required=True, help="JSONL of {id, text, graph} references")
    evaluate.add_argument("--out", help="Write the report as JSON")
    evaluate.add_argument("--per-instance", help="Write per-instance scores as JSONL")
    evaluate.add_argument("--similarity", choices=["exact", "token", "remote"])
    evaluate.add_argument("--policy", choices=["default", "strict"])
    evaluate.set_defaults(func=cmd_evaluate)

    augment = sub.add_parser("augment", help="Filter and enrich a parallel corpus with the verifier")
    augment.add_argument("--pairs", required=True, help="JSONL of {id, text, graph}")
    augment.add_argument("--out", required=True, help="Augmented JSONL")
    augment.add_argument("--threshold", type=float, help="Minimum text-graph overlap")
    augment.add_argument("--max-iterations", type=int)
    augment.add_argument("--verifier", choices=["http", "oracle"])
    augment.add_argument("--references", help="Reference graphs for the oracle verifier")
    augment.set_defaults(func=cmd_augment)

    report = sub.add_parser("report", help="Re-render the per-iteration table of a run directory")
    report.add_argument("--run-dir", required=True)
    report.add_argument("--dataset", help="Reference dataset (default: the one recorded in the run)")
    report.set_defaults(func=cmd_report)
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "seed": get("seed"),
        "logging.level": get("log_level"),
        "data.dataset": get("dataset"),
        "output.run_dir": get("out") if args.command == "run" else None,
        "pipeline.mode": get("mode"),
        "pipeline.max_iterations": get("max_iterations") if args.command == "run" else None,
        "pipeline.augment_max_iterations": get("max_iterations") if args.command == "augment" else None,
        "pipeline.shots": get("shots"),
        "pipeline.style": get("style"),
        "pipeline.parallelism": get("parallelism"),
        "pipeline.overlap_threshold": get("threshold"),
        "pipeline.policy": get("policy"),
        "llm.backend": get("llm"),
        "verifier.backend": get("verifier"),
        "verifier.oracle_references": get("references"),
        "metrics.similarity": get("similarity"),
    }


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        raw = apply_overrides(load_configs(args.config), _overrides(args))
        cfg = build_run_config(raw)
        configure_logging(cfg.log_level)
        validate(
            cfg,
            needs_llm=args.command == "run",
            needs_verifier=args.command in ("run", "augment"),
        )
    except ConfigError as e:
        logger.error(f"✖ {e}")
        return EXIT_USAGE

    try:
        return args.func(args, cfg)
    except ConfigError as e:
        logger.error(f"✖ {e}")
        return EXIT_USAGE
    except (VerigraphError, OSError) as e:
        logger.error(f"✖ {args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
