"""Command-line interface for the full pipeline.

Subcommands: ingest, dedup, split, generate, build-cache, recommend,
evaluate, project, bench, serve. Usage errors exit 2; operation errors
exit 1 with the engine error code on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dedup as dedup_mod
from .config import EngineConfig, load_config
from .corpus import (
    PromptRecord,
    build_agent_corpora,
    load_corpus_cache,
    read_prompts,
    save_corpus_cache,
    split_dataset,
    write_prompts,
)
from .embedding import EmbeddingProviderSpec, RephraseSpec, build_provider, embed_texts
from .errors import AgentRecError, InvalidInputError
from .projection import export_plot_data, fit_pca, project
from .sampling import SamplingConfig, generate_prompt, load_fixture_source
from .scoring import (
    ScoreConfig,
    latency_benchmark,
    recommend,
    score_function_sweep,
    top_k_accuracy,
)
from .service import serve


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("embedding provider")
    group.add_argument("--provider-kind", choices=("deterministic-hash", "remote-http"))
    group.add_argument("--dim", type=int, help="embedding dimension")
    group.add_argument("--provider-seed", type=int, help="hash-embedder seed")
    group.add_argument("--endpoint", help="remote embedding endpoint URL")
    group.add_argument("--timeout-ms", type=float, help="remote call timeout")


def _add_score_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("score function")
    group.add_argument("--score-kind", choices=("max", "arithmetic", "geometric", "p-means"))
    group.add_argument("--p", type=float, help="power-mean exponent")
    group.add_argument("--epsilon", type=float, help="similarity clamp floor")


def _add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file (flags override it)")


def _engine_config(args: argparse.Namespace) -> EngineConfig:
    overrides: dict = {}
    provider = {
        "kind": getattr(args, "provider_kind", None),
        "dim": getattr(args, "dim", None),
        "seed": getattr(args, "provider_seed", None),
        "endpoint": getattr(args, "endpoint", None),
        "timeout_ms": getattr(args, "timeout_ms", None),
    }
    provider = {k: v for k, v in provider.items() if v is not None}
    if provider:
        overrides["provider"] = provider
    score = {
        "kind": getattr(args, "score_kind", None),
        "p": getattr(args, "p", None),
        "epsilon": getattr(args, "epsilon", None),
    }
    score = {k: v for k, v in score.items() if v is not None}
    if score:
        overrides["score"] = score
    for key in ("cache_path", "listen_address", "default_k"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "cache", None) is not None:
        overrides["cache_path"] = args.cache
    if getattr(args, "listen", None) is not None:
        overrides["listen_address"] = args.listen
    return load_config(getattr(args, "config", None), overrides=overrides)


def _parse_score_configs(spec: str) -> list[ScoreConfig]:
    aliases = {"max": "max", "arith": "arithmetic", "arithmetic": "arithmetic",
               "geo": "geometric", "geometric": "geometric",
               "pmeans": "p-means", "p-means": "p-means"}
    configs = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        name, _, param = token.partition(":")
        kind = aliases.get(name.lower())
        if kind is None:
            raise InvalidInputError(f"unknown score config {token!r}")
        if kind == "p-means":
            configs.append(ScoreConfig("p-means", p=float(param) if param else 200.0))
        else:
            if param:
                raise InvalidInputError(f"score kind {name!r} takes no parameter")
            configs.append(ScoreConfig(kind))
    if not configs:
        raise InvalidInputError("no score configs given")
    return configs


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    records: list[PromptRecord] = []
    seen: set[str] = set()
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise InvalidInputError(f"{args.input}:{lineno}: not valid JSON: {exc}") from exc
        if "agent" not in obj or "text" not in obj:
            raise InvalidInputError(f"{args.input}:{lineno}: record needs 'agent' and 'text'")
        text = " ".join(str(obj["text"]).split())
        if not text:
            raise InvalidInputError(f"{args.input}:{lineno}: empty text")
        record_id = str(obj.get("id") or f"{args.id_prefix}{lineno:06d}")
        if record_id in seen:
            raise InvalidInputError(f"{args.input}:{lineno}: duplicate id {record_id!r}")
        seen.add(record_id)
        records.append(PromptRecord(record_id, str(obj["agent"]), text))
    count = write_prompts(records, args.output)
    _emit({"written": count, "agents": len({r.agent for r in records})})
    return 0


def _cmd_dedup(args) -> int:
    prompts = read_prompts(args.input)
    retained, report = dedup_mod.deduplicate(
        prompts, w=args.window, h=args.hashes, seed=args.seed, threshold=args.threshold
    )
    write_prompts(retained, args.output)
    if args.report:
        with Path(args.report).open("w", encoding="utf-8") as handle:
            for entry in report:
                json.dump(
                    {"dropped": entry.dropped, "kept": entry.kept, "estimate": entry.estimate},
                    handle,
                )
                handle.write("\n")
    _emit({"input": len(prompts), "retained": len(retained), "dropped": len(report)})
    return 0


def _cmd_split(args) -> int:
    prompts = read_prompts(args.input)
    splits = split_dataset(prompts, ratios=(args.train_frac, args.finetune_frac), seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name in ("train", "test", "finetune", "reward"):
        counts[name] = write_prompts(getattr(splits, name), out / f"{name}.jsonl")
    _emit(counts)
    return 0


def _cmd_generate(args) -> int:
    source = load_fixture_source(args.source)
    base = SamplingConfig(
        top_k=args.top_k,
        nucleus_p=args.nucleus_p,
        repetition_penalty=args.repetition_penalty,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        seed=args.seed,
    )
    with Path(args.output).open("w", encoding="utf-8") as handle:
        for i in range(args.count):
            cfg = SamplingConfig(
                top_k=base.top_k,
                nucleus_p=base.nucleus_p,
                repetition_penalty=base.repetition_penalty,
                temperature=base.temperature,
                max_tokens=base.max_tokens,
                seed=base.seed + i,
            )
            text = generate_prompt(source, cfg)
            json.dump({"agent": args.agent, "text": text}, handle, ensure_ascii=False)
            handle.write("\n")
    _emit({"generated": args.count, "agent": args.agent})
    return 0


def _cmd_build_cache(args) -> int:
    config = _engine_config(args)
    prompts = read_prompts(args.input)
    corpora = build_agent_corpora(prompts, config.provider, per_agent_limit=args.limit)
    written = save_corpus_cache(corpora, args.output)
    _emit(
        {
            "agents": len(corpora),
            "rows": sum(c.size for c in corpora.values()),
            "bytes": written,
            "path": str(args.output),
        }
    )
    return 0


def _cmd_recommend(args) -> int:
    config = _engine_config(args)
    if not config.cache_path:
        raise InvalidInputError("recommend requires --cache or cache_path in the config")
    corpora = load_corpus_cache(config.cache_path)
    rephrase = config.rephrase if args.rephrase else RephraseSpec("identity")
    result = recommend(
        args.prompt, corpora, config.score, rephrase, config.provider, k=args.k or config.default_k
    )
    _emit(result.to_dict())
    return 0


def _cmd_evaluate(args) -> int:
    config = _engine_config(args)
    if not config.cache_path:
        raise InvalidInputError("evaluate requires --cache or cache_path in the config")
    corpora = load_corpus_cache(config.cache_path)
    labeled = read_prompts(args.input)
    ks = [int(k) for k in args.ks.split(",")]
    configs = _parse_score_configs(args.configs)
    table = score_function_sweep(corpora, labeled, config.provider, configs, ks)
    _emit(
        [
            {"config": {"kind": cfg.kind, "p": cfg.p, "epsilon": cfg.epsilon}, "report": report.to_dict()}
            for cfg, report in table
        ]
    )
    return 0


def _cmd_project(args) -> int:
    config = _engine_config(args)
    if bool(args.input) == bool(args.cache):
        raise InvalidInputError("project requires exactly one of --input or --cache")
    if args.input:
        prompts = read_prompts(args.input)
        embedded = embed_texts(config.provider, [p.text for p in prompts])
        matrix = np.stack([e.values for e in embedded])
        labels = [p.agent for p in prompts]
    else:
        corpora = load_corpus_cache(args.cache)
        matrix = np.vstack([corpora[a].embeddings for a in sorted(corpora)])
        labels = [a for a in sorted(corpora) for _ in range(corpora[a].size)]
    model = fit_pca(matrix, args.components)
    points = project(matrix, model)
    rows = export_plot_data(points, labels, args.output)
    _emit({"rows": rows, "eigenvalues": model.eigenvalues.tolist(), "path": str(args.output)})
    return 0


def _cmd_bench(args) -> int:
    config = _engine_config(args)
    if not config.cache_path:
        raise InvalidInputError("bench requires --cache or cache_path in the config")
    corpora = load_corpus_cache(config.cache_path)
    prompts = [p.text for p in read_prompts(args.input)]
    report = latency_benchmark(
        corpora, prompts, config.score, config.provider, args.repetitions, warmup=args.warmup
    )
    _emit(report.to_dict())
    return 0


def _cmd_serve(args) -> int:
    config = _engine_config(args)
    try:
        handle = serve(config)
    except AgentRecError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    print(f"listening on {config.host}:{handle.port} with {len(handle.state.corpora)} agents")
    try:
        handle.wait()
    except KeyboardInterrupt:
        handle.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate raw JSONL prompts into a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--id-prefix", default="p")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("dedup", help="drop near-duplicate prompts")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report", help="write drop report as JSON lines")
    p.add_argument("--window", "-w", type=int, default=dedup_mod.DEFAULT_WINDOW)
    p.add_argument("--hashes", type=int, default=dedup_mod.DEFAULT_HASHES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=dedup_mod.DEFAULT_THRESHOLD)
    p.set_defaults(func=_cmd_dedup)

    p = sub.add_parser("split", help="split a dataset into train/test/finetune/reward")
    p.add_argument("--input", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--finetune-frac", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("generate", help="generate prompts from a logit source")
    p.add_argument("--source", required=True, help="logit source JSON description")
    p.add_argument("--agent", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--nucleus-p", type=float, default=0.95)
    p.add_argument("--repetition-penalty", type=float, default=1.2)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("build-cache", help="embed prompts and write the corpus cache")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--limit", type=int, help="per-agent corpus size limit")
    _add_config_flag(p)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_build_cache)

    p = sub.add_parser("recommend", help="rank agents for one prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--cache", help="corpus cache path")
    p.add_argument("--rephrase", action="store_true", help="apply the configured rephrase hook")
    _add_config_flag(p)
    _add_provider_flags(p)
    _add_score_flags(p)
    p.set_defaults(func=_cmd_recommend)

    p = sub.add_parser("evaluate", help="top-k accuracy for one or more score configs")
    p.add_argument("--input", required=True, help="labeled JSONL prompts")
    p.add_argument("--cache", help="corpus cache path")
    p.add_argument("--configs", default="p-means:200")
    p.add_argument("--ks", default="1")
    _add_config_flag(p)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("project", help="PCA-project embeddings to CSV plot data")
    p.add_argument("--input", help="JSONL prompts to embed and project")
    p.add_argument("--cache", help="project cached corpus rows instead")
    p.add_argument("--components", "-d", type=int, choices=(2, 3), default=2)
    p.add_argument("--output", required=True)
    _add_config_flag(p)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("bench", help="latency benchmark over a prompt file")
    p.add_argument("--input", required=True, help="JSONL prompts to cycle through")
    p.add_argument("--cache", help="corpus cache path")
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    _add_config_flag(p)
    _add_provider_flags(p)
    _add_score_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--cache", help="corpus cache path")
    p.add_argument("--listen", help="host:port to bind")
    _add_config_flag(p)
    _add_provider_flags(p)
    _add_score_flags(p)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AgentRecError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io_error]: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    raise SystemExit(main())
