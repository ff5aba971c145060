"""Command-line entry point.

One binary, many subcommands; each is a thin wrapper over one module
operation. Primary result tables go to stdout, diagnostics to stderr.
Exit codes: 0 success, 1 input/validation error, 2 external-service error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__, harness, mapping, metrics
from .clients import (
    ChatCompleter,
    Embedder,
    InferenceConfig,
    RateLimiter,
    RemoteChatCompleter,
    RemoteEmbedder,
    ScriptedChatCompleter,
    TrigramEmbedder,
)
from .errors import HddxError, InputError
from .metrics import EqualityJudge, Level
from .taxonomy import load_taxonomy

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, per the exit-code contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker pool size")
    parser.add_argument("--seed", type=int, default=0, help="seed for any randomized step")


def _add_rate_limit(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--rate-limit", type=int, default=8,
        help="max in-flight remote requests, shared across this command's clients",
    )


def _limiter_from_args(args: argparse.Namespace) -> RateLimiter | None:
    budget = getattr(args, "rate_limit", 0)
    return RateLimiter(budget) if budget else None


def _embedder_from_args(args: argparse.Namespace, limiter: RateLimiter | None = None) -> Embedder:
    if args.stub_embedder:
        return TrigramEmbedder(dim=args.stub_dim)
    return RemoteEmbedder(model=args.embed_model, limiter=limiter)


def _completer_from_args(
    args: argparse.Namespace, role: str, limiter: RateLimiter | None = None
) -> ChatCompleter | None:
    if getattr(args, "chat_script", None):
        return ScriptedChatCompleter.from_file(args.chat_script, identity=f"scripted-{role}")
    if getattr(args, "remote_chat", False):
        return RemoteChatCompleter(model=args.chat_model, limiter=limiter)
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hddx", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hddx {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("taxonomy-validate", help="load a taxonomy file and report its shape")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.set_defaults(func=cmd_taxonomy_validate)

    p = sub.add_parser("kb-build", help="extract the (surface name, code) knowledge base")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kb_build)

    p = sub.add_parser("index-build", help="embed the knowledge base into a vector index")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True)
    p.add_argument("--stub-embedder", action="store_true", help="use the deterministic trigram stub")
    p.add_argument("--stub-dim", type=int, default=64)
    p.add_argument("--embed-model", default="text-embedding-3-large", help="remote embedding model id")
    _add_rate_limit(p)
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("map", help="map unique diagnosis texts to codes")
    p.add_argument("--index", required=True)
    p.add_argument("--preds", nargs="+", help="prediction files whose unique diagnoses get mapped")
    p.add_argument("--texts", help="file with one diagnosis text per line")
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy", help="optional; records taxonomy provenance in the table")
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--k", type=int, default=mapping.DEFAULT_TOP_K)
    p.add_argument("--stub-embedder", action="store_true")
    p.add_argument("--stub-dim", type=int, default=64)
    p.add_argument("--embed-model", default="text-embedding-3-large")
    p.add_argument("--chat-script", help="scripted reranker fixture (JSONL)")
    p.add_argument("--remote-chat", action="store_true", help="rerank through the remote chat endpoint")
    p.add_argument("--chat-model", default="gpt-4o")
    _add_rate_limit(p)
    _add_common(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("map-validate", help="score a mapping table against a gold file")
    p.add_argument("--table", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--index", help="recompute retrieval top-k accuracy against this index")
    p.add_argument("--stub-embedder", action="store_true")
    p.add_argument("--stub-dim", type=int, default=64)
    p.add_argument("--embed-model", default="text-embedding-3-large")
    p.add_argument("--k", type=int, default=mapping.DEFAULT_TOP_K)
    _add_rate_limit(p)
    p.set_defaults(func=cmd_map_validate)

    p = sub.add_parser("sample", help="stratified sample of the case corpus")
    p.add_argument("--cases", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("predict", help="generate five-diagnosis predictions per case")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-id", required=True)
    p.add_argument("--chat-script")
    p.add_argument("--remote-chat", action="store_true")
    p.add_argument("--chat-model", default=None, help="remote model id (defaults to --model-id)")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--max-tokens", type=int, default=1024)
    _add_rate_limit(p)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="hierarchical per-case scores and macro summary")
    p.add_argument("--cases", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True, help="scored-case file")
    p.add_argument("--failures", choices=("zero", "exclude"), default="exclude")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("levels", help="macro scores projected to each hierarchy level")
    p.add_argument("--cases", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True)
    p.add_argument("--level-projection", choices=("keep", "drop"), default="keep")
    p.add_argument("--failures", choices=("zero", "exclude"), default="exclude")
    p.set_defaults(func=cmd_levels)

    p = sub.add_parser("chapters", help="chapter-sliced macro scores")
    p.add_argument("--cases", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_chapters)

    p = sub.add_parser("topk", help="flat top-k accuracy via a judge")
    p.add_argument("--cases", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--chat-script", help="scripted judge fixture (JSONL)")
    p.add_argument("--remote-chat", action="store_true")
    p.add_argument("--chat-model", default="gpt-4o")
    p.add_argument("--equality-judge", action="store_true", help="offline exact-match judge")
    _add_rate_limit(p)
    p.set_defaults(func=cmd_topk)

    p = sub.add_parser("rankshift", help="rank deltas between a flat and a hierarchical leaderboard")
    p.add_argument("--flat", required=True, help="TSV of model_id<TAB>score")
    p.add_argument("--hier", required=True, help="TSV of model_id<TAB>score")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rankshift)

    p = sub.add_parser("report", help="full evaluation report over one or more prediction files")
    p.add_argument("--cases", required=True)
    p.add_argument("--preds", required=True, nargs="+")
    p.add_argument("--table", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--format", choices=("canonical", "flat-order"), default="canonical")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--level-projection", choices=("keep", "drop"), default="keep")
    p.add_argument("--failures", choices=("zero", "exclude"), default="exclude")
    p.add_argument("--chat-script", help="scripted judge fixture for the flat metric")
    p.add_argument("--remote-chat", action="store_true")
    p.add_argument("--chat-model", default="gpt-4o")
    p.add_argument("--equality-judge", action="store_true")
    _add_rate_limit(p)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def cmd_taxonomy_validate(args) -> int:
    taxonomy = load_taxonomy(args.taxonomy, format=args.format)
    print(f"nodes\t{len(taxonomy)}")
    print(f"chapters\t{len(taxonomy.chapters)}")
    print(f"taxonomy_id\t{taxonomy.content_id}")
    return 0


def cmd_kb_build(args) -> int:
    taxonomy = load_taxonomy(args.taxonomy, format=args.format)
    base = mapping.build_knowledge_base(taxonomy)
    with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
        for entry in base:
            handle.write(f"{entry.surface_name}\t{entry.code}\t{entry.source}\n")
    logger.info("wrote %d knowledge-base entries to %s", len(base), args.out)
    return 0


def cmd_index_build(args) -> int:
    taxonomy = load_taxonomy(args.taxonomy, format=args.format)
    base = mapping.build_knowledge_base(taxonomy)
    embedder = _embedder_from_args(args, _limiter_from_args(args))
    index = mapping.build_index(base, embedder)
    index.save(args.out)
    logger.info("wrote index of %d vectors (dim %d) to %s", len(index), index.dim, args.out)
    return 0


def cmd_map(args) -> int:
    if not args.preds and not args.texts:
        raise InputError("map requires --preds or --texts")
    index = mapping.VectorIndex.load(args.index)
    limiter = _limiter_from_args(args)
    embedder = _embedder_from_args(args, limiter)
    reranker = _completer_from_args(args, role="reranker", limiter=limiter)
    taxonomy_id = ""
    if args.taxonomy:
        taxonomy_id = load_taxonomy(args.taxonomy, format=args.format).content_id
    texts: list[str] = []
    if args.preds:
        texts.extend(harness.collect_unique_diagnoses(args.preds))
    if args.texts:
        texts.extend(
            line.strip()
            for line in Path(args.texts).read_text(encoding="utf-8").splitlines()
            if line.strip()
        )
    table, failures = mapping.map_diagnoses(
        texts,
        index,
        embedder,
        reranker=reranker,
        k=args.k,
        jobs=args.jobs,
        taxonomy_id=taxonomy_id,
    )
    table.save(args.out)
    if failures:
        failure_path = f"{args.out}.failures.tsv"
        with open(failure_path, "w", encoding="utf-8", newline="\n") as handle:
            for failure in sorted(failures, key=lambda f: f.free_text):
                handle.write(f"{failure.free_text}\t{failure.reason}\n")
        logger.warning("%d texts failed to map; see %s", len(failures), failure_path)
    logger.info("mapped %d texts to %s", len(table), args.out)
    return 0


def cmd_map_validate(args) -> int:
    taxonomy = load_taxonomy(args.taxonomy, format=args.format)
    table = mapping.MappingTable.load(args.table)
    gold = mapping.load_gold(args.gold)
    validation = mapping.validate_mapping(table, gold, taxonomy)
    print(f"total\t{validation.total}")
    print(f"top1\t{validation.top1_accuracy:.4f}")
    for relation, count in validation.errors_by_relation.items():
        print(f"errors[{relation}]\t{count}")
    if args.index:
        index = mapping.VectorIndex.load(args.index)
        embedder = _embedder_from_args(args, _limiter_from_args(args))
        for k in (1, 5, 15):
            found = 0
            for text, gold_code in gold:
                candidates = mapping.retrieve(index, text, embedder, k=k)
                codes = {c.entry.code for c in candidates.ranked}
                found += int(gold_code in codes)
            print(f"retrieval_top{k}\t{found / len(gold):.4f}")
    elif validation.retrieval_topk:
        for k, accuracy in validation.retrieval_topk.items():
            print(f"retrieval_top{k}\t{accuracy:.4f}")
    return 0


def cmd_sample(args) -> int:
    cases = harness.load_cases(args.cases)
    sample = harness.stratified_sample(cases, n=args.n, seed=args.seed)
    harness.save_cases(sample, args.out)
    logger.info("sampled %d of %d cases to %s", len(sample), len(cases), args.out)
    return 0


def cmd_predict(args) -> int:
    cases = harness.load_cases(args.cases)
    if not args.chat_model:
        args.chat_model = args.model_id
    model = _completer_from_args(args, role="model", limiter=_limiter_from_args(args))
    if model is None:
        raise InputError("predict requires --chat-script or --remote-chat")
    config = InferenceConfig(temperature=args.temperature, max_tokens=args.max_tokens)
    records, failures = harness.run_predictions(
        cases, model, config=config, model_id=args.model_id, jobs=args.jobs
    )
    harness.save_predictions(records, args.out)
    if failures:
        failure_path = f"{args.out}.failures.jsonl"
        harness.save_failures(failures, failure_path)
        logger.warning("%d cases failed; see %s", len(failures), failure_path)
    logger.info("wrote %d predictions to %s", len(records), args.out)
    return 0


def _load_eval_inputs(args):
    cases = harness.load_cases(args.cases)
    table = mapping.MappingTable.load(args.table)
    taxonomy = load_taxonomy(args.taxonomy, format=args.format)
    return cases, table, taxonomy


def cmd_score(args) -> int:
    cases, table, taxonomy = _load_eval_inputs(args)
    predictions = harness.load_predictions(args.preds)
    runs = _evaluate_grouped(predictions, cases, table, taxonomy, failures=args.failures)
    by_case = {case.case_id: case for case in cases}
    scores = []
    for run in runs:
        for record in run.predictions:
            truth, _ = harness.truth_codes(by_case[record.case_id], table)
            pred_codes = [table.lookup(t).code for t in record.diagnoses]  # type: ignore[union-attr]
            scores.append(
                metrics.score_case(truth, metrics.DdxSet.of(pred_codes), taxonomy, case_id=record.case_id)
            )
    metrics.save_case_scores(sorted(scores, key=lambda s: s.case_id), args.out)
    print("model_id\tcases\thdp\thdr\thdf1")
    for run in runs:
        r = run.report
        print(f"{run.model_id}\t{r.case_count}\t{r.macro_hdp:.4f}\t{r.macro_hdr:.4f}\t{r.macro_hdf1:.4f}")
    return 0


def _evaluate_grouped(predictions, cases, table, taxonomy, judge=None, k=5,
                      level_projection="keep", failures="exclude"):
    by_model: dict[str, list] = {}
    for record in predictions:
        by_model.setdefault(record.model_id, []).append(record)
    return [
        harness.evaluate_model(
            group, cases, table, taxonomy, judge=judge, k=k,
            level_projection=level_projection, failures=failures,
        )
        for group in by_model.values()
    ]


def cmd_levels(args) -> int:
    cases, table, taxonomy = _load_eval_inputs(args)
    predictions = harness.load_predictions(args.preds)
    runs = _evaluate_grouped(
        predictions, cases, table, taxonomy,
        level_projection=args.level_projection, failures=args.failures,
    )
    with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("model_id\t" + "\t".join(level.name.lower() for level in Level) + "\n")
        for run in runs:
            values = "\t".join(f"{run.report.per_level[level]:.4f}" for level in Level)
            handle.write(f"{run.model_id}\t{values}\n")
    print(Path(args.out).read_text(encoding="utf-8"), end="")
    return 0


def cmd_chapters(args) -> int:
    cases, table, taxonomy = _load_eval_inputs(args)
    predictions = harness.load_predictions(args.preds)
    runs = _evaluate_grouped(predictions, cases, table, taxonomy)
    with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("model_id\tchapter\thdf1\tn\n")
        for run in runs:
            rows = sorted(run.report.per_chapter.items(), key=lambda item: (-item[1][1], item[0]))
            for chapter, (hdf1, n) in rows:
                handle.write(f"{run.model_id}\t{chapter}\t{hdf1:.4f}\t{n}\n")
    print(Path(args.out).read_text(encoding="utf-8"), end="")
    return 0


def _judge_from_args(args) -> ChatCompleter | None:
    if args.equality_judge:
        return EqualityJudge()
    return _completer_from_args(args, role="judge", limiter=_limiter_from_args(args))


def cmd_topk(args) -> int:
    cases = harness.load_cases(args.cases)
    predictions = harness.load_predictions(args.preds)
    judge = _judge_from_args(args)
    if judge is None:
        raise InputError("topk requires --chat-script, --remote-chat, or --equality-judge")
    by_case = {case.case_id: case for case in cases}
    by_model: dict[str, list] = {}
    for record in predictions:
        if record.case_id not in by_case:
            raise InputError(f"prediction references unknown case {record.case_id!r}")
        by_model.setdefault(record.model_id, []).append(record)
    lines = ["model_id\ttopk\tevaluated\tunevaluated"]
    for model_id, group in by_model.items():
        hits = evaluated = failed = 0
        for record in sorted(group, key=lambda r: r.case_id):
            try:
                hit = metrics.flat_topk(
                    record.diagnoses, by_case[record.case_id].final_diagnosis, judge, k=args.k
                )
            except HddxError as exc:
                failed += 1
                logger.warning("judge unavailable for case %s: %s", record.case_id, exc)
                continue
            evaluated += 1
            hits += int(hit)
        accuracy = hits / evaluated if evaluated else float("nan")
        lines.append(f"{model_id}\t{accuracy:.4f}\t{evaluated}\t{failed}")
    output = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(output)
    print(output, end="")
    return 0


def _read_scores_tsv(path: str) -> list[tuple[str, float]]:
    pairs: list[tuple[str, float]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InputError(f"{path}: line {lineno}: expected model_id<TAB>score")
        try:
            pairs.append((parts[0], float(parts[1])))
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: bad score: {exc}") from exc
    return pairs


def cmd_rankshift(args) -> int:
    rows = metrics.rank_shift(_read_scores_tsv(args.flat), _read_scores_tsv(args.hier))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("model_id\tflat_rank\thier_rank\tdelta\n")
            for row in rows:
                handle.write(f"{row.model_id}\t{row.flat_rank}\t{row.hier_rank}\t{row.delta:+d}\n")
    for row in rows:
        print(f"{row.model_id} {row.delta:+d}")
    return 0


def cmd_report(args) -> int:
    cases, table, taxonomy = _load_eval_inputs(args)
    predictions = []
    for path in args.preds:
        predictions.extend(harness.load_predictions(path))
    judge = _judge_from_args(args)
    runs = _evaluate_grouped(
        predictions, cases, table, taxonomy, judge=judge, k=args.k,
        level_projection=args.level_projection, failures=args.failures,
    )
    paths = harness.emit_report(runs, args.out)
    print(paths["report"].read_text(encoding="utf-8"), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except HddxError as exc:
        print(f"hddx: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hddx: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal bug surface
        print(f"hddx: internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
