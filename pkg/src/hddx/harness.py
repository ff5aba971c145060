"""Benchmark orchestration.

Corpus ingestion, stratified sampling, prediction generation via the fixed
five-diagnosis prompt, unique-diagnosis collection, per-model evaluation
through the canonical mapping table, and report emission.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import floor
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .clients import ChatCompleter, InferenceConfig, extract_json_object
from .errors import ClientError, InputError, MappingLookupError, ParseError
from .mapping import MappingTable
from .metrics import (
    CaseScore,
    DdxSet,
    Level,
    MetricReport,
    aggregate,
    chapter_sliced_report,
    flat_topk,
    harmonic_mean,
    level_projected_pr,
    rank_shift,
    score_case,
)
from .taxonomy import Taxonomy

logger = logging.getLogger(__name__)

DDX_COUNT = 5

PREDICTION_SYSTEM_PROMPT = (
    "You are a diagnostic assistant.\n"
    "Based on the patient's clinical information, provide a differential diagnosis.\n"
    "Return the response in JSON format."
)

PREDICTION_USER_TEMPLATE = (
    "Based on the following patient information, provide the top 5 most likely differential diagnoses in probability order.\n"
    "For each diagnosis, provide the English medical term. Do not include any other text in your response without the JSON format.\n"
    "\n"
    "Patient Information:\n"
    "{patient_information}\n"
    "\n"
    'Please provide the response in a JSON object with a single key "diagnoses", which is a list of text.\n'
    "Example format:\n"
    "{{\n"
    '  "diagnoses": ["Pneumonia", "Bronchitis", "Influenza", "URTI", "Asthma"]\n'
    "}}"
)


def build_prediction_prompt(patient_info: str) -> str:
    return PREDICTION_USER_TEMPLATE.format(patient_information=patient_info)


@dataclass(frozen=True)
class GroundTruthItem:
    text: str
    code: str | None = None


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    patient_info: str
    ground_truth_ddx: tuple[GroundTruthItem, ...]
    final_diagnosis: str
    pathology: str


@dataclass(frozen=True)
class PredictionRecord:
    case_id: str
    model_id: str
    diagnoses: tuple[str, ...]


@dataclass(frozen=True)
class PredictionFailure:
    case_id: str
    model_id: str
    reason: str


def load_cases(path: str | Path) -> list[CaseRecord]:
    """Read the line-delimited case corpus, rejecting schema violations and
    duplicate case ids.
    """
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        try:
            case_id = str(record["case_id"])
            patient_info = str(record["patient_info"])
            raw_ddx = record["ground_truth_ddx"]
            final_diagnosis = str(record["final_diagnosis"])
            pathology = str(record["pathology"])
        except KeyError as exc:
            raise ParseError(f"{path}: line {lineno}: missing field {exc}") from exc
        if not case_id or not patient_info or not final_diagnosis or not pathology:
            raise ParseError(f"{path}: line {lineno}: empty required field")
        if not isinstance(raw_ddx, list) or not raw_ddx:
            raise ParseError(f"{path}: line {lineno}: ground_truth_ddx is empty")
        items = []
        for item in raw_ddx:
            text = str(item.get("text", "")).strip()
            if not text:
                raise ParseError(f"{path}: line {lineno}: ground-truth diagnosis with empty text")
            code = item.get("code")
            items.append(GroundTruthItem(text=text, code=str(code) if code else None))
        if case_id in seen:
            raise InputError(f"{path}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        cases.append(
            CaseRecord(
                case_id=case_id,
                patient_info=patient_info,
                ground_truth_ddx=tuple(items),
                final_diagnosis=final_diagnosis,
                pathology=pathology,
            )
        )
    return cases


def save_cases(cases: Sequence[CaseRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for case in cases:
            handle.write(
                json.dumps(
                    {
                        "case_id": case.case_id,
                        "patient_info": case.patient_info,
                        "ground_truth_ddx": [
                            {"text": item.text, **({"code": item.code} if item.code else {})}
                            for item in case.ground_truth_ddx
                        ],
                        "final_diagnosis": case.final_diagnosis,
                        "pathology": case.pathology,
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    records: list[PredictionRecord] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        try:
            case_id = str(record["case_id"])
            model_id = str(record["model_id"])
            diagnoses = record["diagnoses"]
        except KeyError as exc:
            raise ParseError(f"{path}: line {lineno}: missing field {exc}") from exc
        if (
            not isinstance(diagnoses, list)
            or len(diagnoses) != DDX_COUNT
            or not all(isinstance(d, str) and d.strip() for d in diagnoses)
        ):
            raise ParseError(f"{path}: line {lineno}: diagnoses must be exactly {DDX_COUNT} non-empty texts")
        records.append(PredictionRecord(case_id=case_id, model_id=model_id, diagnoses=tuple(d.strip() for d in diagnoses)))
    return records


def save_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(
                json.dumps(
                    {"case_id": record.case_id, "model_id": record.model_id, "diagnoses": list(record.diagnoses)},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def stratified_sample(cases: Sequence[CaseRecord], n: int, seed: int) -> list[CaseRecord]:
    """Proportional largest-remainder allocation across pathology strata,
    seeded shuffle within each stratum, output sorted by case_id.
    """
    if not cases:
        raise InputError("empty corpus")
    if n < 1 or n > len(cases):
        raise InputError(f"sample size {n} must be between 1 and the corpus size {len(cases)}")
    strata: dict[str, list[CaseRecord]] = {}
    for case in cases:
        strata.setdefault(case.pathology, []).append(case)
    total = len(cases)
    quotas = {name: n * len(members) / total for name, members in strata.items()}
    counts = {name: floor(q) for name, q in quotas.items()}
    leftover = n - sum(counts.values())
    for name in sorted(strata, key=lambda s: (-(quotas[s] - counts[s]), s))[:leftover]:
        counts[name] += 1
    rng = random.Random(seed)
    selected: list[CaseRecord] = []
    for name in sorted(strata):
        members = sorted(strata[name], key=lambda c: c.case_id)
        rng.shuffle(members)
        selected.extend(members[: counts[name]])
    return sorted(selected, key=lambda c: c.case_id)


def run_predictions(
    cases: Sequence[CaseRecord],
    model: ChatCompleter,
    config: InferenceConfig | None = None,
    model_id: str | None = None,
    jobs: int = 1,
) -> tuple[list[PredictionRecord], list[PredictionFailure]]:
    """Query the model once per case with the fixed prompt; parse the
    structured `diagnoses` list. Parse failures retry once and then land in
    the failure report; over-long lists are truncated to five with a warning.
    Transport errors propagate.
    """
    config = config or InferenceConfig()
    mid = model_id or model.identity

    def predict_one(case: CaseRecord) -> PredictionRecord | PredictionFailure:
        user_prompt = build_prediction_prompt(case.patient_info)
        reason = "unparseable response"
        for _ in range(2):
            reply = model.complete(PREDICTION_SYSTEM_PROMPT, user_prompt, config)
            try:
                payload = extract_json_object(reply)
            except ValueError:
                reason = "no JSON object in response after retry"
                continue
            diagnoses = payload.get("diagnoses")
            if not isinstance(diagnoses, list) or not all(isinstance(d, str) and d.strip() for d in diagnoses):
                reason = "diagnoses key missing or not a list of texts after retry"
                continue
            texts = [d.strip() for d in diagnoses]
            if len(texts) < DDX_COUNT:
                reason = f"only {len(texts)} diagnoses returned after retry"
                continue
            if len(texts) > DDX_COUNT:
                logger.warning("case %s: %d diagnoses returned, truncating to %d", case.case_id, len(texts), DDX_COUNT)
                texts = texts[:DDX_COUNT]
            return PredictionRecord(case_id=case.case_id, model_id=mid, diagnoses=tuple(texts))
        return PredictionFailure(case_id=case.case_id, model_id=mid, reason=reason)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(predict_one, cases))
    else:
        outcomes = [predict_one(case) for case in cases]
    records = [o for o in outcomes if isinstance(o, PredictionRecord)]
    failures = sorted(
        (o for o in outcomes if isinstance(o, PredictionFailure)), key=lambda f: f.case_id
    )
    return records, failures


def collect_unique_diagnoses(paths: Iterable[str | Path]) -> list[str]:
    """Union of diagnosis texts over all prediction files, trimmed and
    de-duplicated case-insensitively with the first-seen casing kept. Internal
    whitespace runs collapse to one space so texts stay tab-safe. Sorted.
    """
    seen: dict[str, str] = {}
    for path in paths:
        for record in load_predictions(path):
            for diagnosis in record.diagnoses:
                text = " ".join(diagnosis.split())
                if not text:
                    continue
                key = text.casefold()
                if key not in seen:
                    seen[key] = text
    return [seen[key] for key in sorted(seen)]


@dataclass
class EvalRun:
    model_id: str
    predictions: list[PredictionRecord]
    mapping_table_id: str
    report: MetricReport
    taxonomy_id: str = ""
    truth_source: str = ""  # corpus-codes | mapping-table | mixed
    judge_failures: int = 0
    excluded_cases: int = 0


def truth_codes(case: CaseRecord, table: MappingTable | None) -> tuple[DdxSet, bool]:
    """Ground-truth code set; pre-assigned corpus codes take precedence over
    the mapping table. Returns the set and whether the table was consulted.
    """
    codes: list[str] = []
    used_table = False
    for item in case.ground_truth_ddx:
        if item.code:
            codes.append(item.code)
            continue
        entry = table.lookup(item.text) if table is not None else None
        if entry is None:
            raise MappingLookupError(
                f"ground-truth diagnosis not in mapping table: {item.text!r} (case {case.case_id})"
            )
        codes.append(entry.code)
        used_table = True
    return DdxSet.of(codes), used_table


def evaluate_model(
    predictions: Sequence[PredictionRecord],
    cases: Sequence[CaseRecord],
    table: MappingTable,
    taxonomy: Taxonomy,
    judge: ChatCompleter | None = None,
    k: int = 5,
    level_projection: str = "keep",
    failures: str = "exclude",
    judge_config: InferenceConfig | None = None,
) -> EvalRun:
    """Score one model's predictions against the corpus through the shared
    mapping table: hierarchical aggregate, per-level and per-chapter
    decompositions, and optionally flat top-k via the judge. Cases whose
    judge calls fail are excluded from the top-k denominator only.
    """
    if failures not in ("exclude", "zero"):
        raise InputError(f"unknown failure handling {failures!r} (expected zero|exclude)")
    if not predictions:
        raise InputError("no predictions to evaluate")
    model_ids = {p.model_id for p in predictions}
    if len(model_ids) != 1:
        raise InputError(f"evaluate_model expects a single model, got {sorted(model_ids)}")
    model_id = predictions[0].model_id
    by_case = {case.case_id: case for case in cases}
    for record in predictions:
        if record.case_id not in by_case:
            raise InputError(f"prediction references unknown case {record.case_id!r}")
    seen_case_ids = set()
    for record in predictions:
        if record.case_id in seen_case_ids:
            raise InputError(f"duplicate prediction for case {record.case_id!r}")
        seen_case_ids.add(record.case_id)

    ordered = sorted(predictions, key=lambda r: r.case_id)
    case_scores: list[CaseScore] = []
    pairs: list[tuple[DdxSet, DdxSet]] = []
    judged: list[tuple[PredictionRecord, CaseRecord]] = []
    any_table_truth = False
    any_corpus_truth = False
    for record in ordered:
        case = by_case[record.case_id]
        pred_codes: list[str] = []
        for text in record.diagnoses:
            entry = table.lookup(text)
            if entry is None:
                raise MappingLookupError(
                    f"diagnosis not in mapping table: {text!r} (model {model_id}, case {record.case_id})"
                )
            pred_codes.append(entry.code)
        truth, used_table = truth_codes(case, table)
        any_table_truth |= used_table
        any_corpus_truth |= any(item.code for item in case.ground_truth_ddx)
        pred = DdxSet.of(pred_codes)
        case_scores.append(score_case(truth, pred, taxonomy, case_id=record.case_id))
        pairs.append((truth, pred))
        judged.append((record, case))

    excluded = len(by_case) - len(ordered)
    if failures == "zero":
        for case_id in sorted(set(by_case) - seen_case_ids):
            case_scores.append(CaseScore(case_id, 0.0, 0.0, 0.0, 0, 0, 0))
        excluded = 0

    report = aggregate(sorted(case_scores, key=lambda s: s.case_id), model_id=model_id)
    zero_pad = len(case_scores) - len(pairs)
    for level in Level:
        prs = [level_projected_pr(t, p, level, taxonomy, rule=level_projection) for t, p in pairs]
        prs.extend([(0.0, 0.0)] * zero_pad)
        macro_p = sum(p for p, _ in prs) / len(prs)
        macro_r = sum(r for _, r in prs) / len(prs)
        report.per_level[level] = harmonic_mean(macro_p, macro_r)
    report.per_chapter = {
        s.chapter: (s.hdf1, s.n_diagnoses) for s in chapter_sliced_report(pairs, taxonomy)
    }

    judge_failures = 0
    if judge is not None:
        hits = 0
        evaluated = 0
        for record, case in judged:
            try:
                correct = flat_topk(record.diagnoses, case.final_diagnosis, judge, k=k, config=judge_config)
            except ClientError as exc:
                judge_failures += 1
                logger.warning("judge unavailable for case %s: %s", record.case_id, exc)
                continue
            evaluated += 1
            hits += int(correct)
        report.top_k_accuracy = hits / evaluated if evaluated else None

    if any_corpus_truth and any_table_truth:
        truth_source = "mixed"
    elif any_corpus_truth:
        truth_source = "corpus-codes"
    else:
        truth_source = "mapping-table"
    return EvalRun(
        model_id=model_id,
        predictions=list(ordered),
        mapping_table_id=table.content_id,
        report=report,
        taxonomy_id=taxonomy.content_id,
        truth_source=truth_source,
        judge_failures=judge_failures,
        excluded_cases=excluded,
    )


def _provenance(runs: Sequence[EvalRun]) -> str:
    taxonomy_ids = sorted({run.taxonomy_id for run in runs})
    table_ids = sorted({run.mapping_table_id for run in runs})
    truth_sources = sorted({run.truth_source for run in runs})
    return (
        f"# hddx {__version__}\ttaxonomy={','.join(taxonomy_ids)}"
        f"\ttable={','.join(table_ids)}\ttruth={','.join(truth_sources)}"
    )


def emit_report(runs: Sequence[EvalRun], out_dir: str | Path) -> dict[str, Path]:
    """Write the main, per-level, per-chapter, and rank-shift tables.

    Output ordering is deterministic: the main table descends by HDF1 with
    ties broken by input order, as noted in the header.
    """
    if not runs:
        raise InputError("no runs to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provenance = _provenance(runs)
    paths: dict[str, Path] = {}

    have_topk = all(run.report.top_k_accuracy is not None for run in runs)
    deltas: dict[str, int] = {}
    shift_rows = []
    if have_topk:
        flat = [(run.model_id, float(run.report.top_k_accuracy or 0.0)) for run in runs]
        hier = [(run.model_id, run.report.macro_hdf1) for run in runs]
        shift_rows = rank_shift(flat, hier)
        deltas = {row.model_id: row.delta for row in shift_rows}

    main_path = out / "report.tsv"
    with open(main_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(provenance + "\n")
        handle.write("# ranks and row order: descending hdf1, ties broken by input order\n")
        handle.write("model_id\tcases\ttop5\thdp\thdr\thdf1\tchapter\tsection\tcategory\tsubcategory\tdelta_rank\n")
        ordered = sorted(runs, key=lambda run: -run.report.macro_hdf1)
        for run in ordered:
            r = run.report
            top5 = f"{r.top_k_accuracy:.4f}" if r.top_k_accuracy is not None else "-"
            delta = f"{deltas[run.model_id]:+d}" if have_topk else "-"
            levels = "\t".join(f"{r.per_level[level]:.4f}" for level in Level)
            handle.write(
                f"{run.model_id}\t{r.case_count}\t{top5}\t{r.macro_hdp:.4f}\t{r.macro_hdr:.4f}"
                f"\t{r.macro_hdf1:.4f}\t{levels}\t{delta}\n"
            )
    paths["report"] = main_path

    levels_path = out / "levels.tsv"
    with open(levels_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(provenance + "\n")
        handle.write("model_id\t" + "\t".join(level.name.lower() for level in Level) + "\n")
        for run in runs:
            values = "\t".join(f"{run.report.per_level[level]:.4f}" for level in Level)
            handle.write(f"{run.model_id}\t{values}\n")
    paths["levels"] = levels_path

    chapters_path = out / "chapters.tsv"
    with open(chapters_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(provenance + "\n")
        handle.write("model_id\tchapter\thdf1\tn\n")
        for run in runs:
            rows = sorted(run.report.per_chapter.items(), key=lambda item: (-item[1][1], item[0]))
            for chapter, (hdf1, n) in rows:
                handle.write(f"{run.model_id}\t{chapter}\t{hdf1:.4f}\t{n}\n")
    paths["chapters"] = chapters_path

    if have_topk:
        by_model = {run.model_id: run.report for run in runs}
        shift_path = out / "rankshift.tsv"
        with open(shift_path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(provenance + "\n")
            handle.write("model_id\ttop5\thdf1\tflat_rank\thier_rank\tdelta\n")
            for row in shift_rows:
                report = by_model[row.model_id]
                handle.write(
                    f"{row.model_id}\t{report.top_k_accuracy:.4f}\t{report.macro_hdf1:.4f}"
                    f"\t{row.flat_rank}\t{row.hier_rank}\t{row.delta:+d}\n"
                )
        paths["rankshift"] = shift_path
    return paths


def save_failures(failures: Sequence[PredictionFailure], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for failure in failures:
            handle.write(
                json.dumps(
                    {"case_id": failure.case_id, "model_id": failure.model_id, "reason": failure.reason},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )
