"""Hierarchical DDx scoring.

Per-case precision/recall over ancestor-augmented code sets, macro-averaged
with the F1 taken on the macro values (never a mean of per-case F1s), plus
level-projected and chapter-sliced decompositions, the flat top-k judge
protocol, and flat-vs-hierarchical rank shifts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .clients import ChatCompleter, InferenceConfig
from .errors import InputError, ParseError, ScriptError
from .taxonomy import Level, Taxonomy, normalize_code

JUDGE_PROMPT_TEMPLATE = (
    "Is our predicted diagnosis correct (y/n)?\n"
    "Predicted diagnosis: [diagnosis], True diagnosis: [label] Answer [y/n]."
)


def build_judge_prompt(diagnosis: str, label: str) -> str:
    return JUDGE_PROMPT_TEMPLATE.replace("[diagnosis]", diagnosis).replace("[label]", label)


@dataclass(frozen=True)
class DdxSet:
    """Ranked diagnosis codes; duplicates removed keeping the first occurrence."""

    codes: tuple[str, ...]

    @classmethod
    def of(cls, codes: Iterable[str]) -> "DdxSet":
        seen: set[str] = set()
        kept: list[str] = []
        for code in codes:
            norm = normalize_code(code)
            if norm not in seen:
                seen.add(norm)
                kept.append(norm)
        return cls(tuple(kept))

    def __len__(self) -> int:
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)


def _as_ddx(codes: "DdxSet | Iterable[str]") -> DdxSet:
    return codes if isinstance(codes, DdxSet) else DdxSet.of(codes)


def augment(taxonomy: Taxonomy, ddx: "DdxSet | Iterable[str]") -> frozenset[str]:
    """Union of each code's resolved node and all its ancestors up to the
    chapter. Codes finer than the taxonomy fold upward before expansion, so
    the result is closed under the ancestor relation by construction.
    """
    expanded: set[str] = set()
    for code in _as_ddx(ddx):
        node, _ = taxonomy.resolve(code)
        expanded.add(node.code)
        expanded.update(taxonomy.ancestors(node.code))
    return frozenset(expanded)


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    hdp: float
    hdr: float
    hdf1: float
    intersection_size: int
    pred_size: int
    truth_size: int


def harmonic_mean(p: float, r: float) -> float:
    return 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)


def score_case(
    truth: "DdxSet | Iterable[str]",
    pred: "DdxSet | Iterable[str]",
    taxonomy: Taxonomy,
    case_id: str = "",
) -> CaseScore:
    """Precision and recall of the augmented prediction set against the
    augmented ground truth, with the raw set sizes kept for audit.
    """
    truth_set = _as_ddx(truth)
    pred_set = _as_ddx(pred)
    if not len(truth_set) or not len(pred_set):
        raise InputError(f"case {case_id or '?'}: DDx sets must be non-empty")
    truth_aug = augment(taxonomy, truth_set)
    pred_aug = augment(taxonomy, pred_set)
    intersection = len(truth_aug & pred_aug)
    hdp = intersection / len(pred_aug)
    hdr = intersection / len(truth_aug)
    return CaseScore(
        case_id=case_id,
        hdp=hdp,
        hdr=hdr,
        hdf1=harmonic_mean(hdp, hdr),
        intersection_size=intersection,
        pred_size=len(pred_aug),
        truth_size=len(truth_aug),
    )


@dataclass
class MetricReport:
    model_id: str
    case_count: int
    macro_hdp: float
    macro_hdr: float
    macro_hdf1: float
    per_level: dict[Level, float] = field(default_factory=dict)
    per_chapter: dict[str, tuple[float, int]] = field(default_factory=dict)
    top_k_accuracy: float | None = None


def aggregate(cases: Sequence[CaseScore], model_id: str = "") -> MetricReport:
    """Macro-average per-case precision and recall, then take the harmonic
    mean of the two macros. Each case contributes equally.
    """
    if not cases:
        raise InputError("cannot aggregate zero cases")
    macro_hdp = sum(c.hdp for c in cases) / len(cases)
    macro_hdr = sum(c.hdr for c in cases) / len(cases)
    return MetricReport(
        model_id=model_id,
        case_count=len(cases),
        macro_hdp=macro_hdp,
        macro_hdr=macro_hdr,
        macro_hdf1=harmonic_mean(macro_hdp, macro_hdr),
    )


def project_codes(
    taxonomy: Taxonomy,
    codes: "DdxSet | Iterable[str]",
    level: Level,
    rule: str = "keep",
) -> frozenset[str]:
    """Replace each code by its ancestor at exactly `level`; duplicates
    collapse. Codes already coarser than `level` are kept unchanged under the
    `keep` rule and removed under `drop`.
    """
    if rule not in ("keep", "drop"):
        raise InputError(f"unknown projection rule {rule!r} (expected keep|drop)")
    projected: set[str] = set()
    for code in _as_ddx(codes):
        node = taxonomy.at_level(code, level)
        if node is not None:
            projected.add(node.code)
        elif rule == "keep":
            resolved, _ = taxonomy.resolve(code)
            projected.add(resolved.code)
    return frozenset(projected)


def level_projected_pr(
    truth: "DdxSet | Iterable[str]",
    pred: "DdxSet | Iterable[str]",
    level: Level,
    taxonomy: Taxonomy,
    rule: str = "keep",
) -> tuple[float, float]:
    """Plain set-overlap precision/recall on the level-projected sets (no
    further augmentation). A side emptied by the `drop` rule scores zero.
    """
    truth_set = _as_ddx(truth)
    pred_set = _as_ddx(pred)
    if not len(truth_set) or not len(pred_set):
        raise InputError("DDx sets must be non-empty")
    truth_proj = project_codes(taxonomy, truth_set, level, rule)
    pred_proj = project_codes(taxonomy, pred_set, level, rule)
    if not truth_proj or not pred_proj:
        return 0.0, 0.0
    intersection = len(truth_proj & pred_proj)
    return intersection / len(pred_proj), intersection / len(truth_proj)


def level_projected_score(
    truth: "DdxSet | Iterable[str]",
    pred: "DdxSet | Iterable[str]",
    level: Level,
    taxonomy: Taxonomy,
    rule: str = "keep",
) -> float:
    p, r = level_projected_pr(truth, pred, level, taxonomy, rule)
    return harmonic_mean(p, r)


@dataclass(frozen=True)
class ChapterSlice:
    chapter: str
    title: str
    hdf1: float
    n_diagnoses: int
    n_cases: int


def chapter_sliced_report(
    pairs: Sequence[tuple["DdxSet | Iterable[str]", "DdxSet | Iterable[str]"]],
    taxonomy: Taxonomy,
) -> list[ChapterSlice]:
    """Per-chapter scores: each case's ground truth is restricted to the
    chapter's diagnoses (cases with none are skipped), the full prediction
    set is kept, and the restricted cases are scored and macro-averaged.
    Rows are sorted by contributing ground-truth diagnosis count, descending.
    """
    per_chapter_pr: dict[str, list[tuple[float, float]]] = {}
    per_chapter_diagnoses: dict[str, int] = {}
    for truth, pred in pairs:
        truth_set = _as_ddx(truth)
        pred_set = _as_ddx(pred)
        by_chapter: dict[str, list[str]] = {}
        for code in truth_set:
            by_chapter.setdefault(taxonomy.chapter_of(code), []).append(code)
        for chapter, codes in by_chapter.items():
            score = score_case(DdxSet.of(codes), pred_set, taxonomy)
            per_chapter_pr.setdefault(chapter, []).append((score.hdp, score.hdr))
            per_chapter_diagnoses[chapter] = per_chapter_diagnoses.get(chapter, 0) + len(codes)
    slices = []
    for chapter, prs in per_chapter_pr.items():
        macro_p = sum(p for p, _ in prs) / len(prs)
        macro_r = sum(r for _, r in prs) / len(prs)
        slices.append(
            ChapterSlice(
                chapter=chapter,
                title=taxonomy.node(chapter).title,
                hdf1=harmonic_mean(macro_p, macro_r),
                n_diagnoses=per_chapter_diagnoses[chapter],
                n_cases=len(prs),
            )
        )
    slices.sort(key=lambda s: (-s.n_diagnoses, s.chapter))
    return slices


def flat_topk(
    pred_texts: Sequence[str],
    final_diagnosis: str,
    judge: ChatCompleter,
    k: int = 5,
    config: InferenceConfig | None = None,
) -> bool:
    """Judge each of the first k predictions against the final diagnosis.

    True iff any judge reply, lower-cased and trimmed, begins with "y".
    Transport errors propagate so the caller can mark the case unevaluated
    rather than wrong.
    """
    if not pred_texts:
        raise InputError("empty prediction list")
    if k < 1:
        raise InputError(f"k must be positive, got {k}")
    config = config or InferenceConfig(structured_output=False)
    for text in list(pred_texts)[:k]:
        reply = judge.complete("", build_judge_prompt(text, final_diagnosis), config)
        if reply.strip().lower().startswith("y"):
            return True
    return False


class EqualityJudge:
    """Offline judge replying "y" exactly when the two diagnosis strings in
    the prompt match after trimming and case-folding.
    """

    identity = "equality-judge"
    _PAIR_RE = re.compile(r"Predicted diagnosis: (.*?), True diagnosis: (.*) Answer \[y/n\]\.$", re.DOTALL)

    def complete(self, system: str, user: str, config: InferenceConfig) -> str:
        match = self._PAIR_RE.search(user)
        if match is None:
            raise ScriptError("judge prompt does not match the expected shape")
        diagnosis, label = match.group(1), match.group(2)
        return "y" if diagnosis.strip().casefold() == label.strip().casefold() else "n"


@dataclass(frozen=True)
class RankShiftRow:
    model_id: str
    flat_rank: int
    hier_rank: int
    delta: int  # flat_rank - hier_rank; positive means the model rose


def rank_shift(
    flat_scores: Sequence[tuple[str, float]],
    hier_scores: Sequence[tuple[str, float]],
) -> list[RankShiftRow]:
    """Rank models under both metrics (descending score, ties broken by input
    order) and report the per-model rank change.
    """
    flat_ids = [m for m, _ in flat_scores]
    hier_ids = [m for m, _ in hier_scores]
    if len(set(flat_ids)) != len(flat_ids) or len(set(hier_ids)) != len(hier_ids):
        raise InputError("duplicate model_id in rank-shift input")
    if set(flat_ids) != set(hier_ids):
        missing = set(flat_ids) ^ set(hier_ids)
        raise InputError(f"mismatched model sets in rank-shift input: {sorted(missing)}")

    def ranks(pairs: Sequence[tuple[str, float]]) -> dict[str, int]:
        order = sorted(range(len(pairs)), key=lambda i: -pairs[i][1])
        return {pairs[i][0]: rank for rank, i in enumerate(order, 1)}

    flat_rank = ranks(flat_scores)
    hier_rank = ranks(hier_scores)
    return [
        RankShiftRow(
            model_id=model,
            flat_rank=flat_rank[model],
            hier_rank=hier_rank[model],
            delta=flat_rank[model] - hier_rank[model],
        )
        for model in flat_ids
    ]


def save_case_scores(scores: Sequence[CaseScore], path: str | Path) -> None:
    """Write the line-delimited scored-case file."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for s in scores:
            handle.write(
                f"{s.case_id}\t{s.hdp:.6f}\t{s.hdr:.6f}\t{s.hdf1:.6f}"
                f"\t{s.intersection_size}\t{s.pred_size}\t{s.truth_size}\n"
            )


def load_case_scores(path: str | Path) -> list[CaseScore]:
    scores: list[CaseScore] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ParseError(f"{path}: line {lineno}: expected 7 fields, got {len(parts)}")
        scores.append(
            CaseScore(
                case_id=parts[0],
                hdp=float(parts[1]),
                hdr=float(parts[2]),
                hdf1=float(parts[3]),
                intersection_size=int(parts[4]),
                pred_size=int(parts[5]),
                truth_size=int(parts[6]),
            )
        )
    return scores
