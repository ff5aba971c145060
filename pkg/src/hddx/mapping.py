"""Free-text diagnosis to ICD-10 mapping.

Knowledge-base construction from titles and inclusion terms, exhaustive
cosine retrieval over a vector index, reranker-based final selection, and
the canonical mapping table applied uniformly to every model's output.
"""

from __future__ import annotations

import base64
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clients import ChatCompleter, Embedder, InferenceConfig, extract_json_object
from .errors import ClientError, InputError, ParseError
from .taxonomy import Relation, Taxonomy, normalize_code

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 15

RERANK_SYSTEM_PROMPT = (
    "You are a careful, deterministic assistant.\n"
    "Given one pathology/disease name and a list of candidate disease names,\n"
    "you must select exactly one item strictly from the given\n"
    "candidate list. Return JSON with a single key icd_name.\n"
    "Do not add any other keys."
)


def build_rerank_user_prompt(query: str, candidate_names: Sequence[str]) -> str:
    lines = [f"Patient pathology: {query}", ""]
    lines.append("Candidates (choose exactly one from these names):")
    lines.extend(f"{i}. {name}" for i, name in enumerate(candidate_names, 1))
    lines.append("")
    lines.append("Instruction: Pick the single best candidate by name only.")
    lines.append("Output JSON only.")
    return "\n".join(lines)


@dataclass(frozen=True)
class KnowledgeBaseEntry:
    surface_name: str
    code: str
    source: str  # primary-title | inclusion-term


def build_knowledge_base(taxonomy: Taxonomy) -> list[KnowledgeBaseEntry]:
    """One entry per (node title, code) plus one per (inclusion term, code),
    in file order, with duplicate (surface, code) pairs dropped.
    """
    seen: set[tuple[str, str]] = set()
    entries: list[KnowledgeBaseEntry] = []
    for node in taxonomy:
        surfaces = [(node.title, "primary-title")]
        surfaces.extend((term, "inclusion-term") for term in node.inclusion_terms)
        for surface, source in surfaces:
            key = (surface, node.code)
            if surface and key not in seen:
                seen.add(key)
                entries.append(KnowledgeBaseEntry(surface_name=surface, code=node.code, source=source))
    return entries


class VectorIndex:
    """Parallel arrays of knowledge-base entries and unit-norm float32 vectors."""

    def __init__(self, entries: Sequence[KnowledgeBaseEntry], vectors: np.ndarray, embedder_id: str):
        if len(entries) != vectors.shape[0]:
            raise InputError(f"{len(entries)} entries but {vectors.shape[0]} vectors")
        self.entries = list(entries)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.embedder_id = embedder_id

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if len(self.entries) else 0

    @property
    def content_id(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.embedder_id}\x1e{self.dim}\x1e{len(self)}".encode("utf-8"))
        for entry in self.entries:
            h.update(f"{entry.surface_name}\x1f{entry.code}\x1f{entry.source}".encode("utf-8"))
        h.update(self.vectors.astype("<f4").tobytes())
        return h.hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(f"dim={self.dim}\tembedder={self.embedder_id}\tcount={len(self)}\n")
            for entry, vector in zip(self.entries, self.vectors):
                blob = base64.b64encode(vector.astype("<f4").tobytes()).decode("ascii")
                handle.write(f"{entry.surface_name}\t{entry.code}\t{entry.source}\t{blob}\n")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ParseError(f"{path}: empty index file")
        header = dict(part.split("=", 1) for part in lines[0].split("\t") if "=" in part)
        try:
            dim = int(header["dim"])
            embedder_id = header["embedder"]
            count = int(header["count"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: bad index header: {exc}") from exc
        entries: list[KnowledgeBaseEntry] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            surface, code, source, blob = parts
            vector = np.frombuffer(base64.b64decode(blob), dtype="<f4")
            if vector.shape[0] != dim:
                raise ParseError(f"{path}: line {lineno}: vector has dim {vector.shape[0]}, header says {dim}")
            entries.append(KnowledgeBaseEntry(surface_name=surface, code=code, source=source))
            rows.append(vector)
        if len(entries) != count:
            raise ParseError(f"{path}: header count {count} but {len(entries)} rows")
        vectors = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
        return cls(entries, vectors, embedder_id)


def build_index(base: Sequence[KnowledgeBaseEntry], embedder: Embedder, batch_size: int = 64) -> VectorIndex:
    """Embed every surface name and assemble the index. Vectors are
    re-normalized at ingest so stored rows are unit length.
    """
    chunks: list[np.ndarray] = []
    dim: int | None = None
    for batch_no, start in enumerate(range(0, len(base), batch_size), 1):
        batch = [entry.surface_name for entry in base[start : start + batch_size]]
        try:
            matrix = np.asarray(embedder.embed(batch), dtype=np.float32)
        except Exception as exc:
            raise ClientError(f"embedding batch {batch_no} (entries {start}..{start + len(batch) - 1}) failed: {exc}") from exc
        if matrix.ndim != 2 or matrix.shape[0] != len(batch):
            raise ClientError(f"embedding batch {batch_no} returned shape {matrix.shape} for {len(batch)} texts")
        if dim is None:
            dim = int(matrix.shape[1])
        elif matrix.shape[1] != dim:
            raise ClientError(f"embedding batch {batch_no} has dimension {matrix.shape[1]}, expected {dim}")
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ClientError(f"embedding batch {batch_no} contains a zero vector")
        chunks.append(matrix / norms)
    vectors = np.vstack(chunks) if chunks else np.zeros((0, dim or 0), dtype=np.float32)
    return VectorIndex(list(base), vectors, embedder.identity)


@dataclass(frozen=True)
class Candidate:
    entry: KnowledgeBaseEntry
    similarity: float


@dataclass(frozen=True)
class CandidateList:
    query: str
    ranked: tuple[Candidate, ...]

    def names(self) -> list[str]:
        return [c.entry.surface_name for c in self.ranked]


def retrieve(index: VectorIndex, query: str, embedder: Embedder, k: int = DEFAULT_TOP_K) -> CandidateList:
    """Top-k entries by cosine similarity, ties broken by knowledge-base
    insertion order.
    """
    if len(index) == 0:
        raise InputError("cannot retrieve from an empty index")
    if not query or not query.strip():
        raise InputError("empty query")
    if k < 1:
        raise InputError(f"k must be positive, got {k}")
    if embedder.identity != index.embedder_id:
        raise InputError(
            f"embedder mismatch: index built with {index.embedder_id!r}, got {embedder.identity!r}"
        )
    q = np.asarray(embedder.embed([query]), dtype=np.float64)[0]
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise InputError(f"query {query!r} embeds to the zero vector")
    sims = index.vectors.astype(np.float64) @ (q / norm)
    order = np.argsort(-sims, kind="stable")[:k]
    ranked = tuple(
        Candidate(entry=index.entries[i], similarity=float(np.clip(sims[i], -1.0, 1.0))) for i in order
    )
    return CandidateList(query=query, ranked=ranked)


@dataclass(frozen=True)
class MappingEntry:
    free_text: str
    code: str
    method: str  # retrieval-only | reranked | fallback
    chosen_name: str
    candidates_snapshot: CandidateList | None = None


@dataclass(frozen=True)
class MappingFailure:
    free_text: str
    reason: str


def rerank(
    query: str,
    candidates: CandidateList,
    reranker: ChatCompleter,
    config: InferenceConfig | None = None,
) -> MappingEntry:
    """Select the best candidate by name via the reranker prompt.

    The reply must be a JSON object with the single key icd_name matching a
    candidate (exactly, then case-insensitively; the first-ranked entry
    bearing the name wins). One retry on parse or membership failure, then
    fall back to the rank-1 retrieval candidate. Transport errors propagate.
    """
    if not candidates.ranked:
        raise InputError(f"no candidates to rerank for {query!r}")
    config = config or InferenceConfig()
    user_prompt = build_rerank_user_prompt(query, candidates.names())
    for _ in range(2):
        reply = reranker.complete(RERANK_SYSTEM_PROMPT, user_prompt, config)
        try:
            payload = extract_json_object(reply)
        except ValueError:
            continue
        name = payload.get("icd_name")
        if not isinstance(name, str):
            continue
        match = _match_candidate(candidates, name)
        if match is not None:
            return MappingEntry(
                free_text=query,
                code=match.entry.code,
                method="reranked",
                chosen_name=match.entry.surface_name,
                candidates_snapshot=candidates,
            )
    top = candidates.ranked[0]
    logger.warning("reranker failed twice for %r; falling back to rank-1 candidate %r", query, top.entry.surface_name)
    return MappingEntry(
        free_text=query,
        code=top.entry.code,
        method="fallback",
        chosen_name=top.entry.surface_name,
        candidates_snapshot=candidates,
    )


def _match_candidate(candidates: CandidateList, name: str) -> Candidate | None:
    for cand in candidates.ranked:
        if cand.entry.surface_name == name:
            return cand
    folded = name.strip().casefold()
    for cand in candidates.ranked:
        if cand.entry.surface_name.strip().casefold() == folded:
            return cand
    return None


@dataclass
class MappingTable:
    """Canonical free-text -> code assignments, keyed by trimmed, case-folded
    text; original casing is preserved inside each entry.
    """

    rows: dict[str, MappingEntry] = field(default_factory=dict)
    taxonomy_id: str = ""
    index_id: str = ""

    @staticmethod
    def key_for(text: str) -> str:
        return text.strip().casefold()

    def lookup(self, text: str) -> MappingEntry | None:
        return self.rows.get(self.key_for(text))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def content_id(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.taxonomy_id}\x1e{self.index_id}".encode("utf-8"))
        for key in sorted(self.rows):
            entry = self.rows[key]
            h.update(f"{entry.free_text}\x1f{entry.code}\x1f{entry.method}\x1f{entry.chosen_name}".encode("utf-8"))
            h.update(b"\x1e")
        return h.hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(f"# taxonomy={self.taxonomy_id}\tindex={self.index_id}\n")
            for key in sorted(self.rows):
                entry = self.rows[key]
                handle.write(f"{entry.free_text}\t{entry.code}\t{entry.method}\t{entry.chosen_name}\n")

    @classmethod
    def load(cls, path: str | Path) -> "MappingTable":
        table = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                meta = dict(part.split("=", 1) for part in line[1:].strip().split("\t") if "=" in part)
                table.taxonomy_id = meta.get("taxonomy", table.taxonomy_id)
                table.index_id = meta.get("index", table.index_id)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            free_text, code, method, chosen_name = parts
            table.rows[cls.key_for(free_text)] = MappingEntry(
                free_text=free_text, code=code, method=method, chosen_name=chosen_name
            )
        return table


def map_diagnoses(
    unique_texts: Iterable[str],
    index: VectorIndex,
    embedder: Embedder,
    reranker: ChatCompleter | None = None,
    k: int = DEFAULT_TOP_K,
    jobs: int = 1,
    config: InferenceConfig | None = None,
    taxonomy_id: str = "",
) -> tuple[MappingTable, list[MappingFailure]]:
    """Map every unique text to a code: one row per text, rows independent of
    processing order. Texts whose client calls fail land in the failure list;
    the table carries all successes.

    Ordered chat scripts require jobs=1; keyed scripts and remote clients are
    safe with a worker pool.
    """
    originals: dict[str, str] = {}
    for text in unique_texts:
        trimmed = text.strip()
        if not trimmed:
            continue
        key = MappingTable.key_for(trimmed)
        if key not in originals or trimmed < originals[key]:
            originals[key] = trimmed
    items = sorted(originals.items())

    def map_one(item: tuple[str, str]) -> tuple[str, MappingEntry | MappingFailure]:
        key, text = item
        try:
            candidates = retrieve(index, text, embedder, k=k)
            if reranker is None:
                top = candidates.ranked[0]
                entry = MappingEntry(
                    free_text=text,
                    code=top.entry.code,
                    method="retrieval-only",
                    chosen_name=top.entry.surface_name,
                    candidates_snapshot=candidates,
                )
            else:
                entry = rerank(text, candidates, reranker, config)
            return key, entry
        except ClientError as exc:
            return key, MappingFailure(free_text=text, reason=str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(map_one, items))
    else:
        results = [map_one(item) for item in items]

    rows: dict[str, MappingEntry] = {}
    failures: list[MappingFailure] = []
    for key, outcome in results:
        if isinstance(outcome, MappingFailure):
            failures.append(outcome)
        else:
            rows[key] = outcome
    table = MappingTable(rows=dict(sorted(rows.items())), taxonomy_id=taxonomy_id, index_id=index.content_id)
    return table, failures


@dataclass
class MappingValidation:
    total: int
    top1_accuracy: float
    errors_by_relation: dict[str, int]
    retrieval_topk: dict[int, float] | None = None


def validate_mapping(
    table: MappingTable,
    gold: Sequence[tuple[str, str]],
    taxonomy: Taxonomy,
    ks: Sequence[int] = (1, 5, 15),
) -> MappingValidation:
    """Top-1 accuracy (exact code match after normalization) plus the
    shared-ancestry distribution of errors. When candidate snapshots are
    available on every row, also reports retrieval-only top-k accuracy.
    """
    if not gold:
        raise InputError("empty gold set")
    hits = 0
    errors: dict[str, int] = {}
    entries: list[tuple[MappingEntry, str]] = []
    for text, gold_code in gold:
        entry = table.lookup(text)
        if entry is None:
            raise InputError(f"gold text not present in mapping table: {text!r}")
        gold_norm = normalize_code(gold_code)
        entries.append((entry, gold_norm))
        if normalize_code(entry.code) == gold_norm:
            hits += 1
        else:
            relation = classify_mapping_error(entry.code, gold_code, taxonomy)
            errors[str(relation)] = errors.get(str(relation), 0) + 1
    retrieval_topk: dict[int, float] | None = None
    if all(entry.candidates_snapshot is not None for entry, _ in entries):
        retrieval_topk = {}
        for k in ks:
            found = 0
            for entry, gold_norm in entries:
                snapshot = entry.candidates_snapshot
                assert snapshot is not None
                codes = {normalize_code(c.entry.code) for c in snapshot.ranked[:k]}
                if gold_norm in codes:
                    found += 1
            retrieval_topk[k] = found / len(entries)
    return MappingValidation(
        total=len(gold),
        top1_accuracy=hits / len(gold),
        errors_by_relation=dict(sorted(errors.items())),
        retrieval_topk=retrieval_topk,
    )


def classify_mapping_error(pred: str, gold: str, taxonomy: Taxonomy) -> Relation:
    """Relation between a predicted and a gold code; identical means the
    prediction was not an error.
    """
    return taxonomy.shared_ancestry(pred, gold)


def load_gold(path: str | Path) -> list[tuple[str, str]]:
    """Read a tab-separated `free_text \\t gold_code` validation file."""
    gold: list[tuple[str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path}: line {lineno}: expected 2 fields, got {len(parts)}")
        gold.append((parts[0], parts[1]))
    return gold
