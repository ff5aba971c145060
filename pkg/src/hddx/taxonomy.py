"""ICD-10 taxonomy: loading, code normalization, and hierarchy queries.

The tree has four levels (chapter, section, category, subcategory); the
source file may skip the section tier. Codes deeper than the loaded file
(e.g. clinical-modification extensions) fold upward to the deepest node the
taxonomy contains instead of erroring.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputError, ParseError, StructuralError, UnresolvableCodeError

_STEM = r"[A-Z][0-9][0-9A-Z]"
_LEAF_RE = re.compile(rf"^{_STEM}(\.[0-9A-Z]{{1,4}})?$")
_RANGE_RE = re.compile(rf"^({_STEM})-({_STEM})$")


class Level(IntEnum):
    """Tree depth, coarse to fine. Comparisons follow that order."""

    CHAPTER = 0
    SECTION = 1
    CATEGORY = 2
    SUBCATEGORY = 3

    @classmethod
    def parse(cls, text: str) -> "Level":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise InputError(f"unknown level {text!r} (expected CHAPTER|SECTION|CATEGORY|SUBCATEGORY)") from None

    def __str__(self) -> str:
        return self.name


class Relation(str, Enum):
    """Finest level at which two codes' ancestor closures meet."""

    IDENTICAL = "identical"
    ANCESTOR_DESCENDANT = "ancestor-descendant"
    SAME_CATEGORY = "same-category"
    SAME_SECTION = "same-section"
    SAME_CHAPTER = "same-chapter"
    DISTANT = "distant"

    def __str__(self) -> str:
        return self.value


def normalize_code(raw: str) -> str:
    """Canonicalize raw code text: trim, uppercase, insert the dot in undotted
    leaf codes longer than three characters. Range codes pass through unchanged.
    """
    if raw is None:
        raise InputError("empty code")
    code = raw.strip().upper()
    if not code:
        raise InputError("empty code")
    if "-" in code:
        m = _RANGE_RE.match(code)
        if not m:
            raise InputError(f"not a code shape: {raw.strip()!r}")
        lo, hi = m.group(1), m.group(2)
        if lo > hi:
            raise InputError(f"range endpoints out of order: {code!r}")
        return code
    if "." not in code and len(code) > 3:
        code = code[:3] + "." + code[3:]
    if not _LEAF_RE.match(code):
        raise InputError(f"not a code shape: {raw.strip()!r}")
    return code


def _undot(code: str) -> str:
    return code.replace(".", "")


def _stem(code: str) -> str:
    """Three-character stem used for range membership checks."""
    return _undot(code)[:3]


def _in_range(stem: str, range_code: str) -> bool:
    lo, hi = range_code.split("-")
    return lo <= stem <= hi


@dataclass(frozen=True)
class TaxonomyNode:
    code: str
    title: str
    level: Level
    parent: str | None
    inclusion_terms: tuple[str, ...] = ()


class Taxonomy:
    """Immutable forest of ICD-10 nodes rooted at the chapters.

    Query operations are read-only and safe to call from concurrent workers.
    """

    def __init__(self, nodes: Iterable[TaxonomyNode]):
        self._nodes: dict[str, TaxonomyNode] = {}
        self._children: dict[str, list[str]] = {}
        for node in nodes:
            if node.code in self._nodes:
                raise StructuralError(f"duplicate code {node.code}")
            self._nodes[node.code] = node
        self._validate()
        for node in self._nodes.values():
            if node.parent is not None:
                self._children.setdefault(node.parent, []).append(node.code)
        self._chapters = tuple(n.code for n in self._nodes.values() if n.level == Level.CHAPTER)

    def _validate(self) -> None:
        for node in self._nodes.values():
            if node.level == Level.CHAPTER:
                if node.parent is not None:
                    raise StructuralError(f"chapter {node.code} must not have a parent")
                continue
            if node.parent is None:
                raise StructuralError(f"orphan node {node.code}: non-chapter node without a parent")
            parent = self._nodes.get(node.parent)
            if parent is None:
                raise StructuralError(f"orphan node {node.code}: parent {node.parent} is not defined")
            if parent.level >= node.level:
                raise StructuralError(
                    f"level inversion: {node.code} ({node.level}) lists {parent.code} ({parent.level}) as parent"
                )
        # Range containment: every code must sit inside each range-coded ancestor.
        for node in self._nodes.values():
            cur = node
            while cur.parent is not None:
                cur = self._nodes[cur.parent]
                if "-" not in cur.code:
                    continue
                if "-" in node.code:
                    lo, hi = node.code.split("-")
                    ok = _in_range(lo, cur.code) and _in_range(hi, cur.code)
                else:
                    ok = _in_range(_stem(node.code), cur.code)
                if not ok:
                    raise StructuralError(f"range violation: {node.code} outside ancestor range {cur.code}")

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, code: str) -> bool:
        return code in self._nodes

    def __iter__(self) -> Iterator[TaxonomyNode]:
        return iter(self._nodes.values())

    @property
    def chapters(self) -> tuple[str, ...]:
        return self._chapters

    @property
    def content_id(self) -> str:
        """Stable fingerprint of the loaded tree, used for report provenance."""
        h = hashlib.sha256()
        for node in self._nodes.values():
            rec = "\x1f".join([node.code, node.title, node.level.name, node.parent or "-", ";".join(node.inclusion_terms)])
            h.update(rec.encode("utf-8"))
            h.update(b"\x1e")
        return h.hexdigest()[:12]

    def node(self, code: str) -> TaxonomyNode:
        try:
            return self._nodes[code]
        except KeyError:
            raise UnresolvableCodeError(f"code {code!r} not in taxonomy") from None

    def children(self, code: str) -> tuple[str, ...]:
        return tuple(self._children.get(code, ()))

    def resolve(self, code: str) -> tuple[TaxonomyNode, bool]:
        """Find the node for `code`, or its nearest ancestor by truncating
        trailing subcode characters. Returns (node, exact).
        """
        norm = normalize_code(code)
        if norm in self._nodes:
            return self._nodes[norm], True
        if "-" in norm:
            raise UnresolvableCodeError(f"range code {norm!r} not in taxonomy")
        probe = norm
        while len(probe) > 3:
            probe = probe[:-1].rstrip(".")
            if probe in self._nodes:
                return self._nodes[probe], False
        raise UnresolvableCodeError(f"code {code.strip()!r} not in taxonomy (no prefix of {norm} is loaded)")

    def ancestors(self, code: str) -> list[str]:
        """Parent chain from immediate parent up to the chapter."""
        node, _ = self.resolve(code)
        chain: list[str] = []
        cur = node
        while cur.parent is not None:
            cur = self._nodes[cur.parent]
            chain.append(cur.code)
        return chain

    def closure(self, code: str) -> list[TaxonomyNode]:
        """Resolved node followed by its ancestors, fine to coarse."""
        node, _ = self.resolve(code)
        return [node] + [self._nodes[c] for c in self.ancestors(node.code)]

    def chapter_of(self, code: str) -> str:
        chain = self.closure(code)
        return chain[-1].code

    def at_level(self, code: str, level: Level) -> TaxonomyNode | None:
        """Ancestor of `code` at exactly `level` (or the nearest coarser node
        when the chain skips that tier). None when the code itself is already
        coarser than `level`.
        """
        chain = self.closure(code)
        if chain[0].level < level:
            return None
        for node in chain:
            if node.level <= level:
                return node
        return None

    def shared_ancestry(self, a: str, b: str) -> Relation:
        """Finest relation between two codes after self+ancestor expansion.

        Symmetric. Codes deeper than the taxonomy fold via `resolve`; a code
        that extends another textually (S32.000 vs S32.0) reports
        ancestor-descendant even when both fold to the same node.
        """
        na, _ = self.resolve(a)
        nb, _ = self.resolve(b)
        norm_a, norm_b = normalize_code(a), normalize_code(b)
        if na.code == nb.code:
            if norm_a == norm_b:
                return Relation.IDENTICAL
            ua, ub = _undot(norm_a), _undot(norm_b)
            if ua.startswith(ub) or ub.startswith(ua):
                return Relation.ANCESTOR_DESCENDANT
            return _meet_relation(na.level)
        set_a = {na.code, *self.ancestors(na.code)}
        set_b = {nb.code, *self.ancestors(nb.code)}
        if na.code in set_b or nb.code in set_a:
            return Relation.ANCESTOR_DESCENDANT
        common = set_a & set_b
        if not common:
            return Relation.DISTANT
        meet = max(common, key=lambda c: self._nodes[c].level)
        return _meet_relation(self._nodes[meet].level)


def _meet_relation(level: Level) -> Relation:
    if level >= Level.CATEGORY:
        return Relation.SAME_CATEGORY
    if level == Level.SECTION:
        return Relation.SAME_SECTION
    return Relation.SAME_CHAPTER


def load_taxonomy(source: str | Path, format: str = "canonical") -> Taxonomy:
    """Load and validate a taxonomy file.

    `canonical` is the tab-separated record format (code, level, parent, title,
    inclusion terms). `flat-order` accepts the widely distributed flat order
    layout and synthesizes chapter range nodes from built-in chapter metadata.
    """
    path = Path(source)
    if not path.exists():
        raise InputError(f"taxonomy file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if format == "canonical":
        nodes = _parse_canonical(text.splitlines())
    elif format == "flat-order":
        nodes = _parse_flat_order(text.splitlines())
    else:
        raise InputError(f"unknown taxonomy format {format!r} (expected canonical|flat-order)")
    if not nodes:
        raise ParseError(f"{path}: no nodes")
    return Taxonomy(nodes)


def _parse_canonical(lines: Iterable[str]) -> list[TaxonomyNode]:
    nodes: list[TaxonomyNode] = []
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) not in (4, 5):
            raise ParseError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        code_raw, level_raw, parent_raw, title = parts[:4]
        terms_raw = parts[4] if len(parts) == 5 else ""
        try:
            code = normalize_code(code_raw)
            level = Level.parse(level_raw)
            parent = None if parent_raw.strip() == "-" else normalize_code(parent_raw)
        except InputError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        title = title.strip()
        if not title:
            raise ParseError(f"line {lineno}: empty title")
        terms = tuple(t.strip() for t in terms_raw.split(";") if t.strip())
        nodes.append(TaxonomyNode(code=code, title=title, level=level, parent=parent, inclusion_terms=terms))
    return nodes


# Standard chapter ranges used to synthesize roots for flat order files,
# which list categories and subcategories only.
FLAT_ORDER_CHAPTERS: tuple[tuple[str, str], ...] = (
    ("A00-B99", "Certain infectious and parasitic diseases"),
    ("C00-D49", "Neoplasms"),
    ("D50-D89", "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism"),
    ("E00-E89", "Endocrine, nutritional and metabolic diseases"),
    ("F01-F99", "Mental, behavioral and neurodevelopmental disorders"),
    ("G00-G99", "Diseases of the nervous system"),
    ("H00-H59", "Diseases of the eye and adnexa"),
    ("H60-H95", "Diseases of the ear and mastoid process"),
    ("I00-I99", "Diseases of the circulatory system"),
    ("J00-J99", "Diseases of the respiratory system"),
    ("K00-K95", "Diseases of the digestive system"),
    ("L00-L99", "Diseases of the skin and subcutaneous tissue"),
    ("M00-M99", "Diseases of the musculoskeletal system and connective tissue"),
    ("N00-N99", "Diseases of the genitourinary system"),
    ("O00-O9A", "Pregnancy, childbirth and the puerperium"),
    ("P00-P96", "Certain conditions originating in the perinatal period"),
    ("Q00-Q99", "Congenital malformations, deformations and chromosomal abnormalities"),
    ("R00-R99", "Symptoms, signs and abnormal clinical and laboratory findings, not elsewhere classified"),
    ("S00-T88", "Injury, poisoning and certain other consequences of external causes"),
    ("U00-U85", "Codes for special purposes"),
    ("V00-Y99", "External causes of morbidity"),
    ("Z00-Z99", "Factors influencing health status and contact with health services"),
)


def _parse_flat_order(lines: Iterable[str]) -> list[TaxonomyNode]:
    """Parse `order_number code billable_flag title` rows. Categories hang
    directly under synthesized chapters; the section tier is skipped.
    """
    chapter_nodes = {
        rng: TaxonomyNode(code=rng, title=title, level=Level.CHAPTER, parent=None)
        for rng, title in FLAT_ORDER_CHAPTERS
    }
    used_chapters: dict[str, TaxonomyNode] = {}
    body: list[TaxonomyNode] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split(maxsplit=3)
        if len(parts) < 4:
            raise ParseError(f"line {lineno}: expected `order code flag title`, got {len(parts)} fields")
        _, code_raw, flag, title = parts
        if flag not in ("0", "1"):
            raise ParseError(f"line {lineno}: level marker must be 0 or 1, got {flag!r}")
        try:
            code = normalize_code(code_raw)
        except InputError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if code in seen:
            raise ParseError(f"line {lineno}: duplicate code {code} (first at line {seen[code]})")
        seen[code] = lineno
        stem = _stem(code)
        chapter = next((rng for rng, _ in FLAT_ORDER_CHAPTERS if _in_range(stem, rng)), None)
        if chapter is None:
            raise ParseError(f"line {lineno}: code {code} falls outside every known chapter range")
        used_chapters.setdefault(chapter, chapter_nodes[chapter])
        if len(_undot(code)) == 3:
            parent = chapter
            level = Level.CATEGORY
        else:
            # Deeper-than-four-level chains flatten to one subcategory tier
            # under the three-character category, which must be listed first.
            parent = stem
            if parent not in seen:
                raise ParseError(f"line {lineno}: category {parent} not listed before {code}")
            level = Level.SUBCATEGORY
        body.append(TaxonomyNode(code=code, title=title.strip(), level=level, parent=parent))
    ordered_chapters = [used_chapters[rng] for rng, _ in FLAT_ORDER_CHAPTERS if rng in used_chapters]
    return ordered_chapters + body
