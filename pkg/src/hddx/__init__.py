"""Hierarchical evaluation toolkit for differential-diagnosis outputs.

Maps free-text diagnoses to ICD-10 codes via retrieval plus reranking and
scores predicted DDx sets against ground truth with taxonomy-aware
hierarchical precision/recall/F1, level and chapter decompositions, flat
top-k judging, and rank-shift reporting.
"""

__version__ = "0.1.0"

from .taxonomy import Level, Relation, Taxonomy, TaxonomyNode, load_taxonomy, normalize_code  # noqa: F401
