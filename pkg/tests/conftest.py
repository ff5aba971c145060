import random
from pathlib import Path

import pytest

from hddx.taxonomy import Level, Taxonomy, TaxonomyNode, load_taxonomy

DATA_DIR = Path(__file__).parent / "data"
TAXONOMY_PATH = DATA_DIR / "taxonomy_mini.tsv"


@pytest.fixture(scope="session")
def taxonomy_path() -> Path:
    return TAXONOMY_PATH


@pytest.fixture(scope="session")
def taxonomy() -> Taxonomy:
    return load_taxonomy(TAXONOMY_PATH)


def make_synthetic_records(rng: random.Random, max_nodes: int = 200) -> list[tuple[str, str, str | None, str]]:
    """Random four-level tree as raw (code, level, parent, title) records.

    The records are the ground truth for the brute-force oracle, which walks
    the parent map directly instead of going through Taxonomy.
    """
    records: list[tuple[str, str, str | None, str]] = []
    letters = rng.sample("ACFGKPQ", rng.randint(3, 4))
    for letter in sorted(letters):
        chapter = f"{letter}00-{letter}99"
        records.append((chapter, "CHAPTER", None, f"Synthetic chapter {letter}"))
        section_count = rng.randint(2, 3)
        bounds = [0, 30, 60, 100][: section_count + 1]
        for s in range(section_count):
            lo, hi = bounds[s], bounds[s + 1] - 1
            section = f"{letter}{lo:02d}-{letter}{hi:02d}"
            records.append((section, "SECTION", chapter, f"Synthetic section {section}"))
            for c in sorted(rng.sample(range(lo, hi + 1), rng.randint(2, 4))):
                category = f"{letter}{c:02d}"
                records.append((category, "CATEGORY", section, f"Synthetic category {category}"))
                for d in range(rng.randint(0, 3)):
                    records.append((f"{category}.{d}", "SUBCATEGORY", category, f"Synthetic subcategory {category}.{d}"))
                if len(records) >= max_nodes - 8:
                    return records
    return records


def records_to_taxonomy(records) -> Taxonomy:
    return Taxonomy(
        TaxonomyNode(code=code, title=title, level=Level[level], parent=parent)
        for code, level, parent, title in records
    )


def write_canonical(records, path: Path) -> Path:
    lines = [f"{code}\t{level}\t{parent or '-'}\t{title}" for code, level, parent, title in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def synthetic_records():
    return make_synthetic_records(random.Random(20240817))


@pytest.fixture
def synthetic_taxonomy(synthetic_records):
    return records_to_taxonomy(synthetic_records)


# Published 22-model leaderboard: (model_id, top5, hdf1, expected rank delta).
LEADERBOARD = [
    ("Claude-Haiku-3.5", 0.7630, 0.3237, -3),
    ("Claude-Sonnet-3.7", 0.8360, 0.3380, -6),
    ("Claude-Sonnet-4", 0.8390, 0.3673, 0),
    ("Gemini-2.5-Flash-Lite", 0.7890, 0.3496, 2),
    ("Gemini-2.5-Flash", 0.8320, 0.3483, -2),
    ("GPT-4o-mini", 0.7240, 0.3276, 3),
    ("GPT-4o", 0.8040, 0.3499, 1),
    ("GPT-4.1-nano", 0.7660, 0.3213, -9),
    ("GPT-4.1-mini", 0.7590, 0.3232, -2),
    ("GPT-4.1", 0.8010, 0.3387, -2),
    ("GPT-5", 0.7830, 0.3448, 1),
    ("Phi-3.5-mini", 0.6550, 0.3187, 1),
    ("Gemma3-4B", 0.6080, 0.2891, 0),
    ("Gemma3-12B", 0.7180, 0.3075, -3),
    ("Gemma3-27B", 0.7460, 0.3225, -2),
    ("Qwen2.5-72B", 0.7420, 0.3299, 4),
    ("Qwen3-4B", 0.6720, 0.3291, 6),
    ("Qwen3-14B", 0.7750, 0.3367, 0),
    ("Qwen3-32B", 0.7630, 0.3300, 2),
    ("Qwen3-235B-A22B", 0.7770, 0.3215, -10),
    ("MedGemma-27B", 0.7650, 0.3310, 1),
    ("MediPhi", 0.6660, 0.3526, 18),
]
