import random

import pytest

from hddx.errors import InputError, ParseError, StructuralError, UnresolvableCodeError
from hddx.taxonomy import Level, Relation, load_taxonomy, normalize_code

from conftest import write_canonical


class TestNormalizeCode:
    def test_trims_and_uppercases(self):
        assert normalize_code(" j11.1 ") == "J11.1"

    def test_inserts_dot_after_third_character(self):
        assert normalize_code("J111") == "J11.1"
        assert normalize_code("S32000") == "S32.000"
        assert normalize_code("c3490") == "C34.90"

    def test_three_character_codes_unchanged(self):
        assert normalize_code("J11") == "J11"
        assert normalize_code("b20") == "B20"

    def test_range_codes_preserved(self):
        assert normalize_code(" a00-b99 ") == "A00-B99"
        assert normalize_code("I10-I1A") == "I10-I1A"

    def test_not_a_code_shape(self):
        with pytest.raises(InputError, match="not a code shape"):
            normalize_code("influenza")

    def test_empty_input(self):
        with pytest.raises(InputError):
            normalize_code("   ")

    def test_range_endpoints_out_of_order(self):
        with pytest.raises(InputError, match="out of order"):
            normalize_code("J18-J09")

    @pytest.mark.parametrize("bad", ["J", "11A", "J1", "J11..1", "J11.", "A00-", "-B99", "J 11"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(InputError):
            normalize_code(bad)


class TestLoad:
    def test_loads_mini_fixture(self, taxonomy):
        assert len(taxonomy) > 0
        assert "J00-J99" in taxonomy
        assert taxonomy.node("J00-J99").title == "Diseases of the Respiratory System"
        assert taxonomy.node("J00-J99").level == Level.CHAPTER
        assert "Chronic bronchitis NOS" in taxonomy.node("J42").inclusion_terms

    def test_empty_file_is_a_parse_error(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("# only a comment\n", encoding="utf-8")
        with pytest.raises(ParseError, match="no nodes"):
            load_taxonomy(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            load_taxonomy(tmp_path / "nope.tsv")

    def test_level_inversion(self, tmp_path):
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("J11.1", "SUBCATEGORY", "J00-J99", "Deep node"),
            ("J11", "CATEGORY", "J11.1", "Category under subcategory"),
        ]
        with pytest.raises(StructuralError, match="level inversion"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_orphan_parent(self, tmp_path):
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("J11", "CATEGORY", "J09-J18", "Parent never defined"),
        ]
        with pytest.raises(StructuralError, match="orphan"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_duplicate_code(self, tmp_path):
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("J11", "CATEGORY", "J00-J99", "First"),
            ("J11", "CATEGORY", "J00-J99", "Second"),
        ]
        with pytest.raises(StructuralError, match="duplicate"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_chapter_with_parent(self, tmp_path):
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("A00-B99", "CHAPTER", "J00-J99", "Infections"),
        ]
        with pytest.raises(StructuralError, match="must not have a parent"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_non_chapter_without_parent(self, tmp_path):
        records = [("J11", "CATEGORY", None, "No parent")]
        with pytest.raises(StructuralError, match="without a parent"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_range_containment_enforced(self, tmp_path):
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("J09-J18", "SECTION", "J00-J99", "Influenza and pneumonia"),
            ("J40", "CATEGORY", "J09-J18", "Outside the section range"),
        ]
        with pytest.raises(StructuralError, match="range violation"):
            load_taxonomy(write_canonical(records, tmp_path / "bad.tsv"))

    def test_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("J00-J99\tCHAPTER\t-\tRespiratory\nnot-enough-fields\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 2"):
            load_taxonomy(path)

    def test_unknown_format(self, taxonomy_path):
        with pytest.raises(InputError, match="unknown taxonomy format"):
            load_taxonomy(taxonomy_path, format="xml")


class TestFlatOrderLoad:
    def test_synthesizes_chapters_and_flattens_subtiers(self, tmp_path):
        path = tmp_path / "order.txt"
        path.write_text(
            "00001 A00 0 Cholera\n"
            "00002 A000 1 Cholera due to Vibrio cholerae 01, biovar cholerae\n"
            "00003 J42 1 Unspecified chronic bronchitis\n"
            "00004 S22 0 Fracture of rib(s), sternum and thoracic spine\n"
            "00005 S22000 1 Wedge compression fracture of unspecified thoracic vertebra\n",
            encoding="utf-8",
        )
        taxonomy = load_taxonomy(path, format="flat-order")
        assert set(taxonomy.chapters) == {"A00-B99", "J00-J99", "S00-T88"}
        assert taxonomy.node("A00").parent == "A00-B99"
        assert taxonomy.node("A00").level == Level.CATEGORY
        assert taxonomy.node("A00.0").parent == "A00"
        assert taxonomy.node("S22.000").parent == "S22"
        assert taxonomy.node("S22.000").level == Level.SUBCATEGORY
        assert taxonomy.ancestors("J42") == ["J00-J99"]

    def test_category_must_precede_subcategory(self, tmp_path):
        path = tmp_path / "order.txt"
        path.write_text("00001 A000 1 Cholera, unspecified\n", encoding="utf-8")
        with pytest.raises(ParseError, match="category A00 not listed"):
            load_taxonomy(path, format="flat-order")

    def test_bad_level_marker(self, tmp_path):
        path = tmp_path / "order.txt"
        path.write_text("00001 A00 9 Cholera\n", encoding="utf-8")
        with pytest.raises(ParseError, match="level marker"):
            load_taxonomy(path, format="flat-order")

    def test_code_between_chapter_ranges(self, tmp_path):
        # D4A sorts after D49 and before D50, so no standard chapter owns it.
        path = tmp_path / "order.txt"
        path.write_text("00001 D4A 0 Synthetic gap code\n", encoding="utf-8")
        with pytest.raises(ParseError, match="outside every known chapter"):
            load_taxonomy(path, format="flat-order")


class TestResolve:
    def test_exact_hit(self, taxonomy):
        node, exact = taxonomy.resolve("J11.1")
        assert node.code == "J11.1" and exact is True

    def test_truncation_fold(self, taxonomy):
        node, exact = taxonomy.resolve("C34.90")
        assert node.code == "C34.9" and exact is False

    def test_fold_through_multiple_characters(self, taxonomy):
        node, exact = taxonomy.resolve("S32.000")
        assert node.code == "S32.0" and exact is False

    def test_absent_subtree_is_unresolvable(self, taxonomy):
        with pytest.raises(UnresolvableCodeError):
            taxonomy.resolve("Z99.999")

    def test_absent_range_is_unresolvable(self, taxonomy):
        with pytest.raises(UnresolvableCodeError):
            taxonomy.resolve("E00-E89")

    def test_round_trip_every_loaded_node(self, taxonomy):
        for node in taxonomy:
            resolved, exact = taxonomy.resolve(normalize_code(node.code))
            assert resolved.code == node.code and exact is True


class TestAncestors:
    def test_subcategory_chain(self, taxonomy):
        assert taxonomy.ancestors("J11.1") == ["J11", "J09-J18", "J00-J99"]

    def test_chapter_has_no_ancestors(self, taxonomy):
        assert taxonomy.ancestors("J00-J99") == []

    def test_section_chain(self, taxonomy):
        assert taxonomy.ancestors("A15-A19") == ["A00-B99"]

    def test_every_chain_ends_at_a_chapter(self, taxonomy):
        for node in taxonomy:
            if node.level != Level.CHAPTER:
                chain = taxonomy.ancestors(node.code)
                assert chain[-1] in taxonomy.chapters
                levels = [taxonomy.node(c).level for c in chain]
                assert levels == sorted(levels, reverse=True)


class TestSharedAncestry:
    @pytest.mark.parametrize(
        "a,b,expected",
        [
            ("K70.1", "K70.0", Relation.SAME_CATEGORY),
            ("M50.2", "M50.0", Relation.SAME_CATEGORY),
            ("N14", "N17.0", Relation.SAME_CHAPTER),
            ("G47", "G47.9", Relation.ANCESTOR_DESCENDANT),
            ("S32.000", "S32.0", Relation.ANCESTOR_DESCENDANT),
            ("T67.6", "R53.83", Relation.DISTANT),
            ("J11", "J18", Relation.SAME_SECTION),
            ("J11.1", "J11", Relation.ANCESTOR_DESCENDANT),
        ],
    )
    def test_fixture_relations(self, taxonomy, a, b, expected):
        assert taxonomy.shared_ancestry(a, b) == expected

    def test_identity(self, taxonomy):
        for code in ["J11.1", "J11", "J09-J18", "J00-J99", "C34.90"]:
            assert taxonomy.shared_ancestry(code, code) == Relation.IDENTICAL

    def test_symmetry_over_samples(self, taxonomy):
        rng = random.Random(7)
        codes = [node.code for node in taxonomy]
        for _ in range(200):
            a, b = rng.choice(codes), rng.choice(codes)
            assert taxonomy.shared_ancestry(a, b) == taxonomy.shared_ancestry(b, a)

    def test_siblings_below_the_taxonomy_floor(self, taxonomy):
        # Both fold to C34.9; neither extends the other.
        assert taxonomy.shared_ancestry("C34.90", "C34.91") == Relation.SAME_CATEGORY

    def test_unresolvable_operand(self, taxonomy):
        with pytest.raises(UnresolvableCodeError):
            taxonomy.shared_ancestry("J11.1", "Z99")


class TestQueries:
    def test_chapter_of(self, taxonomy):
        assert taxonomy.chapter_of("J11.1") == "J00-J99"
        assert taxonomy.chapter_of("A00-B99") == "A00-B99"

    def test_children_are_consistent_with_parents(self, taxonomy):
        for node in taxonomy:
            for child in taxonomy.children(node.code):
                assert taxonomy.node(child).parent == node.code

    def test_at_level(self, taxonomy):
        assert taxonomy.at_level("J11.1", Level.CHAPTER).code == "J00-J99"
        assert taxonomy.at_level("J11.1", Level.SECTION).code == "J09-J18"
        assert taxonomy.at_level("J11.1", Level.CATEGORY).code == "J11"
        assert taxonomy.at_level("J11.1", Level.SUBCATEGORY).code == "J11.1"
        # Already coarser than the requested level.
        assert taxonomy.at_level("J00-J99", Level.CATEGORY) is None

    def test_at_level_lifts_past_a_skipped_tier(self, tmp_path):
        # Section skipped in the source file: projecting to it lands on the
        # nearest coarser node instead of erroring.
        records = [
            ("J00-J99", "CHAPTER", None, "Respiratory"),
            ("J11", "CATEGORY", "J00-J99", "Influenza"),
            ("J11.1", "SUBCATEGORY", "J11", "Influenza variant"),
        ]
        taxonomy = load_taxonomy(write_canonical(records, tmp_path / "skip.tsv"))
        assert taxonomy.at_level("J11.1", Level.SECTION).code == "J00-J99"
        assert taxonomy.ancestors("J11.1") == ["J11", "J00-J99"]

    def test_content_id_is_stable(self, taxonomy_path):
        a = load_taxonomy(taxonomy_path)
        b = load_taxonomy(taxonomy_path)
        assert a.content_id == b.content_id
