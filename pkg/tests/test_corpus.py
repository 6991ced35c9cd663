import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sti_atlas.corpus import (
    AffiliationMention,
    InvalidRange,
    MalformedPayload,
    Record,
    RecordKind,
    Source,
    dedupe,
    filter_records,
    normalize_doi,
    normalize_record,
    normalized_title,
    read_jsonl,
    record_from_dict,
    record_to_dict,
    write_jsonl,
)


class TestNormalizeRecord:
    def test_openalex_inverted_abstract_reconstructed(self):
        raw = {
            "id": "https://openalex.org/W1",
            "title": "Hello paper",
            "abstract_inverted_index": {"Hello": [0], "world": [1]},
            "publication_year": 2015,
        }
        record = normalize_record(raw, Source.OPENALEX)
        assert record.abstract_text == "Hello world"
        assert record.id == "W1"
        assert record.kind is RecordKind.PUBLICATION

    def test_openalex_missing_title_raises(self):
        with pytest.raises(MalformedPayload):
            normalize_record({"id": "https://openalex.org/W1"}, Source.OPENALEX)

    def test_openalex_doi_normalized(self):
        raw = {"id": "W2", "title": "t", "doi": "https://doi.org/10.1234/ABC"}
        assert normalize_record(raw, Source.OPENALEX).doi == "10.1234/abc"

    def test_openalex_affiliations_carry_country(self):
        raw = {
            "id": "W3",
            "title": "t",
            "authorships": [
                {"institutions": [{"display_name": "Aarhus University", "country_code": "DK"}]},
                {"institutions": [{"display_name": "MIT", "country_code": "US"}]},
            ],
        }
        record = normalize_record(raw, Source.OPENALEX)
        assert [(a.raw_name, a.country_code) for a in record.affiliations] == [
            ("Aarhus University", "DK"),
            ("MIT", "US"),
        ]

    def test_cordis_panel_code_maps_to_project(self):
        raw = {"project_id": "101", "title": "Robots", "objective": "Build robots", "panel": "PE6"}
        record = normalize_record(raw, Source.CORDIS)
        assert record.kind is RecordKind.PROJECT
        assert record.panel_label == "PE6"

    def test_openaire_conflicting_dates_keep_minimum_year(self):
        # Mirrors the dedupe rule: upload dates postdate acceptance, so the
        # earliest candidate wins.
        raw = {
            "id": "oai:1",
            "title": "t",
            "acceptance_dates": ["2018-03-01", "2016-07-01"],
        }
        assert normalize_record(raw, Source.OPENAIRE).year == 2016

    def test_missing_fields_stay_absent(self):
        record = normalize_record({"id": "W9", "title": "t"}, Source.OPENALEX)
        assert record.abstract_text is None
        assert record.year is None
        assert record.doi is None


class TestDedupe:
    def test_same_doi_min_year_survives(self, make_record):
        a = make_record(rec_id="a", doi="10.1/x", year=2016)
        b = make_record(rec_id="b", doi="10.1/x", year=2018, abstract="text")
        merged = dedupe([a, b])
        assert len(merged) == 1
        assert merged[0].year == 2016
        assert merged[0].id == "b"  # richer record survives

    def test_single_record_unchanged(self, make_record):
        record = make_record()
        assert dedupe([record]) == [record]

    def test_case_insensitive_title_merge_matches_pairwise_oracle(self, make_record):
        records = [
            make_record(rec_id="a", title="Sea Level Rise", year=2015),
            make_record(rec_id="b", title="sea level RISE", year=2017),
            make_record(rec_id="c", title="Another topic", year=2015),
            make_record(rec_id="d", title="Sea  level rise!", year=2014, abstract="x"),
        ]
        merged = dedupe(records)

        # Oracle: brute-force pairwise key comparison to count groups.
        def key(r):
            return r.doi if r.doi else (normalized_title(r.title), r.kind)

        groups = []
        for record in records:
            for group in groups:
                if key(group[0]) == key(record):
                    group.append(record)
                    break
            else:
                groups.append([record])
        assert len(merged) == len(groups) == 2

    def test_affiliation_union_by_raw_name(self, make_record):
        a = make_record(rec_id="a", doi="10.1/x", countries=("DK",))
        b = make_record(rec_id="b", doi="10.1/x", countries=("DE",))
        merged = dedupe([a, b])[0]
        assert {aff.raw_name for aff in merged.affiliations} == {"Org DK", "Org DE"}

    def test_different_kind_same_title_not_merged(self, make_record):
        pub = make_record(rec_id="a", title="Energy")
        proj = make_record(rec_id="b", title="Energy", kind=RecordKind.PROJECT)
        assert len(dedupe([pub, proj])) == 2

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["10.1/a", "10.2/b", None]),
                st.sampled_from(["Title One", "title one", "Other"]),
                st.integers(2010, 2020),
            ),
            max_size=10,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, rows):
        records = [
            Record(
                id=f"r{i}",
                source=Source.OPENAIRE,
                kind=RecordKind.PUBLICATION,
                title=title,
                year=year,
                doi=doi,
            )
            for i, (doi, title, year) in enumerate(rows)
        ]
        once = dedupe(records)
        assert dedupe(once) == once


class TestFilter:
    def test_multi_country_record_kept(self, make_record):
        record = make_record(countries=("DK", "DE"), year=2015)
        assert filter_records([record], "DK", (2014, 2019)) == [record]

    def test_year_below_range_dropped(self, make_record):
        record = make_record(year=2013)
        assert filter_records([record], "DK", (2014, 2019)) == []

    def test_boundary_years_inclusive(self, make_record):
        assert filter_records([make_record(year=2014)], "DK", (2014, 2019))
        assert filter_records([make_record(year=2019)], "DK", (2014, 2019))

    def test_wrong_country_dropped(self, make_record):
        record = make_record(countries=("SE",))
        assert filter_records([record], "DK", (2014, 2019)) == []

    def test_undated_kept_only_with_flag(self, make_record):
        record = make_record(year=None)
        assert filter_records([record], "DK", (2014, 2019), keep_undated=True) == [record]
        assert filter_records([record], "DK", (2014, 2019), keep_undated=False) == []

    def test_require_abstract(self, make_record):
        without = make_record(rec_id="a")
        with_abs = make_record(rec_id="b", abstract="An abstract")
        kept = filter_records([without, with_abs], "DK", (2014, 2019), require_abstract=True)
        assert kept == [with_abs]

    def test_invalid_range(self, make_record):
        with pytest.raises(InvalidRange):
            filter_records([make_record()], "DK", (2019, 2014))

    def test_subset_and_idempotent(self, make_record):
        records = [
            make_record(rec_id=f"r{i}", year=year, countries=countries)
            for i, (year, countries) in enumerate(
                [(2015, ("DK",)), (2013, ("DK",)), (2015, ("SE",)), (None, ("DK",))]
            )
        ]
        once = filter_records(records, "DK", (2014, 2019))
        assert set(r.id for r in once) <= set(r.id for r in records)
        assert filter_records(once, "DK", (2014, 2019)) == once


class TestValidation:
    def test_year_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            Record(id="x", source=Source.OPENALEX, kind=RecordKind.PUBLICATION, title="t", year=1542)

    def test_bad_doi_rejected(self):
        with pytest.raises(ValueError):
            Record(id="x", source=Source.OPENALEX, kind=RecordKind.PUBLICATION, title="t", doi="abc")

    def test_empty_id_rejected(self):
        with pytest.raises(ValueError):
            Record(id="", source=Source.OPENALEX, kind=RecordKind.PUBLICATION, title="t")

    def test_empty_affiliation_rejected(self):
        with pytest.raises(ValueError):
            AffiliationMention(raw_name="")

    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("https://doi.org/10.1234/x", "10.1234/x"),
            ("10.5555/Y", "10.5555/y"),
            ("not-a-doi", None),
            (None, None),
        ],
    )
    def test_normalize_doi(self, raw, expected):
        assert normalize_doi(raw) == expected


class TestJsonl:
    def test_absent_fields_omitted(self, make_record):
        record = make_record(abstract=None, doi=None, language=None)
        data = record_to_dict(record)
        assert "abstract_text" not in data
        assert "doi" not in data
        assert "language" not in data

    def test_round_trip(self, tmp_path, make_record):
        records = [
            make_record(rec_id="a", abstract="text", doi="10.1/z", language="en", panel="PE1"),
            make_record(rec_id="b", year=None, countries=()),
        ]
        path = tmp_path / "corpus.jsonl"
        write_jsonl(records, path)
        assert list(read_jsonl(path)) == records

    def test_round_trip_via_dict(self, make_record):
        record = make_record(abstract="a", doi="10.9/q", panel="LS3")
        assert record_from_dict(json.loads(json.dumps(record_to_dict(record)))) == record


class TestFilterAtTableScale:
    def test_openalex_scale_counts_preserved_exactly(self, make_record):
        def records():
            for i in range(191_399):
                yield make_record(rec_id=f"w{i}", year=2014 + i % 6)
            for i in range(500):  # non-Danish: must all drop
                yield make_record(rec_id=f"x{i}", countries=("DE",))
            for i in range(500):  # outside the year range: must all drop
                yield make_record(rec_id=f"y{i}", year=2013 if i % 2 else 2020)

        kept = filter_records(records(), "DK", (2014, 2019))
        assert len(kept) == 191_399
