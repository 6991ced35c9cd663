import pytest

from sti_atlas.corpus import AffiliationMention, Record, RecordKind, Source


@pytest.fixture
def make_record():
    def factory(
        rec_id="r1",
        source=Source.OPENALEX,
        kind=RecordKind.PUBLICATION,
        title="A study of things",
        abstract=None,
        year=2015,
        language=None,
        doi=None,
        countries=("DK",),
        panel=None,
    ):
        return Record(
            id=rec_id,
            source=source,
            kind=kind,
            title=title,
            abstract_text=abstract,
            year=year,
            language=language,
            doi=doi,
            affiliations=[
                AffiliationMention(raw_name=f"Org {c}", country_code=c) for c in countries
            ],
            panel_label=panel,
        )

    return factory
