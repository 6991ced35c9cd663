"""Canonical record model shared by every pipeline stage.

All four harvesters normalize into :class:`Record`; the JSONL encoding of
records (one per line, absent fields omitted) is the interchange contract
between stages.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

_DOI_PATTERN = re.compile(r"^10\.\S+$")
_DOI_RESOLVER = re.compile(r"^(?:https?://)?(?:dx\.)?doi\.org/", re.IGNORECASE)


class Source(str, Enum):
    OPENALEX = "OPENALEX"
    OPENAIRE = "OPENAIRE"
    CORDIS = "CORDIS"
    KOHESIO = "KOHESIO"


class RecordKind(str, Enum):
    PUBLICATION = "PUBLICATION"
    PROJECT = "PROJECT"


class MalformedPayload(ValueError):
    """Source payload lacks the fields needed to build a Record."""


class InvalidRange(ValueError):
    """Year range with lo > hi."""


def normalize_doi(raw: str | None) -> str | None:
    """Lowercase a DOI and strip any resolver prefix; None if not a DOI."""
    if not raw:
        return None
    doi = _DOI_RESOLVER.sub("", raw.strip()).lower()
    if not _DOI_PATTERN.match(doi):
        logger.debug("discarding malformed doi %r", raw)
        return None
    return doi


@dataclass(frozen=True)
class AffiliationMention:
    """An affiliation exactly as the source reports it, no reconciliation."""

    raw_name: str
    country_code: str | None = None
    source_org_id: str | None = None

    def __post_init__(self) -> None:
        if not self.raw_name:
            raise ValueError("affiliation raw_name must be nonempty")


@dataclass
class Record:
    """One publication or project in canonical form.

    Missing source fields stay ``None``; they are never defaulted to
    sentinel strings.
    """

    id: str
    source: Source
    kind: RecordKind
    title: str
    abstract_text: str | None = None
    year: int | None = None
    language: str | None = None
    doi: str | None = None
    affiliations: list[AffiliationMention] = field(default_factory=list)
    panel_label: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be nonempty")
        if self.year is not None and not 1900 <= self.year <= 2100:
            raise ValueError(f"record {self.id}: year {self.year} outside [1900, 2100]")
        if self.doi is not None and not _DOI_PATTERN.match(self.doi):
            raise ValueError(f"record {self.id}: doi {self.doi!r} lacks '10.' prefix")

    def text(self) -> str:
        """Title plus abstract, the text every matcher and embedder sees."""
        if self.abstract_text:
            return f"{self.title} {self.abstract_text}"
        return self.title


@dataclass
class Corpus:
    """Assembled records plus per-source harvest provenance."""

    records: list[Record] = field(default_factory=list)
    provenance: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[tuple[str, str]] = set()
        for record in self.records:
            key = (record.source.value, record.id)
            if key in seen:
                raise ValueError(f"duplicate (source, id) pair {key}")
            seen.add(key)

    def by_source(self, source: Source) -> list[Record]:
        return [r for r in self.records if r.source is source]


# --- normalization ---------------------------------------------------------


def _clean_year(value) -> int | None:
    try:
        year = int(value)
    except (TypeError, ValueError):
        return None
    return year if 1900 <= year <= 2100 else None


def _language_code(candidates: Iterable[str]) -> str | None:
    """First plausible ISO-639-1 code; sources disagree often enough that
    anything fancier is false precision."""
    for cand in candidates:
        code = (cand or "").strip().lower()
        if len(code) == 2 and code.isalpha():
            return code
    return None


def _normalize_openalex(raw: dict) -> Record:
    work_id = raw.get("id") or ""
    work_id = work_id.rsplit("/", 1)[-1] if work_id else ""
    title = raw.get("title") or raw.get("display_name") or ""
    if not work_id or not title:
        raise MalformedPayload("openalex work missing id or title")

    abstract = None
    inverted = raw.get("abstract_inverted_index")
    if inverted:
        from .harvest import reconstruct_abstract

        abstract = reconstruct_abstract(inverted) or None

    affiliations = []
    seen_orgs = set()
    for authorship in raw.get("authorships") or []:
        for inst in authorship.get("institutions") or []:
            name = inst.get("display_name")
            if not name or name in seen_orgs:
                continue
            seen_orgs.add(name)
            affiliations.append(
                AffiliationMention(
                    raw_name=name,
                    country_code=(inst.get("country_code") or None),
                    source_org_id=inst.get("id"),
                )
            )

    return Record(
        id=work_id,
        source=Source.OPENALEX,
        kind=RecordKind.PUBLICATION,
        title=title,
        abstract_text=abstract,
        year=_clean_year(raw.get("publication_year")),
        language=_language_code([raw.get("language") or ""]),
        doi=normalize_doi(raw.get("doi")),
        affiliations=affiliations,
    )


def _normalize_openaire(raw: dict) -> Record:
    rec_id = raw.get("id") or ""
    title = raw.get("title") or ""
    if not rec_id or not title:
        raise MalformedPayload("openaire result missing id or title")

    # Repositories re-stamp DateOfAcceptance on upload, so a record can carry
    # several dates; the earliest is the least wrong for trend counting.
    years = [y for y in (_clean_year(d[:4]) for d in raw.get("acceptance_dates") or []) if y]
    affiliations = []
    seen = set()
    for aff in raw.get("affiliations") or []:
        name = aff.get("name")
        if not name or name in seen:
            continue
        seen.add(name)
        affiliations.append(
            AffiliationMention(raw_name=name, country_code=aff.get("country") or None)
        )

    return Record(
        id=rec_id,
        source=Source.OPENAIRE,
        kind=RecordKind.PUBLICATION,
        title=title,
        abstract_text=raw.get("abstract") or None,
        year=min(years) if years else None,
        language=_language_code(raw.get("languages") or []),
        doi=normalize_doi(raw.get("doi")),
        affiliations=affiliations,
    )


def _normalize_cordis(raw: dict) -> Record:
    rec_id = (raw.get("project_id") or "").strip()
    title = (raw.get("title") or "").strip()
    if not rec_id or not title:
        raise MalformedPayload("cordis row missing project_id or title")

    participants = [p.strip() for p in (raw.get("participants") or "").split(";") if p.strip()]
    countries = [c.strip().upper() for c in (raw.get("participant_countries") or "").split(";")]
    affiliations = []
    for i, name in enumerate(participants):
        country = countries[i] if i < len(countries) and countries[i] else None
        affiliations.append(AffiliationMention(raw_name=name, country_code=country))

    objective = (raw.get("objective") or "").strip()
    panel = (raw.get("panel") or "").strip().upper() or None
    return Record(
        id=rec_id,
        source=Source.CORDIS,
        kind=RecordKind.PROJECT,
        title=title,
        abstract_text=objective or None,
        year=_clean_year(raw.get("start_year")),
        doi=None,
        affiliations=affiliations,
        panel_label=panel,
    )


def _normalize_kohesio(raw: dict) -> Record:
    rec_id = (raw.get("project_id") or "").strip()
    title = (raw.get("label") or "").strip()
    if not rec_id or not title:
        raise MalformedPayload("kohesio row missing project_id or label")

    affiliations = []
    beneficiary = (raw.get("beneficiary") or "").strip()
    if beneficiary:
        affiliations.append(
            AffiliationMention(
                raw_name=beneficiary,
                country_code=(raw.get("country") or "").strip().upper() or None,
            )
        )
    abstract = raw.get("description")
    return Record(
        id=rec_id,
        source=Source.KOHESIO,
        kind=RecordKind.PROJECT,
        title=title,
        abstract_text=(abstract or "").strip() or None,
        year=_clean_year(raw.get("year")),
        affiliations=affiliations,
    )


_NORMALIZERS = {
    Source.OPENALEX: _normalize_openalex,
    Source.OPENAIRE: _normalize_openaire,
    Source.CORDIS: _normalize_cordis,
    Source.KOHESIO: _normalize_kohesio,
}


def normalize_record(raw: dict, source: Source) -> Record:
    """Map a parsed source payload onto the canonical Record.

    Raises MalformedPayload when id or title is missing; callers skip the
    record and log the diagnostic.
    """
    return _NORMALIZERS[source](raw)


def normalize_records(raws: Iterable[dict], source: Source) -> list[Record]:
    """Normalize a batch, skipping malformed payloads with a logged diagnostic."""
    records = []
    skipped = 0
    for raw in raws:
        try:
            records.append(normalize_record(raw, source))
        except MalformedPayload as exc:
            skipped += 1
            logger.warning("skipping %s payload: %s", source.value, exc)
    if skipped:
        logger.info("skipped %d malformed %s payloads", skipped, source.value)
    return records


# --- deduplication ---------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def normalized_title(title: str) -> str:
    """Dedup fallback key: lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", title.lower()).split())


def _dedupe_key(record: Record):
    if record.doi:
        return ("doi", record.doi)
    return ("title", normalized_title(record.title), record.kind.value)


def _field_count(record: Record) -> int:
    present = sum(
        1
        for value in (
            record.abstract_text,
            record.year,
            record.language,
            record.doi,
            record.panel_label,
        )
        if value is not None
    )
    return present + (1 if record.affiliations else 0)


def dedupe(records: list[Record]) -> list[Record]:
    """Collapse records that share a DOI, or failing that a normalized title
    of the same kind.

    The survivor is the group member with the most populated fields (first
    wins on ties), its year lowered to the group minimum and its affiliations
    widened to the union by raw name.
    """
    groups: dict[tuple, list[Record]] = {}
    order: list[tuple] = []
    for record in records:
        key = _dedupe_key(record)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(record)

    survivors = []
    for key in order:
        group = groups[key]
        if len(group) == 1:
            survivors.append(group[0])
            continue
        best = group[0]
        for candidate in group[1:]:
            if _field_count(candidate) > _field_count(best):
                best = candidate
        years = [r.year for r in group if r.year is not None]
        merged_affiliations: list[AffiliationMention] = []
        seen_names: set[str] = set()
        for member in group:
            for aff in member.affiliations:
                if aff.raw_name not in seen_names:
                    seen_names.add(aff.raw_name)
                    merged_affiliations.append(aff)
        survivors.append(
            Record(
                id=best.id,
                source=best.source,
                kind=best.kind,
                title=best.title,
                abstract_text=best.abstract_text,
                year=min(years) if years else None,
                language=best.language,
                doi=best.doi,
                affiliations=merged_affiliations,
                panel_label=best.panel_label,
            )
        )
    return survivors


# --- perimeter filter ------------------------------------------------------


def filter_records(
    records: Iterable[Record],
    country: str,
    year_range: tuple[int, int],
    require_abstract: bool = False,
    keep_undated: bool = True,
) -> list[Record]:
    """Keep records with at least one affiliation in ``country`` and a year
    inside ``year_range`` (undated records pass iff ``keep_undated``)."""
    lo, hi = year_range
    if lo > hi:
        raise InvalidRange(f"year range lo {lo} > hi {hi}")
    country = country.upper()

    kept = []
    for record in records:
        if not any(a.country_code == country for a in record.affiliations):
            continue
        if record.year is None:
            if not keep_undated:
                continue
        elif not lo <= record.year <= hi:
            continue
        if require_abstract and not record.abstract_text:
            continue
        kept.append(record)
    return kept


# --- JSONL interchange -----------------------------------------------------


def record_to_dict(record: Record) -> dict:
    """JSON form with absent fields omitted, per the interchange contract."""
    out: dict = {
        "id": record.id,
        "source": record.source.value,
        "kind": record.kind.value,
        "title": record.title,
    }
    if record.abstract_text is not None:
        out["abstract_text"] = record.abstract_text
    if record.year is not None:
        out["year"] = record.year
    if record.language is not None:
        out["language"] = record.language
    if record.doi is not None:
        out["doi"] = record.doi
    if record.affiliations:
        affs = []
        for aff in record.affiliations:
            entry: dict = {"raw_name": aff.raw_name}
            if aff.country_code is not None:
                entry["country_code"] = aff.country_code
            if aff.source_org_id is not None:
                entry["source_org_id"] = aff.source_org_id
            affs.append(entry)
        out["affiliations"] = affs
    if record.panel_label is not None:
        out["panel_label"] = record.panel_label
    return out


def record_from_dict(data: dict) -> Record:
    return Record(
        id=data["id"],
        source=Source(data["source"]),
        kind=RecordKind(data["kind"]),
        title=data["title"],
        abstract_text=data.get("abstract_text"),
        year=data.get("year"),
        language=data.get("language"),
        doi=data.get("doi"),
        affiliations=[
            AffiliationMention(
                raw_name=a["raw_name"],
                country_code=a.get("country_code"),
                source_org_id=a.get("source_org_id"),
            )
            for a in data.get("affiliations", [])
        ],
        panel_label=data.get("panel_label"),
    )


def write_jsonl(records: Iterable[Record], path: str | Path) -> int:
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_dict(record), ensure_ascii=False, sort_keys=True))
            handle.write("\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> Iterator[Record]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield record_from_dict(json.loads(line))
