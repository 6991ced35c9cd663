"""Clients and parsers for the four record sources.

OpenAlex and OpenAIRE are paged HTTP APIs with per-source quirks (inverted
abstracts, 10k result ceilings, XML payloads); CORDIS and Kohesio arrive as
local tabular files. Everything funnels into :mod:`sti_atlas.corpus`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .corpus import Record, Source, normalize_record, normalize_records

logger = logging.getLogger(__name__)

OPENALEX_WORKS_URL = "https://api.openalex.org/works"
OPENAIRE_SEARCH_URL = "https://api.openaire.eu/search/publications"

#: (url, params) -> (status code, body bytes); injectable for offline tests.
Transport = Callable[[str, dict], tuple[int, bytes]]


class PositionConflict(ValueError):
    """Two tokens of an inverted abstract claim the same position."""


class HttpError(RuntimeError):
    """Non-retryable HTTP status from a source API."""

    def __init__(self, status: int, url: str):
        super().__init__(f"HTTP {status} from {url}")
        self.status = status


class RetriesExhausted(RuntimeError):
    """Transient failures persisted past the retry budget."""


class SchemaDrift(RuntimeError):
    """Response envelope is missing fields the client depends on."""


class XmlSyntax(ValueError):
    """OpenAIRE response is not well-formed XML."""


class MissingColumn(ValueError):
    """Tabular input lacks a required header."""


# --- inverted abstracts ----------------------------------------------------


def reconstruct_abstract(inverted_index: dict[str, list[int]]) -> str:
    """Rebuild plain text from a token -> positions map.

    Positions are rank-ordered, so gaps in the sequence close up instead of
    leaving padding; nothing the index contains is lost.
    """
    placed: dict[int, str] = {}
    for token, positions in inverted_index.items():
        for pos in positions:
            if pos in placed:
                raise PositionConflict(
                    f"position {pos} claimed by both {placed[pos]!r} and {token!r}"
                )
            placed[pos] = token
    return " ".join(placed[pos] for pos in sorted(placed))


# --- OpenAIRE window planning ----------------------------------------------


@dataclass(frozen=True)
class DateWindow:
    """Inclusive date interval used to split queries under the 10k cap."""

    start: date
    end: date

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError(f"window start {self.start} after end {self.end}")

    @property
    def days(self) -> int:
        return (self.end - self.start).days + 1

    def halves(self) -> tuple["DateWindow", "DateWindow"]:
        mid = self.start + timedelta(days=(self.days // 2) - 1)
        return DateWindow(self.start, mid), DateWindow(mid + timedelta(days=1), self.end)


def plan_openaire_windows(
    window: DateWindow,
    count_oracle: Callable[[DateWindow], int],
    limit: int = 10_000,
) -> list[DateWindow]:
    """Bisect a date range until every sub-window returns fewer than ``limit``
    results.

    A single day at or over the limit is returned as-is with a warning;
    there is no finer split the API accepts.
    """
    if limit <= 0:
        raise ValueError("limit must be positive")
    if count_oracle(window) < limit:
        return [window]
    if window.days == 1:
        logger.warning(
            "window %s..%s holds >= %d records and cannot be split further",
            window.start,
            window.end,
            limit,
        )
        return [window]
    left, right = window.halves()
    return plan_openaire_windows(left, count_oracle, limit) + plan_openaire_windows(
        right, count_oracle, limit
    )


# --- paged fetching ---------------------------------------------------------


#: Documented per-request result ceilings.
PAGE_SIZE_LIMITS = {Source.OPENALEX: 200, Source.OPENAIRE: 10_000}


@dataclass
class PageRequest:
    endpoint: str
    filters: dict[str, str] = field(default_factory=dict)
    cursor_or_page: str = ""
    page_size: int = 200

    def __post_init__(self) -> None:
        if self.page_size <= 0:
            raise ValueError("page_size must be positive")


class RateLimiter:
    """Caps outbound requests per second across one client."""

    def __init__(self, max_per_second: float):
        self._interval = 1.0 / max_per_second if max_per_second > 0 else 0.0
        self._last = 0.0

    def wait(self) -> None:
        if self._interval <= 0:
            return
        now = time.monotonic()
        delay = self._last + self._interval - now
        if delay > 0:
            time.sleep(delay)
        self._last = time.monotonic()


def _requests_transport(url: str, params: dict) -> tuple[int, bytes]:
    import requests

    response = requests.get(url, params=params, timeout=60)
    return response.status_code, response.content


_RETRYABLE = {429, 500, 502, 503, 504}


class PagedClient:
    """Shared retry / rate-limit / cache machinery for both API sources."""

    def __init__(
        self,
        transport: Transport | None = None,
        cache_dir: str | Path | None = None,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        max_per_second: float = 10.0,
    ):
        self.transport = transport or _requests_transport
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.limiter = RateLimiter(max_per_second)
        self.retries = 0

    def _cache_path(self, source: Source, url: str, params: dict) -> Path | None:
        if self.cache_dir is None:
            return None
        key = json.dumps([url, sorted(params.items())], ensure_ascii=False)
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
        return self.cache_dir / source.value.lower() / f"{digest}.bin"

    def get(self, source: Source, url: str, params: dict) -> bytes:
        cache_path = self._cache_path(source, url, params)
        if cache_path is not None and cache_path.exists():
            return cache_path.read_bytes()

        body = self._get_with_retries(url, params)

        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(".tmp")
            tmp.write_bytes(body)
            os.replace(tmp, cache_path)
        return body

    def _get_with_retries(self, url: str, params: dict) -> bytes:
        for attempt in range(self.max_attempts):
            self.limiter.wait()
            try:
                status, body = self.transport(url, params)
            except (ConnectionError, TimeoutError, OSError) as exc:
                logger.warning("request to %s failed (%s), retrying", url, exc)
                status, body = None, b""
            if status is not None:
                if status == 200:
                    return body
                if status not in _RETRYABLE:
                    raise HttpError(status, url)
                logger.warning("HTTP %d from %s, retrying", status, url)
            if attempt < self.max_attempts - 1:
                self.retries += 1
                time.sleep(self.backoff_base * (2**attempt))
        raise RetriesExhausted(f"{url} still failing after {self.max_attempts} attempts")


def fetch_paged(
    request: PageRequest,
    source: Source,
    client: PagedClient | None = None,
) -> Iterator[dict]:
    """Yield every result payload of a query exactly once.

    OpenAlex pages with an opaque cursor; OpenAIRE with incrementing page
    numbers inside a date window carried in the filters.
    """
    client = client or PagedClient()
    limit = PAGE_SIZE_LIMITS.get(source)
    if limit is not None and request.page_size > limit:
        raise ValueError(f"{source.value} page_size {request.page_size} over the {limit} cap")
    if source is Source.OPENALEX:
        yield from _fetch_openalex(request, client)
    elif source is Source.OPENAIRE:
        yield from _fetch_openaire(request, client)
    else:
        raise ValueError(f"{source.value} is a file source, not a paged API")


def _fetch_openalex(request: PageRequest, client: PagedClient) -> Iterator[dict]:
    cursor = request.cursor_or_page or "*"
    while cursor:
        params = dict(request.filters)
        params["per-page"] = str(request.page_size)
        params["cursor"] = cursor
        body = client.get(Source.OPENALEX, request.endpoint, params)
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            raise SchemaDrift(f"openalex response is not JSON: {exc}") from exc
        if "results" not in payload or "meta" not in payload:
            raise SchemaDrift("openalex envelope missing 'results' or 'meta'")
        yield from payload["results"]
        cursor = payload["meta"].get("next_cursor")
        if not payload["results"]:
            break


def _fetch_openaire(request: PageRequest, client: PagedClient) -> Iterator[dict]:
    page = int(request.cursor_or_page or 1)
    while True:
        params = dict(request.filters)
        params["size"] = str(request.page_size)
        params["page"] = str(page)
        body = client.get(Source.OPENAIRE, request.endpoint, params)
        result = parse_openaire_xml(body)
        if not result.payloads:
            break
        yield from result.payloads
        page += 1


def openalex_filters(country: str, year_range: tuple[int, int]) -> dict[str, str]:
    """Country + publication-date filters in OpenAlex query syntax."""
    lo, hi = year_range
    return {
        "filter": (
            f"institutions.country_code:{country.lower()},"
            f"from_publication_date:{lo}-01-01,to_publication_date:{hi}-12-31"
        )
    }


def openaire_filters(country: str, window: DateWindow) -> dict[str, str]:
    return {
        "country": country.upper(),
        "fromDateAccepted": window.start.isoformat(),
        "toDateAccepted": window.end.isoformat(),
    }


# --- OpenAIRE XML ------------------------------------------------------------


@dataclass
class OpenaireParseResult:
    payloads: list[dict]
    skipped_missing_id: int = 0
    total: int | None = None


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1].lower()


def parse_openaire_xml(document: bytes | str) -> OpenaireParseResult:
    """Extract per-result payload dicts from an OpenAIRE XML response.

    Keeps every DateOfAcceptance and language occurrence it finds; the
    metadata is unreliable and the retention policy belongs downstream.
    Results without an identifier are skipped and counted.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise XmlSyntax(str(exc)) from exc

    total = None
    for el in root.iter():
        if _local(el.tag) == "total" and (el.text or "").strip().isdigit():
            total = int(el.text.strip())
            break

    payloads = []
    skipped = 0
    for result in (el for el in root.iter() if _local(el.tag) == "result"):
        payload = _parse_openaire_result(result)
        if payload is None:
            continue
        if not payload["id"]:
            skipped += 1
            continue
        payloads.append(payload)
    if skipped:
        logger.warning("skipped %d openaire results without identifiers", skipped)
    return OpenaireParseResult(payloads=payloads, skipped_missing_id=skipped, total=total)


def _parse_openaire_result(result: ET.Element) -> dict | None:
    rec_id = ""
    title = ""
    abstract = None
    doi = None
    dates: list[str] = []
    languages: list[str] = []
    affiliations: list[dict] = []

    for el in result.iter():
        tag = _local(el.tag)
        text = (el.text or "").strip()
        if tag == "objidentifier" and text and not rec_id:
            rec_id = text
        elif tag == "title" and text and not title:
            title = text
        elif tag == "description" and text and abstract is None:
            abstract = text
        elif tag == "dateofacceptance" and text:
            dates.append(text)
        elif tag == "language":
            code = el.get("classid") or text
            if code:
                languages.append(code)
        elif tag == "pid" and el.get("classid") == "doi" and text:
            doi = text
        elif tag == "rel":
            name = None
            country = None
            for sub in el.iter():
                sub_tag = _local(sub.tag)
                if sub_tag == "legalname" and (sub.text or "").strip():
                    name = sub.text.strip()
                elif sub_tag == "country":
                    country = sub.get("classid")
            if name:
                affiliations.append({"name": name, "country": country})

    # Nested <result> wrappers produce empty shells; only keep real entries.
    if not (rec_id or title or dates):
        return None
    return {
        "id": rec_id,
        "title": title,
        "abstract": abstract,
        "doi": doi,
        "acceptance_dates": dates,
        "languages": languages,
        "affiliations": affiliations,
    }


# --- CORDIS / Kohesio files ---------------------------------------------------

CORDIS_COLUMNS = {"project_id", "title", "objective", "panel", "participants", "participant_countries"}
KOHESIO_COLUMNS = {"project_id", "label", "description", "beneficiary", "country"}


def _check_columns(path: Path, header: Iterable[str], required: set[str]) -> None:
    missing = required - set(header)
    if missing:
        raise MissingColumn(f"{path} lacks columns: {', '.join(sorted(missing))}")


def ingest_cordis(path: str | Path) -> list[Record]:
    """One PROJECT record per CSV row; the panel column is populated only for
    ERC-funded projects and becomes the weak-supervision label."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        _check_columns(path, reader.fieldnames or [], CORDIS_COLUMNS)
        return normalize_records(reader, Source.CORDIS)


def ingest_kohesio(
    path: str | Path,
    min_description_words: int = 5,
    keep_keywords: Iterable[str] | None = None,
) -> list[Record]:
    """One PROJECT record per row of a Kohesio dump.

    Descriptions that merely repeat the title or fall under the word minimum
    are dropped to None so SDG matching never fires on titles masquerading
    as abstracts. ``keep_keywords`` is the R&D pre-filter hook: when given,
    only rows whose label or description mentions one of the keywords
    survive (the dump mixes research with general cohesion spending).
    """
    keywords = [k.casefold() for k in keep_keywords or []]
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        _check_columns(path, reader.fieldnames or [], KOHESIO_COLUMNS)
        rows = []
        for row in reader:
            description = (row.get("description") or "").strip()
            label = (row.get("label") or "").strip()
            if keywords:
                haystack = f"{label} {description}".casefold()
                if not any(keyword in haystack for keyword in keywords):
                    continue
            if description and (
                description.casefold() == label.casefold()
                or len(description.split()) < min_description_words
            ):
                row = dict(row)
                row["description"] = None
            rows.append(row)
    return normalize_records(rows, Source.KOHESIO)


# --- grant/publication linking ------------------------------------------------


@dataclass
class GrantLinkResult:
    pairs: list[tuple[str, Record]]
    dropped: int = 0


def link_grant_publications(
    grants: list[Record],
    publications: Iterable[dict],
    source: Source = Source.OPENALEX,
) -> GrantLinkResult:
    """Inner-join publication payloads onto grants via their award ids.

    Payloads are expected to carry the funder award ids under ``grants``
    (list of dicts with ``award_id`` or plain strings). Publications that
    reference no known grant are dropped and counted.
    """
    known = {grant.id for grant in grants}
    pairs: list[tuple[str, Record]] = []
    dropped = 0
    for payload in publications:
        award_ids = []
        for entry in payload.get("grants") or []:
            if isinstance(entry, dict):
                award = entry.get("award_id")
            else:
                award = entry
            if award:
                award_ids.append(str(award))
        matched = [award for award in award_ids if award in known]
        if not matched:
            dropped += 1
            continue
        record = normalize_record(payload, source)
        for award in matched:
            pairs.append((award, record))
    if dropped:
        logger.info("dropped %d publications referencing no known grant", dropped)
    return GrantLinkResult(pairs=pairs, dropped=dropped)
