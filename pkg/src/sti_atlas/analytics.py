"""Result tables and plot-data files.

Pure aggregations over the corpus, tags, topic assignments, and panel
predictions: SDG share per source, top affiliations (unreconciled, on
purpose), per-source panel counts, topic/panel co-occurrence, and the
report directory with its reproducibility manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Record, Source
from .panels import PANEL_CODES
from .vocab import TagResult

logger = logging.getLogger(__name__)

NONE_COLUMN = "NONE"

SOURCE_ORDER = [s.value for s in Source]


def round_half_up(value: float, decimals: int = 1) -> float:
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def _is_tagged(record_id: str, tags: Mapping[str, TagResult]) -> bool:
    tag = tags.get(record_id)
    return tag is not None and bool(tag.goals)


# --- SDG shares -----------------------------------------------------------------


@dataclass
class ShareRow:
    source: str
    total_records: int
    tagged_records: int
    share_percent: float


@dataclass
class ShareTable:
    rows: list[ShareRow]

    def by_source(self) -> dict[str, ShareRow]:
        return {row.source: row for row in self.rows}


def sdg_share(records: Iterable[Record], tags: Mapping[str, TagResult]) -> ShareTable:
    """Per-source record totals, tagged counts, and share rounded half-up to
    one decimal (recomputed from the counts, never cached)."""
    totals: dict[str, int] = {}
    tagged: dict[str, int] = {}
    for record in records:
        source = record.source.value
        totals[source] = totals.get(source, 0) + 1
        if _is_tagged(record.id, tags):
            tagged[source] = tagged.get(source, 0) + 1

    rows = []
    for source in SOURCE_ORDER:
        if source not in totals:
            continue
        total = totals[source]
        hit = tagged.get(source, 0)
        rows.append(
            ShareRow(
                source=source,
                total_records=total,
                tagged_records=hit,
                share_percent=round_half_up(100.0 * hit / total, 1),
            )
        )
    return ShareTable(rows=rows)


# --- affiliations ----------------------------------------------------------------


def top_affiliations(
    records: Iterable[Record], tags: Mapping[str, TagResult], n: int = 10
) -> dict[str, list[tuple[str, int]]]:
    """Tagged-record counts per raw affiliation name, per source, descending
    with alphabetical tie-break.

    Names are deliberately left as reported: the same actor surfaces under
    several variants and the tables show that gap rather than hide it.
    """
    counts: dict[str, dict[str, int]] = {}
    for record in records:
        if not _is_tagged(record.id, tags):
            continue
        per_source = counts.setdefault(record.source.value, {})
        for affiliation in record.affiliations:
            per_source[affiliation.raw_name] = per_source.get(affiliation.raw_name, 0) + 1

    ranked: dict[str, list[tuple[str, int]]] = {}
    for source in SOURCE_ORDER:
        per_source = counts.get(source, {})
        ordered = sorted(per_source.items(), key=lambda item: (-item[1], item[0]))
        if ordered:
            ranked[source] = ordered[:n]
    return ranked


# --- panel counts ------------------------------------------------------------------


def panel_source_counts(
    predictions: Mapping[str, set[str]],
    records: Iterable[Record],
    panels: Sequence[str] = PANEL_CODES,
) -> dict[str, dict[str, int]]:
    """Documents per source and panel; a document with m panels counts once
    in each (multiple counting), and zero panels lands in the NONE column."""
    columns = list(panels) + [NONE_COLUMN]
    table: dict[str, dict[str, int]] = {}
    for record in records:
        if record.id not in predictions:
            continue
        row = table.setdefault(record.source.value, {column: 0 for column in columns})
        assigned = predictions[record.id]
        if assigned:
            for panel in assigned:
                row[panel] += 1
        else:
            row[NONE_COLUMN] += 1
    return table


# --- topic/panel co-occurrence -------------------------------------------------------


@dataclass
class CooccurrenceMatrix:
    topics: list[int]
    columns: list[str]
    counts: list[list[int]]

    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def cell(self, topic: int, column: str) -> int:
        return self.counts[self.topics.index(topic)][self.columns.index(column)]


def topic_panel_cooccurrence(
    assignments: Mapping[str, int],
    predictions: Mapping[str, set[str]],
    panels: Sequence[str] = PANEL_CODES,
) -> CooccurrenceMatrix:
    """Cell (t, p) counts documents of topic t predicted into panel p; the
    NONE column keeps documents no classifier accepted visible."""
    topics = sorted(set(assignments.values()))
    columns = list(panels) + [NONE_COLUMN]
    index = {topic: i for i, topic in enumerate(topics)}
    counts = [[0] * len(columns) for _ in topics]
    column_index = {column: j for j, column in enumerate(columns)}

    for rec_id, topic in assignments.items():
        row = counts[index[topic]]
        assigned = predictions.get(rec_id, set())
        if assigned:
            for panel in assigned:
                row[column_index[panel]] += 1
        else:
            row[column_index[NONE_COLUMN]] += 1
    return CooccurrenceMatrix(topics=topics, columns=columns, counts=counts)


# --- report emission -------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(
    out_dir: str | Path,
    share_table: ShareTable,
    affiliations: Mapping[str, list[tuple[str, int]]],
    panel_counts: Mapping[str, Mapping[str, int]],
    cooccurrence: CooccurrenceMatrix,
    projection_rows: Iterable[Sequence],
    topic_labels: Sequence[Sequence[tuple[str, int]]],
    inputs: Mapping[str, str | Path],
    params: Mapping[str, object],
) -> list[Path]:
    """Write the six report CSVs plus a manifest hashing every input.

    Reruns over identical inputs and params produce byte-identical files;
    nothing here reads the clock.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    shares_path = out_dir / "sdg_shares.csv"
    _write_csv(
        shares_path,
        ["source", "total_records", "tagged_records", "share_percent"],
        [
            (row.source, row.total_records, row.tagged_records, f"{row.share_percent:.1f}")
            for row in share_table.rows
        ],
    )
    written.append(shares_path)

    affiliations_path = out_dir / "top_affiliations.csv"
    _write_csv(
        affiliations_path,
        ["source", "rank", "affiliation", "tagged_records"],
        [
            (source, rank, name, count)
            for source in affiliations
            for rank, (name, count) in enumerate(affiliations[source], start=1)
        ],
    )
    written.append(affiliations_path)

    panel_counts_path = out_dir / "panel_source_counts.csv"
    columns = list(PANEL_CODES) + [NONE_COLUMN]
    _write_csv(
        panel_counts_path,
        ["source"] + columns,
        [
            [source] + [panel_counts[source].get(column, 0) for column in columns]
            for source in sorted(panel_counts)
        ],
    )
    written.append(panel_counts_path)

    cooccurrence_path = out_dir / "topic_panel_cooccurrence.csv"
    _write_csv(
        cooccurrence_path,
        ["topic"] + list(cooccurrence.columns),
        [[topic] + row for topic, row in zip(cooccurrence.topics, cooccurrence.counts)],
    )
    written.append(cooccurrence_path)

    scatter_path = out_dir / "tsne_scatter.csv"
    _write_csv(scatter_path, ["id", "x", "y", "topic"], projection_rows)
    written.append(scatter_path)

    labels_path = out_dir / "topic_label_candidates.csv"
    _write_csv(
        labels_path,
        ["topic", "rank", "term", "frequency"],
        [
            (topic, rank, term, freq)
            for topic, candidates in enumerate(topic_labels)
            for rank, (term, freq) in enumerate(candidates, start=1)
        ],
    )
    written.append(labels_path)

    manifest = {
        "inputs": {name: _sha256(Path(path)) for name, path in sorted(inputs.items())},
        "params": dict(sorted(params.items())),
        "versions": {"sti_atlas": _package_version()},
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    written.append(manifest_path)
    return written


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("sti-atlas")
    except Exception:
        return "unknown"
