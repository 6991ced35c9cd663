"""Controlled-vocabulary compilation and term matching.

A term matches a token window when all of its tokens occur (in order, or in
any order when the term allows permutation) with at most ``max_gap``
intervening tokens between consecutive matched positions. Overlapping
matches of one term collapse to the leftmost-shortest span, so counts
measure distinct mentions rather than combinatorial blowups.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .corpus import Record

logger = logging.getLogger(__name__)

MAX_GAP_CAP = 10
DEFAULT_MAX_GAP = 2

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


class SchemaError(ValueError):
    """Vocabulary file deviates from the documented JSON schema."""


class EmptyVocabulary(ValueError):
    """Vocabulary compiled to zero usable terms."""


def tokenize(text: str) -> list[str]:
    """Unicode-lowercased word tokens; punctuation and hyphens split, digits stay."""
    return _TOKEN.findall(text.casefold())


@dataclass(frozen=True)
class Term:
    tokens: tuple[str, ...]
    allow_permutation: bool = False
    max_gap: int = DEFAULT_MAX_GAP

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("term needs at least one token")
        if not 0 <= self.max_gap <= MAX_GAP_CAP:
            raise ValueError(f"max_gap {self.max_gap} outside [0, {MAX_GAP_CAP}]")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Concept:
    label: str
    goal: int
    terms: tuple[Term, ...]
    target: str | None = None

    def __post_init__(self) -> None:
        if not self.terms:
            raise ValueError(f"concept {self.label!r} has no terms")
        if not 1 <= self.goal <= 17:
            raise ValueError(f"concept {self.label!r}: goal {self.goal} outside 1-17")


@dataclass
class CompiledVocabulary:
    """Concepts plus a token index so tagging only inspects plausible terms.

    Ordered terms are indexed under their first token; permutation terms
    under every token, because any of them can open a match.
    """

    concepts: list[Concept]
    token_index: dict[str, list[tuple[Concept, Term]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.token_index:
            for concept in self.concepts:
                for term in concept.terms:
                    entry_tokens = set(term.tokens) if term.allow_permutation else {term.tokens[0]}
                    for token in entry_tokens:
                        self.token_index.setdefault(token, []).append((concept, term))

    def candidates(self, tokens: Iterable[str]) -> list[tuple[Concept, Term]]:
        # First-occurrence token order keeps match output independent of the
        # process hash seed.
        seen_tokens: set[str] = set()
        seen_terms: set[int] = set()
        found = []
        for token in tokens:
            if token in seen_tokens:
                continue
            seen_tokens.add(token)
            for pair in self.token_index.get(token, ()):
                if id(pair[1]) not in seen_terms:
                    seen_terms.add(id(pair[1]))
                    found.append(pair)
        return found


def compile_vocabulary(source: str | Path | dict) -> CompiledVocabulary:
    """Load and compile the vocabulary JSON (schema under the module docs).

    Term tokens are re-run through :func:`tokenize` so file spellings like
    "Sea-Level" normalize exactly the way matched text does; duplicate terms
    within a concept compile once.
    """
    if isinstance(source, (str, Path)):
        with Path(source).open("r", encoding="utf-8") as handle:
            data = json.load(handle)
    else:
        data = source

    if not isinstance(data, dict) or not isinstance(data.get("goals"), list):
        raise SchemaError("vocabulary root must be an object with a 'goals' list")

    concepts: list[Concept] = []
    for goal_entry in data["goals"]:
        if not isinstance(goal_entry, dict) or "goal" not in goal_entry:
            raise SchemaError("each goals[] entry needs a 'goal' number")
        try:
            goal = int(goal_entry["goal"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"goal id {goal_entry['goal']!r} is not an integer") from exc
        for concept_entry in goal_entry.get("concepts", []):
            label = concept_entry.get("label")
            if not label:
                raise SchemaError(f"concept under goal {goal} lacks a label")
            terms: list[Term] = []
            seen: set[tuple] = set()
            for term_entry in concept_entry.get("terms", []):
                raw_tokens = term_entry.get("tokens")
                if not isinstance(raw_tokens, list) or not raw_tokens:
                    raise SchemaError(f"concept {label!r}: term without tokens")
                tokens = tuple(tokenize(" ".join(str(t) for t in raw_tokens)))
                if not tokens:
                    raise SchemaError(f"concept {label!r}: term tokens normalize to nothing")
                max_gap = int(term_entry.get("max_gap", DEFAULT_MAX_GAP))
                if not 0 <= max_gap <= MAX_GAP_CAP:
                    raise SchemaError(f"concept {label!r}: max_gap {max_gap} over cap {MAX_GAP_CAP}")
                permutation = bool(term_entry.get("allow_permutation", False))
                key = (tokens, permutation, max_gap)
                if key in seen:
                    continue
                seen.add(key)
                terms.append(Term(tokens=tokens, allow_permutation=permutation, max_gap=max_gap))
            if not terms:
                raise SchemaError(f"concept {label!r} has no terms")
            concepts.append(
                Concept(label=label, goal=goal, terms=tuple(terms), target=concept_entry.get("target"))
            )

    if not concepts:
        raise EmptyVocabulary("vocabulary contains no concepts")
    return CompiledVocabulary(concepts=concepts)


# --- matching ----------------------------------------------------------------


def _positions_by_token(tokens: list[str], wanted: set[str]) -> dict[str, list[int]]:
    positions: dict[str, list[int]] = {token: [] for token in wanted}
    for idx, token in enumerate(tokens):
        if token in wanted:
            positions[token].append(idx)
    return positions


def _min_end_ordered(term: Term, positions: dict[str, list[int]], start: int) -> int | None:
    """Smallest end position of an in-order match anchored at ``start``."""
    max_step = term.max_gap + 1

    def descend(token_idx: int, pos: int) -> int | None:
        if token_idx == len(term.tokens) - 1:
            return pos
        best = None
        for nxt in positions[term.tokens[token_idx + 1]]:
            if nxt <= pos:
                continue
            if nxt > pos + max_step:
                break
            candidate = descend(token_idx + 1, nxt)
            if candidate is not None and (best is None or candidate < best):
                best = candidate
        return best

    return descend(0, start)


@dataclass(frozen=True)
class Span:
    """Half-open [start, end) token offsets of one matched mention."""

    start: int
    end: int

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end


def match_term(term: Term, tokens: list[str]) -> list[Span]:
    """All non-overlapping mentions of ``term``, leftmost-shortest first."""
    wanted = set(term.tokens)
    positions = _positions_by_token(tokens, wanted)
    if any(not positions[token] for token in wanted):
        return []

    if term.allow_permutation:
        starts = sorted(pos for token_positions in positions.values() for pos in token_positions)
    else:
        starts = positions[term.tokens[0]]

    spans: list[Span] = []
    floor = 0
    for start in starts:
        if start < floor:
            continue
        if term.allow_permutation:
            end = _min_end_any_anchor(term, positions, tokens, start)
        else:
            end = _min_end_ordered(term, positions, start)
        if end is None:
            continue
        spans.append(Span(start, end + 1))
        floor = end + 1
    return spans


def _min_end_any_anchor(
    term: Term, positions: dict[str, list[int]], tokens: list[str], start: int
) -> int | None:
    n_tokens = len(term.tokens)
    full = (1 << n_tokens) - 1
    max_step = term.max_gap + 1
    memo: dict[tuple[int, int], int | None] = {}

    def descend(mask: int, pos: int) -> int | None:
        if mask == full:
            return pos
        key = (mask, pos)
        if key in memo:
            return memo[key]
        best = None
        for j in range(n_tokens):
            if mask & (1 << j):
                continue
            for nxt in positions[term.tokens[j]]:
                if nxt <= pos:
                    continue
                if nxt > pos + max_step:
                    break
                candidate = descend(mask | (1 << j), nxt)
                if candidate is not None and (best is None or candidate < best):
                    best = candidate
        memo[key] = best
        return best

    best = None
    anchor = tokens[start]
    for j in range(n_tokens):
        if term.tokens[j] != anchor:
            continue
        candidate = descend(1 << j, start)
        if candidate is not None and (best is None or candidate < best):
            best = candidate
    return best


# --- tagging ------------------------------------------------------------------


@dataclass(frozen=True)
class TermMatch:
    concept: str
    term: str
    field: str
    start: int
    end: int


@dataclass
class TagResult:
    record_id: str
    goals: set[int] = field(default_factory=set)
    matches: list[TermMatch] = field(default_factory=list)

    @property
    def tagged(self) -> bool:
        return bool(self.goals)


def tag_record(record: Record, vocabulary: CompiledVocabulary, min_hits: int = 1) -> TagResult:
    """Match title and abstract independently; goals are the union over
    matched concepts with at least ``min_hits`` mentions for that goal."""
    matches: list[TermMatch] = []
    hits_per_goal: dict[int, int] = {}

    fields = [("title", record.title or "")]
    if record.abstract_text:
        fields.append(("abstract", record.abstract_text))

    for field_name, text in fields:
        tokens = tokenize(text)
        if not tokens:
            continue
        for concept, term in vocabulary.candidates(tokens):
            for span in match_term(term, tokens):
                matches.append(
                    TermMatch(
                        concept=concept.label,
                        term=term.text,
                        field=field_name,
                        start=span.start,
                        end=span.end,
                    )
                )
                hits_per_goal[concept.goal] = hits_per_goal.get(concept.goal, 0) + 1

    goals = {goal for goal, hits in hits_per_goal.items() if hits >= min_hits}
    return TagResult(record_id=record.id, goals=goals, matches=matches)


def tag_corpus(
    records: Iterable[Record], vocabulary: CompiledVocabulary, min_hits: int = 1
) -> dict[str, TagResult]:
    """One TagResult per record, deterministic regardless of worker count."""
    return {record.id: tag_record(record, vocabulary, min_hits) for record in records}


# --- tag JSONL -----------------------------------------------------------------


def tag_to_dict(tag: TagResult) -> dict:
    return {
        "record_id": tag.record_id,
        "goals": sorted(tag.goals),
        "matches": [
            {
                "concept": m.concept,
                "term": m.term,
                "field": m.field,
                "start": m.start,
                "end": m.end,
            }
            for m in tag.matches
        ],
    }


def tag_from_dict(data: dict) -> TagResult:
    return TagResult(
        record_id=data["record_id"],
        goals=set(data.get("goals", [])),
        matches=[TermMatch(**m) for m in data.get("matches", [])],
    )


def write_tags_jsonl(tags: Mapping[str, TagResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for record_id in sorted(tags):
            handle.write(json.dumps(tag_to_dict(tags[record_id]), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def read_tags_jsonl(path: str | Path) -> dict[str, TagResult]:
    tags: dict[str, TagResult] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                tag = tag_from_dict(json.loads(line))
                tags[tag.record_id] = tag
    return tags
