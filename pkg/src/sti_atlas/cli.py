"""Pipeline entry point.

Stages communicate through files in the output directory (JSONL corpus,
EMB1 vectors, JSON models, CSV tables), so each one can be re-run from its
predecessors' outputs and the embedding provider can be swapped without
touching anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field as dataclass_field
from datetime import date, datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import analytics, harvest, panels, topics, vocab
from .corpus import Corpus, Source, dedupe, filter_records, normalize_records, read_jsonl, write_jsonl
from .embed import (
    EmbeddingProviderSpec,
    ProviderKind,
    load_embeddings,
    read_vectors,
)

logger = logging.getLogger(__name__)

STAGES = ["harvest", "tag", "embed", "topics", "panels", "report"]
CACHE_ENV = "STI_ATLAS_CACHE"


class ConfigError(ValueError):
    """Invalid pipeline configuration; the message names the field."""


@dataclass
class PipelineConfig:
    country: str
    year_range: tuple[int, int]
    out_dir: Path
    seed: int
    sources: list[str]
    live: bool
    openalex_files: list[Path]
    openaire_files: list[Path]
    cordis_csv: Path | None
    kohesio_csv: Path | None
    cache_dir: Path | None
    keep_undated: bool
    require_abstract: bool
    kohesio_min_description_words: int
    kohesio_keywords: list[str]
    vocab_path: Path | None
    min_hits: int
    embed_provider: str
    embed_dim: int
    embed_path: Path | None
    embed_command: str
    k: int
    sweep_ks: list[int]
    perplexity: float
    tsne_iterations: int
    percentile: float
    positive_cap: int
    negative_cap: int
    hyper: panels.TrainHyper
    top_n_affiliations: int
    raw: dict = dataclass_field(default_factory=dict)

    # stage artifact paths ---------------------------------------------------

    @property
    def corpus_path(self) -> Path:
        return self.out_dir / "corpus.jsonl"

    @property
    def links_path(self) -> Path:
        return self.out_dir / "grant_links.csv"

    @property
    def provenance_path(self) -> Path:
        return self.out_dir / "provenance.json"

    @property
    def tags_path(self) -> Path:
        return self.out_dir / "tags.jsonl"

    @property
    def vectors_path(self) -> Path:
        return self.out_dir / "vectors.emb1"

    @property
    def topic_model_path(self) -> Path:
        return self.out_dir / "topic_model.json"

    @property
    def projection_path(self) -> Path:
        return self.out_dir / "tsne_projection.csv"

    @property
    def classifiers_path(self) -> Path:
        return self.out_dir / "classifiers.json"

    @property
    def predictions_path(self) -> Path:
        return self.out_dir / "predictions.jsonl"

    @property
    def eval_path(self) -> Path:
        return self.out_dir / "panel_eval.json"

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"


def _require(table: dict, key: str, section: str, kind, default=None):
    if key not in table:
        if default is not None:
            return default
        raise ConfigError(f"{section}.{key}: required field is missing")
    value = table[key]
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def load_config(path: str | Path, out_override: str | None = None, seed_override: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with path.open("rb") as handle:
        try:
            data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc

    base = path.parent

    def resolve(raw: str | None) -> Path | None:
        if not raw:
            return None
        candidate = Path(raw)
        return candidate if candidate.is_absolute() else base / candidate

    pipeline = data.get("pipeline", {})
    if seed_override is not None:
        seed = seed_override
    elif "seed" in pipeline:
        seed = int(pipeline["seed"])
    else:
        raise ConfigError("pipeline.seed: required field is missing (seeds are always explicit)")

    year_start = _require(pipeline, "year_start", "pipeline", int)
    year_end = _require(pipeline, "year_end", "pipeline", int)
    if year_start > year_end:
        raise ConfigError(f"pipeline.year_start: {year_start} is after year_end {year_end}")

    out_dir = Path(out_override) if out_override else resolve(pipeline.get("out_dir"))
    if out_dir is None:
        raise ConfigError("pipeline.out_dir: required field is missing")

    harvest_cfg = data.get("harvest", {})
    sources = [str(s).lower() for s in harvest_cfg.get("sources", [])]
    known = {s.value.lower() for s in Source}
    for source in sources:
        if source not in known:
            raise ConfigError(f"harvest.sources: unknown source {source!r}")

    cache_dir = os.environ.get(CACHE_ENV) or harvest_cfg.get("cache_dir")

    vocab_cfg = data.get("vocab", {})
    embed_cfg = data.get("embed", {})
    topics_cfg = data.get("topics", {})
    panels_cfg = data.get("panels", {})
    report_cfg = data.get("report", {})

    provider = str(embed_cfg.get("provider", "fallback")).lower()
    if provider not in {"fallback", "file", "sidecar"}:
        raise ConfigError(f"embed.provider: unknown provider {provider!r}")

    config = PipelineConfig(
        country=_require(pipeline, "country", "pipeline", str).upper(),
        year_range=(year_start, year_end),
        out_dir=out_dir,
        seed=seed,
        sources=sources,
        live=bool(harvest_cfg.get("live", False)),
        openalex_files=[p for p in (resolve(f) for f in harvest_cfg.get("openalex_files", [])) if p],
        openaire_files=[p for p in (resolve(f) for f in harvest_cfg.get("openaire_files", [])) if p],
        cordis_csv=resolve(harvest_cfg.get("cordis_csv")),
        kohesio_csv=resolve(harvest_cfg.get("kohesio_csv")),
        cache_dir=resolve(cache_dir) if cache_dir else None,
        keep_undated=bool(harvest_cfg.get("keep_undated", True)),
        require_abstract=bool(harvest_cfg.get("require_abstract", False)),
        kohesio_min_description_words=int(harvest_cfg.get("min_description_words", 5)),
        kohesio_keywords=[str(k) for k in harvest_cfg.get("kohesio_keywords", [])],
        vocab_path=resolve(vocab_cfg.get("path")),
        min_hits=int(vocab_cfg.get("min_hits", 1)),
        embed_provider=provider,
        embed_dim=int(embed_cfg.get("dim", 256)),
        embed_path=resolve(embed_cfg.get("path")),
        embed_command=str(embed_cfg.get("command", "")),
        k=int(topics_cfg.get("k", topics.DEFAULT_K)),
        sweep_ks=[int(k) for k in topics_cfg.get("sweep_ks", [])],
        perplexity=float(topics_cfg.get("perplexity", 30.0)),
        tsne_iterations=int(topics_cfg.get("tsne_iterations", 500)),
        percentile=float(panels_cfg.get("percentile", panels.DEFAULT_THRESHOLD_PERCENTILE)),
        positive_cap=int(panels_cfg.get("positive_cap", panels.DEFAULT_POSITIVE_CAP)),
        negative_cap=int(panels_cfg.get("negative_cap", panels.DEFAULT_NEGATIVE_CAP)),
        hyper=panels.TrainHyper(
            epochs=int(panels_cfg.get("epochs", 60)),
            learning_rate=float(panels_cfg.get("learning_rate", 0.5)),
            l2=float(panels_cfg.get("l2", 1e-4)),
            batch_size=int(panels_cfg.get("batch_size", 64)),
            seed=seed,
        ),
        top_n_affiliations=int(report_cfg.get("top_n_affiliations", 10)),
        raw=data,
    )
    return config


def validate_for_stages(config: PipelineConfig, stages: list[str]) -> None:
    """Check that every input the requested stages reference actually exists."""
    problems: list[str] = []

    if "harvest" in stages and not config.live:
        for field_name, paths in (
            ("harvest.openalex_files", config.openalex_files),
            ("harvest.openaire_files", config.openaire_files),
        ):
            for p in paths:
                if not p.exists():
                    problems.append(f"{field_name}: {p} does not exist")
        if "cordis" in config.sources:
            if config.cordis_csv is None:
                problems.append("harvest.cordis_csv: required when 'cordis' is enabled")
            elif not config.cordis_csv.exists():
                problems.append(f"harvest.cordis_csv: {config.cordis_csv} does not exist")
        if "kohesio" in config.sources:
            if config.kohesio_csv is None:
                problems.append("harvest.kohesio_csv: required when 'kohesio' is enabled")
            elif not config.kohesio_csv.exists():
                problems.append(f"harvest.kohesio_csv: {config.kohesio_csv} does not exist")

    if "tag" in stages:
        if config.vocab_path is None:
            problems.append("vocab.path: required field is missing")
        elif not config.vocab_path.exists():
            problems.append(f"vocab.path: {config.vocab_path} does not exist")

    if "embed" in stages and config.embed_provider == "file":
        if config.embed_path is None:
            problems.append("embed.path: required when provider is 'file'")
        elif not config.embed_path.exists():
            problems.append(f"embed.path: {config.embed_path} does not exist")
    if "embed" in stages and config.embed_provider == "sidecar" and not config.embed_command:
        problems.append("embed.command: required when provider is 'sidecar'")

    if problems:
        raise ConfigError("; ".join(problems))


# --- stages ------------------------------------------------------------------------


def run_harvest(config: PipelineConfig) -> None:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    all_records = []
    provenance: dict[str, dict] = {}
    openalex_payloads: list[dict] = []

    for source_name in config.sources:
        source = Source(source_name.upper())
        if source is Source.OPENALEX:
            payloads, prov = _collect_openalex(config)
            openalex_payloads = payloads
            records = normalize_records(payloads, source)
            prov["raw_count"] = len(payloads)
        elif source is Source.OPENAIRE:
            payloads, prov = _collect_openaire(config)
            records = normalize_records(payloads, source)
            prov["raw_count"] = len(payloads)
        elif source is Source.CORDIS:
            records = harvest.ingest_cordis(config.cordis_csv)
            prov = {"inputs": [str(config.cordis_csv)], "raw_count": len(records)}
        else:
            records = harvest.ingest_kohesio(
                config.kohesio_csv,
                config.kohesio_min_description_words,
                keep_keywords=config.kohesio_keywords,
            )
            prov = {"inputs": [str(config.kohesio_csv)], "raw_count": len(records)}

        deduped = dedupe(records)
        kept = filter_records(
            deduped,
            config.country,
            config.year_range,
            require_abstract=config.require_abstract,
            keep_undated=config.keep_undated,
        )
        prov.update({"after_dedupe": len(deduped), "kept": len(kept)})
        provenance[source.value] = prov
        all_records.extend(kept)
        print(f"harvest: {source.value} raw={prov['raw_count']} kept={len(kept)}")

    corpus_obj = Corpus(records=all_records, provenance=provenance)
    write_jsonl(corpus_obj.records, config.corpus_path)

    grants = [r for r in all_records if r.source is Source.CORDIS and r.panel_label]
    link_result = harvest.link_grant_publications(grants, openalex_payloads)
    panel_by_grant = {g.id: g.panel_label for g in grants}
    corpus_ids = {r.id for r in all_records}
    with config.links_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["grant_id", "panel", "publication_id"])
        for grant_id, record in link_result.pairs:
            if record.id in corpus_ids:
                writer.writerow([grant_id, panel_by_grant[grant_id], record.id])

    config.provenance_path.write_text(
        json.dumps(provenance, sort_keys=True, indent=1), encoding="utf-8"
    )
    print(f"harvest: corpus={len(all_records)} grant_links={len(link_result.pairs)}")


def _collect_openalex(config: PipelineConfig) -> tuple[list[dict], dict]:
    payloads: list[dict] = []
    if config.live:
        client = harvest.PagedClient(cache_dir=config.cache_dir)
        filters = harvest.openalex_filters(config.country, config.year_range)
        request = harvest.PageRequest(endpoint=harvest.OPENALEX_WORKS_URL, filters=filters)
        payloads.extend(harvest.fetch_paged(request, Source.OPENALEX, client))
        return payloads, {
            "query": filters,
            "fetched_at": datetime.now(timezone.utc).isoformat(),
        }
    for path in config.openalex_files:
        data = json.loads(path.read_text(encoding="utf-8"))
        payloads.extend(data["results"] if isinstance(data, dict) else data)
    return payloads, {"inputs": [str(p) for p in config.openalex_files]}


def _collect_openaire(config: PipelineConfig) -> tuple[list[dict], dict]:
    payloads: list[dict] = []
    if config.live:
        client = harvest.PagedClient(cache_dir=config.cache_dir)
        lo, hi = config.year_range
        full_window = harvest.DateWindow(date(lo, 1, 1), date(hi, 12, 31))

        def count(window: harvest.DateWindow) -> int:
            params = harvest.openaire_filters(config.country, window)
            params["size"] = "1"
            params["page"] = "1"
            body = client.get(Source.OPENAIRE, harvest.OPENAIRE_SEARCH_URL, params)
            return harvest.parse_openaire_xml(body).total or 0

        windows = harvest.plan_openaire_windows(full_window, count)
        for window in windows:
            request = harvest.PageRequest(
                endpoint=harvest.OPENAIRE_SEARCH_URL,
                filters=harvest.openaire_filters(config.country, window),
            )
            payloads.extend(harvest.fetch_paged(request, Source.OPENAIRE, client))
        return payloads, {
            "query": {"country": config.country, "windows": len(windows)},
            "fetched_at": datetime.now(timezone.utc).isoformat(),
        }
    for path in config.openaire_files:
        payloads.extend(harvest.parse_openaire_xml(path.read_bytes()).payloads)
    return payloads, {"inputs": [str(p) for p in config.openaire_files]}


def run_tag(config: PipelineConfig) -> None:
    compiled = vocab.compile_vocabulary(config.vocab_path)
    records = list(read_jsonl(config.corpus_path))
    tags = vocab.tag_corpus(records, compiled, min_hits=config.min_hits)
    vocab.write_tags_jsonl(tags, config.tags_path)
    tagged = sum(1 for tag in tags.values() if tag.goals)
    print(f"tag: {tagged} of {len(records)} records matched the vocabulary")


def run_embed(config: PipelineConfig) -> None:
    records = list(read_jsonl(config.corpus_path))
    texts = [(record.id, record.text()) for record in records]
    if config.embed_provider == "file":
        spec = EmbeddingProviderSpec(ProviderKind.FILE, {"path": str(config.embed_path)})
    elif config.embed_provider == "sidecar":
        spec = EmbeddingProviderSpec(ProviderKind.SIDECAR, {"command": config.embed_command})
    else:
        spec = EmbeddingProviderSpec(
            ProviderKind.FALLBACK_HASH, {"dim": config.embed_dim, "seed": config.seed}
        )
    matrix = load_embeddings(spec, texts, config.vectors_path)
    missing = [rec_id for rec_id, _ in texts if rec_id not in matrix]
    if missing:
        raise RuntimeError(f"embedding provider left {len(missing)} corpus ids without vectors")
    print(f"embed: {len(matrix)} vectors of dim {matrix.dim} ({config.embed_provider})")


def run_topics(config: PipelineConfig) -> None:
    records = list(read_jsonl(config.corpus_path))
    tags = vocab.read_tags_jsonl(config.tags_path)
    matrix = read_vectors(config.vectors_path)

    tagged_ids = [r.id for r in records if tags.get(r.id) and tags[r.id].goals and r.id in matrix]
    if not tagged_ids:
        raise RuntimeError("no tagged records to cluster; run `tag` first or loosen the vocabulary")
    subset = matrix.subset(tagged_ids)

    if config.sweep_ks:
        sweep = topics.sweep_k(subset, config.sweep_ks, config.seed)
        print(sweep.table())

    model = topics.kmeans_fit(subset, config.k, config.seed)
    tagged_records = [r for r in records if r.id in model.assignments]
    model.label_candidates = topics.label_candidates(
        topics.records_by_topic(model, tagged_records)
    )
    model.to_json(config.topic_model_path)

    projection = topics.tsne_project(
        subset, config.perplexity, config.seed, config.tsne_iterations
    )
    topics.write_projection_csv(projection, model.assignments, config.projection_path)
    print(
        f"topics: k={model.k} wcss={model.wcss:.4f} dbcc_min={model.dbcc_min:.4f} "
        f"kl {projection.kl_initial:.4f}->{projection.kl_final:.4f}"
    )


def run_panels(config: PipelineConfig) -> None:
    records = list(read_jsonl(config.corpus_path))
    tags = vocab.read_tags_jsonl(config.tags_path)
    matrix = read_vectors(config.vectors_path)

    project_labels = {
        r.id: r.panel_label
        for r in records
        if r.source is Source.CORDIS and r.panel_label and r.id in matrix
    }
    centroids = panels.panel_centroids(matrix, project_labels, percentile=config.percentile)

    links = []
    with config.links_path.open("r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            if row["publication_id"] in matrix:
                links.append((row["panel"], row["publication_id"]))

    weak = panels.propagate_labels(matrix, centroids, links)
    training_sets = panels.build_training_sets(
        weak,
        candidates=sorted(weak),
        caps=(config.positive_cap, config.negative_cap),
        seed=config.seed,
    )
    classifiers = [
        panels.train_panel_classifier(ts, matrix, config.hyper) for ts in training_sets
    ]
    panels.write_classifiers(classifiers, config.classifiers_path)

    tagged_ids = [r.id for r in records if tags.get(r.id) and tags[r.id].goals]
    predictions = panels.predict_all(matrix, tagged_ids, classifiers)
    panels.write_predictions(predictions, config.predictions_path)

    project_predictions = panels.predict_all(matrix, sorted(project_labels), classifiers)
    report = panels.evaluate(project_predictions, project_labels)
    config.eval_path.write_text(
        json.dumps(
            {
                "per_panel": {
                    code: vars(metrics) for code, metrics in sorted(report.per_panel.items())
                },
                "macro": {
                    "precision": report.macro_precision,
                    "recall": report.macro_recall,
                    "f1": report.macro_f1,
                    "accuracy": report.macro_accuracy,
                },
            },
            sort_keys=True,
            indent=1,
        ),
        encoding="utf-8",
    )
    none_count = sum(1 for p in predictions.values() if not p)
    print(
        f"panels: weak-labelled {len(weak)} pubs, trained {len(classifiers)} classifiers, "
        f"predicted {len(predictions)} tagged docs ({none_count} NONE), "
        f"eval macro F1 {report.macro_f1:.3f}"
    )


def run_report(config: PipelineConfig) -> None:
    records = list(read_jsonl(config.corpus_path))
    tags = vocab.read_tags_jsonl(config.tags_path)
    predictions = panels.read_predictions(config.predictions_path)
    model = topics.TopicModel.from_json(config.topic_model_path)

    with config.projection_path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        next(reader)
        projection_rows = list(reader)

    share_table = analytics.sdg_share(records, tags)
    affiliations = analytics.top_affiliations(records, tags, n=config.top_n_affiliations)
    panel_counts = analytics.panel_source_counts(predictions, records)
    cooccurrence = analytics.topic_panel_cooccurrence(model.assignments, predictions)

    params = {
        "country": config.country,
        "year_start": config.year_range[0],
        "year_end": config.year_range[1],
        "seed": config.seed,
        "k": config.k,
        "perplexity": config.perplexity,
        "tsne_iterations": config.tsne_iterations,
        "percentile": config.percentile,
        "positive_cap": config.positive_cap,
        "negative_cap": config.negative_cap,
        "min_hits": config.min_hits,
        "embed_provider": config.embed_provider,
    }
    inputs = {
        "corpus": config.corpus_path,
        "tags": config.tags_path,
        "vectors": config.vectors_path,
        "topic_model": config.topic_model_path,
        "predictions": config.predictions_path,
    }
    written = analytics.emit_report(
        config.report_dir,
        share_table,
        affiliations,
        panel_counts,
        cooccurrence,
        projection_rows,
        model.label_candidates,
        inputs=inputs,
        params=params,
    )
    print(f"report: wrote {len(written)} files to {config.report_dir}")


_RUNNERS = {
    "harvest": run_harvest,
    "tag": run_tag,
    "embed": run_embed,
    "topics": run_topics,
    "panels": run_panels,
    "report": run_report,
}

_STAGE_IO = {
    "harvest": ("source files or APIs", "corpus.jsonl, grant_links.csv, provenance.json"),
    "tag": ("corpus.jsonl, vocabulary", "tags.jsonl"),
    "embed": ("corpus.jsonl", "vectors.emb1"),
    "topics": ("corpus.jsonl, tags.jsonl, vectors.emb1", "topic_model.json, tsne_projection.csv"),
    "panels": (
        "corpus.jsonl, tags.jsonl, vectors.emb1, grant_links.csv",
        "classifiers.json, predictions.jsonl, panel_eval.json",
    ),
    "report": ("all upstream artifacts", "report/ (6 CSVs + manifest.json)"),
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sti-atlas",
        description="Map research records to SDGs, topics, and ERC panels.",
    )
    parser.add_argument("stage", choices=STAGES + ["all"], help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="TOML pipeline configuration")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--seed", type=int, help="override every configured seed")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    stages = STAGES if args.stage == "all" else [args.stage]
    try:
        config = load_config(args.config, out_override=args.out, seed_override=args.seed)
        validate_for_stages(config, stages)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    if args.dry_run:
        print(f"plan (out_dir={config.out_dir}):")
        for stage in stages:
            inputs, outputs = _STAGE_IO[stage]
            print(f"  {stage}: {inputs} -> {outputs}")
        return 0

    try:
        for stage in stages:
            _RUNNERS[stage](config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
