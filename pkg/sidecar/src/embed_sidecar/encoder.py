"""Transformer inference into EMB1 vector files.

Loads a pretrained encoder (a HF model id or a local directory), encodes
each input text with CLS pooling in eval mode, and streams the vectors into
the EMB1 binary format the pipeline reads. No fine-tuning happens here.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

EMB1_MAGIC = b"EMB1"

DEFAULT_MODEL = "allenai/specter"


class ModelLoad(RuntimeError):
    """The encoder model or tokenizer could not be loaded."""


@dataclass
class SidecarJob:
    input_path: Path
    output_path: Path
    model_id: str = DEFAULT_MODEL
    batch_size: int = 32
    separator: str | None = None  # joins title+abstract; None = the model's sep token

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class JobStats:
    encoded: int
    skipped: int
    dim: int


def read_job_lines(path: Path, separator: str) -> tuple[list[tuple[str, str]], int]:
    """Parse the input JSONL into (id, text) pairs.

    A line may carry ``text`` directly or ``title``/``abstract`` to be joined
    with the separator. Bad lines are skipped and counted.
    """
    pairs: list[tuple[str, str]] = []
    skipped = 0
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                rec_id = entry["id"]
            except (json.JSONDecodeError, TypeError, KeyError):
                skipped += 1
                logger.warning("skipping malformed input line %d", line_no)
                continue
            if "text" in entry:
                text = str(entry["text"])
            elif "title" in entry or "abstract" in entry:
                parts = [str(entry.get("title") or ""), str(entry.get("abstract") or "")]
                text = separator.join(part for part in parts if part)
            else:
                skipped += 1
                logger.warning("input line %d has neither text nor title/abstract", line_no)
                continue
            pairs.append((str(rec_id), text))
    return pairs, skipped


def load_encoder(model_id: str):
    try:
        import torch
        from transformers import AutoModel, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoad(f"cannot load {model_id!r}: {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _max_length(tokenizer, model) -> int:
    limit = getattr(model.config, "max_position_embeddings", 512)
    declared = getattr(tokenizer, "model_max_length", limit)
    if declared and declared < 1_000_000:  # HF uses a huge sentinel for "unset"
        limit = min(limit, declared)
    return max(8, int(limit))


def run_job(job: SidecarJob) -> JobStats:
    """Encode the whole input file, preserving line order, one vector each."""
    import torch

    tokenizer, model = load_encoder(job.model_id)
    separator = job.separator if job.separator is not None else (tokenizer.sep_token or " ")
    pairs, skipped = read_job_lines(job.input_path, separator)
    dim = int(model.config.hidden_size)
    max_length = _max_length(tokenizer, model)

    job.output_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = job.output_path.with_name(job.output_path.name + ".tmp")
    with tmp_path.open("wb") as out:
        out.write(EMB1_MAGIC)
        out.write(struct.pack("<II", dim, len(pairs)))
        for start in range(0, len(pairs), job.batch_size):
            batch = pairs[start : start + job.batch_size]
            encoded = tokenizer(
                [text for _, text in batch],
                padding=True,
                truncation=True,
                max_length=max_length,
                return_tensors="pt",
            )
            output = model(**encoded)
            cls_vectors = output.last_hidden_state[:, 0, :].to(torch.float32).numpy()
            for (rec_id, _), row in zip(batch, cls_vectors):
                id_bytes = rec_id.encode("utf-8")
                out.write(struct.pack("<I", len(id_bytes)))
                out.write(id_bytes)
                out.write(row.astype("<f4").tobytes())
    tmp_path.replace(job.output_path)
    return JobStats(encoded=len(pairs), skipped=skipped, dim=dim)
