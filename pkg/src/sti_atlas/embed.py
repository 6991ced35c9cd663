"""Embedding matrix container, the EMB1 vector file format, and providers.

EMB1 layout (all integers little-endian): magic ``EMB1``, u32 dim, u32 row
count, then per row a u32 id byte length, the UTF-8 id, and dim float32
values. The format is the contract with the embedding sidecar, so the
reader validates strictly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import tokenize

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"


class VectorFileError(ValueError):
    """EMB1 file violates the format contract."""


class BadMagic(VectorFileError):
    pass


class TruncatedFile(VectorFileError):
    pass


class DimMismatch(ValueError):
    """Vector dimension differs from what the consumer requires."""


class ZeroVector(ValueError):
    """Cosine is undefined for zero-norm input."""


class EmptySet(ValueError):
    """Centroid of nothing."""


class SidecarError(RuntimeError):
    """External embedding command failed."""


@dataclass
class EmbeddingMatrix:
    """Row-major float32 vectors aligned with record ids."""

    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids but {self.vectors.shape[0]} vector rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in embedding matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding matrix contains non-finite entries")
        self._index = {rec_id: i for i, rec_id in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rec_id: str) -> bool:
        return rec_id in self._index

    def row(self, rec_id: str) -> np.ndarray:
        return self.vectors[self._index[rec_id]]

    def subset(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        rows = [self._index[rec_id] for rec_id in ids]
        return EmbeddingMatrix(ids=list(ids), vectors=self.vectors[rows].copy())


def write_vectors(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Serialize to EMB1 with an atomic rename so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", matrix.dim, len(matrix)))
        for rec_id, row in zip(matrix.ids, matrix.vectors):
            encoded = rec_id.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(row.astype("<f4").tobytes())
    os.replace(tmp, path)


def read_vectors(path: str | Path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedFile(f"{path}: shorter than the EMB1 header")
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {data[:4]!r} is not {MAGIC!r}")
    dim, count = struct.unpack_from("<II", data, 4)
    offset = 12
    ids: list[str] = []
    rows = []
    row_bytes = 4 * dim
    for _ in range(count):
        if offset + 4 > len(data):
            raise TruncatedFile(f"{path}: row header past end of file")
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + id_len + row_bytes > len(data):
            raise TruncatedFile(f"{path}: row data past end of file")
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=offset))
        offset += row_bytes
    if offset != len(data):
        raise VectorFileError(f"{path}: {len(data) - offset} trailing bytes")
    vectors = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingMatrix(ids=ids, vectors=vectors)


# --- providers -----------------------------------------------------------------


class ProviderKind(str, Enum):
    FILE = "FILE"
    FALLBACK_HASH = "FALLBACK_HASH"
    SIDECAR = "SIDECAR"


@dataclass
class EmbeddingProviderSpec:
    kind: ProviderKind
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind is ProviderKind.FILE and "path" not in self.params:
            raise ValueError("FILE provider requires params['path']")
        if self.kind is ProviderKind.FALLBACK_HASH and "dim" not in self.params:
            raise ValueError("FALLBACK_HASH provider requires params['dim']")


def _token_bucket(token: str, seed: int, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        f"{seed}:{token}".encode("utf-8"), digest_size=8
    ).digest()
    value = int.from_bytes(digest, "little")
    sign = 1.0 if value & 1 else -1.0
    return (value >> 1) % dim, sign


def fallback_embed(texts: Iterable[tuple[str, str]], dim: int, seed: int) -> EmbeddingMatrix:
    """Deterministic seeded feature-hashing embedder.

    A stand-in so the pipeline runs without model inference: identical text
    gives identical unit-norm vectors, and token overlap raises cosine. It
    carries no semantics and is banned from report headers.
    """
    if dim < 8:
        raise ValueError("fallback embedding dim must be at least 8")
    ids = []
    rows = []
    for rec_id, text in texts:
        ids.append(rec_id)
        row = np.zeros(dim, dtype=np.float64)
        tokens = tokenize(text)
        if not tokens:
            bucket, sign = _token_bucket("", seed, dim)
            row[bucket] = sign
        else:
            for token in tokens:
                bucket, sign = _token_bucket(token, seed, dim)
                row[bucket] += sign
            norm = float(np.linalg.norm(row))
            if norm == 0.0:  # sign cancellation; fall back to a marker bucket
                bucket, sign = _token_bucket("", seed, dim)
                row[bucket] = 1.0
                norm = 1.0
            row /= norm
        rows.append(row.astype(np.float32))
    vectors = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingMatrix(ids=ids, vectors=vectors)


def run_sidecar(
    command: Sequence[str],
    texts: Iterable[tuple[str, str]],
    out_path: str | Path,
    work_dir: str | Path | None = None,
) -> EmbeddingMatrix:
    """Hand texts to an external embedding command speaking the EMB1 contract.

    The command receives ``--in <texts.jsonl> --out <vectors.emb1>`` appended
    to its configured argv and must exit 0.
    """
    out_path = Path(out_path)
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp_dir:
        texts_path = Path(tmp_dir) / "texts.jsonl"
        with texts_path.open("w", encoding="utf-8") as handle:
            for rec_id, text in texts:
                handle.write(json.dumps({"id": rec_id, "text": text}, ensure_ascii=False))
                handle.write("\n")
        argv = [*command, "--in", str(texts_path), "--out", str(out_path)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise SidecarError(
                f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
    return read_vectors(out_path)


def load_embeddings(
    spec: EmbeddingProviderSpec,
    texts: list[tuple[str, str]],
    out_path: str | Path,
) -> EmbeddingMatrix:
    """Resolve a provider spec to a concrete matrix, materialized at out_path."""
    if spec.kind is ProviderKind.FILE:
        matrix = read_vectors(spec.params["path"])
    elif spec.kind is ProviderKind.FALLBACK_HASH:
        matrix = fallback_embed(
            texts, dim=int(spec.params["dim"]), seed=int(spec.params.get("seed", 0))
        )
    elif spec.kind is ProviderKind.SIDECAR:
        command = spec.params.get("command")
        if not command:
            raise ValueError("SIDECAR provider requires params['command']")
        if isinstance(command, str):
            command = command.split()
        return run_sidecar(command, texts, out_path)
    else:  # pragma: no cover
        raise ValueError(f"unknown provider kind {spec.kind}")
    write_vectors(matrix, out_path)
    return matrix


# --- vector algebra ---------------------------------------------------------------


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimMismatch(f"cosine over dims {u.shape} vs {v.shape}")
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroVector("cosine undefined for zero-norm vectors")
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def centroid(rows: Iterable[np.ndarray]) -> np.ndarray:
    rows = [np.asarray(row, dtype=np.float64) for row in rows]
    if not rows:
        raise EmptySet("centroid of an empty set")
    dims = {row.shape for row in rows}
    if len(dims) > 1:
        raise DimMismatch(f"mixed dims in centroid input: {sorted(dims)}")
    return np.mean(np.vstack(rows), axis=0)
