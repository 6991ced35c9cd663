"""Topic discovery over document embeddings.

K-means (seeded k-means++ plus Lloyd iterations) with WCSS/DBCC diagnostics
for choosing k, frequency-ranked label candidates per topic, and an exact
t-SNE projection for the topic scatter plot. The operator picks k from the
sweep table; the elbow value is a suggestion, never a silent default.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Record
from .embed import EmbeddingMatrix
from .vocab import tokenize

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 300
DEFAULT_K = 30


class KTooLarge(ValueError):
    """More clusters requested than points available."""


class PerplexityOutOfRange(ValueError):
    """t-SNE perplexity must satisfy 3 <= perplexity < n/3."""


def _load_stopwords() -> frozenset[str]:
    text = resources.files("sti_atlas").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


STOPWORDS = _load_stopwords()


# --- k-means ---------------------------------------------------------------


@dataclass
class TopicModel:
    k: int
    centroids: np.ndarray
    assignments: dict[str, int]
    wcss: float
    dbcc_min: float
    centroid_distances: np.ndarray
    wcss_history: list[float]
    label_candidates: list[list[tuple[str, int]]] = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "k": self.k,
            "centroids": [[float(x) for x in row] for row in self.centroids],
            "assignments": {rec_id: int(t) for rec_id, t in sorted(self.assignments.items())},
            "wcss": self.wcss,
            "dbcc_min": self.dbcc_min,
            "centroid_distances": [[float(x) for x in row] for row in self.centroid_distances],
            "wcss_history": self.wcss_history,
            "label_candidates": [
                [[term, int(freq)] for term, freq in topic] for topic in self.label_candidates
            ],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "TopicModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            k=payload["k"],
            centroids=np.asarray(payload["centroids"], dtype=np.float64),
            assignments=dict(payload["assignments"]),
            wcss=payload["wcss"],
            dbcc_min=payload["dbcc_min"],
            centroid_distances=np.asarray(payload["centroid_distances"], dtype=np.float64),
            wcss_history=list(payload["wcss_history"]),
            label_candidates=[
                [(term, int(freq)) for term, freq in topic]
                for topic in payload.get("label_candidates", [])
            ],
        )


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    cross = points @ centers.T
    sq = (points * points).sum(axis=1)[:, None] + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(sq - 2.0 * cross, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.RandomState) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.randint(n)]
    closest = _squared_distances(points, centers[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:  # all remaining mass on existing centers
            idx = rng.randint(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = points[idx]
        closest = np.minimum(closest, _squared_distances(points, centers[i : i + 1]).ravel())
    return centers


def kmeans_fit(matrix: EmbeddingMatrix, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> TopicModel:
    """Seeded k-means++ then Lloyd iterations to an assignment fixpoint.

    Nearest-centroid ties break toward the lowest centroid index; a cluster
    that empties is re-seeded with the point farthest from its assigned
    centroid. WCSS is recorded each iteration and must never increase.
    """
    n = len(matrix)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} with only {n} points")

    points = matrix.vectors.astype(np.float64)
    rng = np.random.RandomState(seed)
    centers = _kmeans_pp_init(points, k, rng)

    wcss_history: list[float] = []
    previous = None
    assignment = None
    for _ in range(max_iter):
        distances = _squared_distances(points, centers)
        assignment = distances.argmin(axis=1)
        wcss = float(((points - centers[assignment]) ** 2).sum())
        if wcss_history:
            assert wcss <= wcss_history[-1] * (1.0 + 1e-12) + 1e-12, "WCSS increased"
        wcss_history.append(wcss)
        if previous is not None and np.array_equal(assignment, previous):
            break
        previous = assignment

        for cluster in range(k):
            members = points[assignment == cluster]
            if len(members):
                centers[cluster] = members.mean(axis=0)
        empties = [c for c in range(k) if not np.any(assignment == c)]
        if empties:
            costs = ((points - centers[assignment]) ** 2).sum(axis=1)
            for cluster in empties:
                farthest = int(costs.argmax())
                centers[cluster] = points[farthest]
                costs[farthest] = -1.0
    else:
        # Iteration budget exhausted: take one closing pass so every point
        # sits with its nearest centroid.
        distances = _squared_distances(points, centers)
        assignment = distances.argmin(axis=1)
        wcss = float(((points - centers[assignment]) ** 2).sum())
        wcss_history.append(min(wcss, wcss_history[-1]) if wcss_history else wcss)

    pairwise = np.sqrt(_squared_distances(centers, centers))
    off_diagonal = pairwise[~np.eye(k, dtype=bool)]
    dbcc_min = float(off_diagonal.min()) if k > 1 else 0.0

    return TopicModel(
        k=k,
        centroids=centers,
        assignments={rec_id: int(topic) for rec_id, topic in zip(matrix.ids, assignment)},
        wcss=wcss_history[-1],
        dbcc_min=dbcc_min,
        centroid_distances=pairwise,
        wcss_history=wcss_history,
    )


@dataclass
class SweepResult:
    rows: list[tuple[int, float, float]]
    elbow_k: int | None

    def table(self) -> str:
        lines = ["k\twcss\tdbcc_min"]
        for k, wcss, dbcc in self.rows:
            marker = "  <- elbow suggestion" if k == self.elbow_k else ""
            lines.append(f"{k}\t{wcss:.4f}\t{dbcc:.4f}{marker}")
        return "\n".join(lines)


def sweep_k(matrix: EmbeddingMatrix, ks: Sequence[int], seed: int) -> SweepResult:
    """Fit every candidate k and report the WCSS/DBCC table.

    The elbow suggestion is the k with the largest second difference of
    WCSS; it is reported, never auto-selected.
    """
    if not ks:
        raise ValueError("ks must be nonempty")
    rows = []
    for k in ks:
        model = kmeans_fit(matrix, k, seed)
        rows.append((k, model.wcss, model.dbcc_min))

    elbow = None
    if len(rows) >= 3:
        wcss = [row[1] for row in rows]
        second_diff = [wcss[i - 1] - 2 * wcss[i] + wcss[i + 1] for i in range(1, len(wcss) - 1)]
        elbow = rows[1 + int(np.argmax(second_diff))][0]
    return SweepResult(rows=rows, elbow_k=elbow)


# --- label candidates ---------------------------------------------------------


def _topic_terms(records: Iterable[Record]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for record in records:
        tokens = tokenize(record.text())
        content = [t for t in tokens if t not in STOPWORDS]
        for token in content:
            counts[token] = counts.get(token, 0) + 1
        for first, second in zip(tokens, tokens[1:]):
            if first in STOPWORDS or second in STOPWORDS:
                continue
            bigram = f"{first} {second}"
            counts[bigram] = counts.get(bigram, 0) + 1
    return counts


def label_candidates(
    records_per_topic: Sequence[Sequence[Record]], top_n: int = 10
) -> list[list[tuple[str, int]]]:
    """Ranked (term, frequency) label candidates per topic.

    Unigrams and bigrams are counted over title+abstract and ranked by
    frequency scaled with a smoothed inverse topic-document-frequency, so a
    term blanketing many topics sinks below topic-specific ones. Final topic
    names remain an operator decision.
    """
    per_topic_counts = [_topic_terms(records) for records in records_per_topic]
    n_topics = len(per_topic_counts)
    topic_df: dict[str, int] = {}
    for counts in per_topic_counts:
        for term in counts:
            topic_df[term] = topic_df.get(term, 0) + 1

    ranked: list[list[tuple[str, int]]] = []
    for counts in per_topic_counts:
        if not counts:
            ranked.append([])
            continue
        scored = []
        for term, freq in counts.items():
            itdf = np.log((1.0 + n_topics) / (1.0 + topic_df[term])) + 1.0
            scored.append((freq * itdf, term, freq))
        # Equal scores: prefer the longer n-gram (a phrase subsumes its
        # constituents), then alphabetical for determinism.
        scored.sort(key=lambda item: (-item[0], -len(item[1].split()), item[1]))
        ranked.append([(term, freq) for _, term, freq in scored[:top_n]])
    return ranked


def records_by_topic(model: TopicModel, records: Iterable[Record]) -> list[list[Record]]:
    grouped: list[list[Record]] = [[] for _ in range(model.k)]
    for record in records:
        topic = model.assignments.get(record.id)
        if topic is not None:
            grouped[topic].append(record)
    return grouped


# --- t-SNE ----------------------------------------------------------------------


@dataclass
class Projection2D:
    ids: list[str]
    coordinates: np.ndarray
    perplexity: float
    seed: int
    iterations: int
    kl_initial: float = 0.0
    kl_final: float = 0.0


EARLY_EXAGGERATION = 4.0
EXAGGERATION_ITERS = 250
MOMENTUM_SWITCH_ITER = 250
PERPLEXITY_TOL = 1e-3


def _learning_rate(n: int) -> float:
    # Scales with sample count; small problems overshoot badly at the
    # textbook 200.
    return max(n / (EARLY_EXAGGERATION * 4.0), 50.0)


def _row_affinities(sq_dist_row: np.ndarray, perplexity: float) -> np.ndarray:
    """Conditional Gaussian affinities for one row, with the bandwidth found
    by bisection until the row perplexity is within PERPLEXITY_TOL of target."""
    # Shifting by the row minimum leaves the normalized distribution (and so
    # the entropy) unchanged while keeping exp() away from total underflow.
    shifted = sq_dist_row - sq_dist_row.min()
    beta, beta_min, beta_max = 1.0, 0.0, np.inf
    probs = np.full_like(shifted, 1.0 / len(shifted))
    for _ in range(300):
        probs = np.exp(-shifted * beta)
        probs /= probs.sum()
        positive = probs[probs > 0.0]
        entropy_bits = float(-(positive * np.log2(positive)).sum())
        current = 2.0**entropy_bits
        if abs(current - perplexity) <= PERPLEXITY_TOL:
            break
        if current > perplexity:  # too flat, narrow the kernel
            beta_min = beta
            beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = (beta + beta_min) / 2.0
    return probs


def conditional_affinities(points: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-conditional affinity matrix (zero diagonal), each row calibrated
    to the target perplexity."""
    n = points.shape[0]
    sq = _squared_distances(points, points)
    conditional = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        row = np.delete(sq[i], i)
        affinity = _row_affinities(row, perplexity)
        conditional[i, :i] = affinity[:i]
        conditional[i, i + 1 :] = affinity[i:]
    return conditional


def _joint_probabilities(points: np.ndarray, perplexity: float) -> np.ndarray:
    n = points.shape[0]
    conditional = conditional_affinities(points, perplexity)
    joint = (conditional + conditional.T) / (2.0 * n)
    return np.maximum(joint, 1e-12)


def _kl_divergence(joint: np.ndarray, embedded: np.ndarray) -> tuple[float, np.ndarray]:
    n = embedded.shape[0]
    sq = _squared_distances(embedded, embedded)
    student = 1.0 / (1.0 + sq)
    np.fill_diagonal(student, 0.0)
    q = np.maximum(student / student.sum(), 1e-12)
    kl = float((joint * np.log(joint / q)).sum())
    weights = (joint - q) * student
    grad = 4.0 * (np.diag(weights.sum(axis=1)) - weights) @ embedded
    return kl, grad


def tsne_project(
    matrix: EmbeddingMatrix,
    perplexity: float,
    seed: int,
    iterations: int = 1000,
) -> Projection2D:
    """Exact t-SNE to 2-D: per-row bandwidth bisection, symmetrized
    affinities, early exaggeration, and momentum gradient descent.

    O(n^2) on purpose; the corpora this serves are a few thousand documents.
    ``iterations`` must extend past the exaggeration phase (250) or the
    closing KL check can trip on the mid-schedule transient.
    """
    n = len(matrix)
    if not 3 <= perplexity < n / 3:
        raise PerplexityOutOfRange(f"perplexity {perplexity} outside [3, n/3) for n={n}")

    points = matrix.vectors.astype(np.float64)
    joint = _joint_probabilities(points, perplexity)

    rng = np.random.RandomState(seed)
    embedded = rng.normal(0.0, 1e-4, size=(n, 2))
    kl_initial, _ = _kl_divergence(joint, embedded)

    update = np.zeros_like(embedded)
    gains = np.ones_like(embedded)
    exaggerated = joint * EARLY_EXAGGERATION
    learning_rate = _learning_rate(n)
    for iteration in range(iterations):
        active = exaggerated if iteration < EXAGGERATION_ITERS else joint
        _, grad = _kl_divergence(active, embedded)
        momentum = 0.5 if iteration < MOMENTUM_SWITCH_ITER else 0.8
        flips = np.sign(grad) != np.sign(update)
        gains[flips] += 0.2
        gains[~flips] *= 0.8
        np.clip(gains, 0.01, None, out=gains)
        update = momentum * update - learning_rate * gains * grad
        embedded = embedded + update
        embedded = embedded - embedded.mean(axis=0)

    kl_final, _ = _kl_divergence(joint, embedded)
    assert kl_final <= kl_initial, "t-SNE failed to improve on its initialization"
    assert np.all(np.isfinite(embedded)), "t-SNE produced non-finite coordinates"

    return Projection2D(
        ids=list(matrix.ids),
        coordinates=embedded,
        perplexity=perplexity,
        seed=seed,
        iterations=iterations,
        kl_initial=kl_initial,
        kl_final=kl_final,
    )


def write_projection_csv(
    projection: Projection2D, assignments: Mapping[str, int], path: str | Path
) -> None:
    """The scatter-plot data file: id,x,y,topic rows."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "x", "y", "topic"])
        for rec_id, (x, y) in zip(projection.ids, projection.coordinates):
            writer.writerow([rec_id, f"{x:.6f}", f"{y:.6f}", assignments.get(rec_id, "")])
