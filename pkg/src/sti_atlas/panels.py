"""Weakly supervised ERC panel classification.

Panel centroids come from ERC-labelled project embeddings; a grant's panel
propagates to its publications only when they sit within a per-panel
distance threshold of that centroid. The surviving labels feed 25 one-vs-
rest logistic classifiers over the embeddings, applied independently so a
document can land in zero, one, or several panels.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed import DimMismatch, EmbeddingMatrix

logger = logging.getLogger(__name__)

PANELS: tuple[tuple[str, str], ...] = (
    ("PE1", "Mathematics"),
    ("PE2", "Fundamental Constituents of Matter"),
    ("PE3", "Condensed Matter Physics"),
    ("PE4", "Physical & Analytical Chemical Sciences"),
    ("PE5", "Synthetic Chemistry & Materials"),
    ("PE6", "Computer Science & Informatics"),
    ("PE7", "Systems & Communication Engineering"),
    ("PE8", "Products & Processes Engineering"),
    ("PE9", "Universe Sciences"),
    ("PE10", "Earth System Science"),
    ("LS1", "Molecules of Life: Biological Mechanisms, Structures & Functions"),
    ("LS2", "Integrative Biology: from Genes & Genomes to Systems"),
    ("LS3", "Cellular, Developmental & Regenerative Biology"),
    ("LS4", "Physiology in Health, Disease & Ageing"),
    ("LS5", "Neuroscience & Disorders of the Nervous System"),
    ("LS6", "Immunity, Infection & Immunotherapy"),
    ("LS7", "Prevention, Diagnosis & Treatment of Human Diseases"),
    ("LS8", "Environmental Biology, Ecology & Evolution"),
    ("LS9", "Biotechnology & Biosystems Engineering"),
    ("SH1", "Individuals, Markets & Organisations"),
    ("SH2", "Institutions, Governance & Legal Systems"),
    ("SH3", "The Social World & Its Diversity"),
    ("SH4", "The Human Mind & Its Complexity"),
    ("SH5", "Cultures & Cultural Production"),
    ("SH6", "The Study of the Human Past"),
)

PANEL_CODES: tuple[str, ...] = tuple(code for code, _ in PANELS)
PANEL_NAMES: dict[str, str] = dict(PANELS)

DEFAULT_THRESHOLD_PERCENTILE = 90.0
DEFAULT_POSITIVE_CAP = 1_500
DEFAULT_NEGATIVE_CAP = 20_000


class MissingPanel(ValueError):
    """A required panel has no labelled projects."""


class UnknownId(KeyError):
    """A label references an id absent from the embedding matrix."""


class NoPositives(ValueError):
    """A panel ended up with zero weak-labelled publications."""


class Diverged(RuntimeError):
    """Training loss became non-finite."""


# --- centroids and label propagation ------------------------------------------


@dataclass
class PanelCentroid:
    panel: str
    vector: np.ndarray
    threshold: float
    n_projects: int


def panel_centroids(
    project_embeddings: EmbeddingMatrix,
    labels: Mapping[str, str],
    percentile: float = DEFAULT_THRESHOLD_PERCENTILE,
    required_panels: Sequence[str] = PANEL_CODES,
) -> list[PanelCentroid]:
    """Mean vector per panel plus a propagation threshold set at the given
    percentile of that panel's own project-to-centroid distances."""
    by_panel: dict[str, list[str]] = {}
    for rec_id, panel in labels.items():
        if rec_id not in project_embeddings:
            raise UnknownId(rec_id)
        by_panel.setdefault(panel, []).append(rec_id)

    missing = [panel for panel in required_panels if not by_panel.get(panel)]
    if missing:
        raise MissingPanel(f"no labelled projects for: {', '.join(missing)}")

    centroids = []
    for panel in required_panels:
        ids = sorted(by_panel[panel])
        rows = np.vstack([project_embeddings.row(rec_id) for rec_id in ids]).astype(np.float64)
        center = rows.mean(axis=0)
        distances = np.linalg.norm(rows - center, axis=1)
        threshold = float(np.percentile(distances, percentile))
        if len(ids) == 1:
            logger.warning("panel %s has a single project; threshold degenerates to 0", panel)
        centroids.append(
            PanelCentroid(panel=panel, vector=center, threshold=threshold, n_projects=len(ids))
        )
    return centroids


def propagate_labels(
    publication_embeddings: EmbeddingMatrix,
    centroids: Sequence[PanelCentroid],
    grant_links: Iterable[tuple[str, str]],
) -> dict[str, str]:
    """Keep a publication's grant panel iff its embedding falls within the
    panel threshold; everything else drops out of the positives."""
    by_panel = {c.panel: c for c in centroids}
    labelled: dict[str, str] = {}
    for panel, pub_id in grant_links:
        if pub_id in labelled:
            if labelled[pub_id] != panel:
                logger.warning("publication %s linked to several panels; keeping %s", pub_id, labelled[pub_id])
            continue
        centroid = by_panel.get(panel)
        if centroid is None or pub_id not in publication_embeddings:
            continue
        distance = float(
            np.linalg.norm(
                publication_embeddings.row(pub_id).astype(np.float64) - centroid.vector
            )
        )
        if distance <= centroid.threshold:
            labelled[pub_id] = panel
    return labelled


# --- training sets ---------------------------------------------------------------


@dataclass
class TrainingSet:
    panel: str
    positives: list[str]
    negatives: list[str]
    seed: int

    def __post_init__(self) -> None:
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ValueError(f"panel {self.panel}: ids on both sides: {sorted(overlap)[:5]}")


def build_training_sets(
    weak_labels: Mapping[str, str],
    candidates: Sequence[str],
    caps: tuple[int, int] = (DEFAULT_POSITIVE_CAP, DEFAULT_NEGATIVE_CAP),
    seed: int = 0,
    panels: Sequence[str] = PANEL_CODES,
) -> list[TrainingSet]:
    """Per panel, a seeded uniform sample of its weak positives and of the
    other panels' positives as negatives, both capped.

    Publications the distance filter excluded appear on neither side of
    their own panel's set. Sampling is per-panel seeded, so results do not
    depend on panel order.
    """
    pos_cap, neg_cap = caps
    candidate_set = set(candidates)
    by_panel: dict[str, list[str]] = {panel: [] for panel in panels}
    for rec_id in sorted(weak_labels):
        if rec_id not in candidate_set:
            raise UnknownId(rec_id)
        panel = weak_labels[rec_id]
        if panel in by_panel:
            by_panel[panel].append(rec_id)

    sets = []
    for panel in panels:
        positives_pool = by_panel[panel]
        if not positives_pool:
            raise NoPositives(f"panel {panel} has no weak-labelled publications")
        negatives_pool = [
            rec_id
            for other in panels
            if other != panel
            for rec_id in by_panel[other]
        ]
        rng = random.Random(f"{seed}:{panel}")
        positives = (
            sorted(rng.sample(positives_pool, pos_cap))
            if len(positives_pool) > pos_cap
            else list(positives_pool)
        )
        negatives = (
            sorted(rng.sample(negatives_pool, neg_cap))
            if len(negatives_pool) > neg_cap
            else list(negatives_pool)
        )
        sets.append(TrainingSet(panel=panel, positives=positives, negatives=negatives, seed=seed))
    return sets


# --- logistic classifiers -----------------------------------------------------------


@dataclass
class TrainHyper:
    epochs: int = 60
    learning_rate: float = 0.5
    l2: float = 1e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class PanelClassifier:
    panel: str
    weights: np.ndarray
    bias: float
    decision_threshold: float = 0.5
    training_meta: dict = field(default_factory=dict)

    def probability(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.weights.shape[0]:
            raise DimMismatch(
                f"classifier {self.panel} expects dim {self.weights.shape[0]}, got {vectors.shape[1]}"
            )
        return _sigmoid(vectors @ self.weights + self.bias)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    exp_z = np.exp(z[~positive])
    out[~positive] = exp_z / (1.0 + exp_z)
    return out


def logistic_loss_and_grad(
    weights: np.ndarray,
    bias: float,
    X: np.ndarray,
    y: np.ndarray,
    pos_weight: float,
    l2: float,
) -> tuple[float, np.ndarray, float]:
    """Weighted mean negative log-likelihood with L2 on the weights (not the
    bias), plus its analytic gradient."""
    z = X @ weights + bias
    p = _sigmoid(z)
    eps = 1e-12
    sample_weights = np.where(y == 1.0, pos_weight, 1.0)
    ce = -(y * np.log(p + eps) + (1.0 - y) * np.log(1.0 - p + eps))
    loss = float((sample_weights * ce).mean() + 0.5 * l2 * float(weights @ weights))
    residual = sample_weights * (p - y) / len(y)
    grad_w = X.T @ residual + l2 * weights
    grad_b = float(residual.sum())
    return loss, grad_w, grad_b


def train_panel_classifier(
    train: TrainingSet, matrix: EmbeddingMatrix, hyper: TrainHyper = TrainHyper()
) -> PanelClassifier:
    """Mini-batch gradient descent on the weighted log-likelihood.

    The positive class is weighted |neg|/|pos| to offset the asymmetric set
    sizes. Full-set loss is checked after every epoch; an epoch that raises
    it is rolled back and retried at half the step size, so the recorded
    loss history is non-increasing by construction.
    """
    ids = list(train.positives) + list(train.negatives)
    for rec_id in ids:
        if rec_id not in matrix:
            raise UnknownId(rec_id)
    X = np.vstack([matrix.row(rec_id) for rec_id in ids]).astype(np.float64)
    y = np.concatenate(
        [np.ones(len(train.positives)), np.zeros(len(train.negatives))]
    )
    pos_weight = len(train.negatives) / max(len(train.positives), 1)

    weights = np.zeros(X.shape[1], dtype=np.float64)
    bias = 0.0
    learning_rate = hyper.learning_rate
    loss_history = [logistic_loss_and_grad(weights, bias, X, y, pos_weight, hyper.l2)[0]]

    for epoch in range(hyper.epochs):
        for _ in range(30):  # halve the step until the epoch helps
            epoch_weights = weights.copy()
            epoch_bias = bias
            order = np.random.RandomState(hyper.seed * 1_000_003 + epoch).permutation(len(y))
            for start in range(0, len(y), hyper.batch_size):
                batch = order[start : start + hyper.batch_size]
                _, grad_w, grad_b = logistic_loss_and_grad(
                    epoch_weights, epoch_bias, X[batch], y[batch], pos_weight, hyper.l2
                )
                epoch_weights -= learning_rate * grad_w
                epoch_bias -= learning_rate * grad_b
            loss = logistic_loss_and_grad(epoch_weights, epoch_bias, X, y, pos_weight, hyper.l2)[0]
            if not np.isfinite(loss):
                raise Diverged(f"panel {train.panel}: non-finite loss at epoch {epoch}")
            if loss <= loss_history[-1]:
                weights, bias = epoch_weights, epoch_bias
                loss_history.append(loss)
                break
            learning_rate *= 0.5
        else:
            logger.info("panel %s: loss plateaued at epoch %d", train.panel, epoch)
            break

    assert all(
        later <= earlier for earlier, later in zip(loss_history, loss_history[1:])
    ), "training loss increased across an epoch"

    return PanelClassifier(
        panel=train.panel,
        weights=weights,
        bias=bias,
        training_meta={
            "n_positives": len(train.positives),
            "n_negatives": len(train.negatives),
            "pos_weight": pos_weight,
            "epochs_run": len(loss_history) - 1,
            "final_loss": loss_history[-1],
            "loss_history": loss_history,
            "seed": hyper.seed,
            "own_panel_excluded_from_negatives": True,
        },
    )


def predict_panels(vector: np.ndarray, classifiers: Sequence[PanelClassifier]) -> set[str]:
    """Every panel whose classifier accepts the vector; empty set means NONE."""
    accepted = set()
    for classifier in classifiers:
        if float(classifier.probability(vector)[0]) >= classifier.decision_threshold:
            accepted.add(classifier.panel)
    return accepted


def predict_all(
    matrix: EmbeddingMatrix, ids: Iterable[str], classifiers: Sequence[PanelClassifier]
) -> dict[str, set[str]]:
    wanted = [rec_id for rec_id in ids if rec_id in matrix]
    if not wanted:
        return {}
    X = np.vstack([matrix.row(rec_id) for rec_id in wanted]).astype(np.float64)
    predictions: dict[str, set[str]] = {rec_id: set() for rec_id in wanted}
    for classifier in classifiers:
        probs = classifier.probability(X)
        for rec_id, prob in zip(wanted, probs):
            if prob >= classifier.decision_threshold:
                predictions[rec_id].add(classifier.panel)
    return predictions


# --- evaluation --------------------------------------------------------------------


@dataclass
class PanelMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float


@dataclass
class EvalReport:
    per_panel: dict[str, PanelMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_accuracy: float


def evaluate(
    predictions: Mapping[str, set[str]],
    gold: Mapping[str, str],
    panels: Sequence[str] = PANEL_CODES,
) -> EvalReport:
    """One-vs-rest confusion counts per panel over single-label gold ids,
    macro-averaged across panels."""
    per_panel: dict[str, PanelMetrics] = {}
    for panel in panels:
        tp = fp = fn = tn = 0
        for rec_id, gold_panel in gold.items():
            predicted = panel in predictions.get(rec_id, set())
            actual = gold_panel == panel
            if predicted and actual:
                tp += 1
            elif predicted:
                fp += 1
            elif actual:
                fn += 1
            else:
                tn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        accuracy = (tp + tn) / max(tp + fp + fn + tn, 1)
        per_panel[panel] = PanelMetrics(precision, recall, f1, accuracy)

    n = len(per_panel)
    return EvalReport(
        per_panel=per_panel,
        macro_precision=sum(m.precision for m in per_panel.values()) / n,
        macro_recall=sum(m.recall for m in per_panel.values()) / n,
        macro_f1=sum(m.f1 for m in per_panel.values()) / n,
        macro_accuracy=sum(m.accuracy for m in per_panel.values()) / n,
    )


# --- serialization --------------------------------------------------------------------


def write_classifiers(classifiers: Sequence[PanelClassifier], path: str | Path) -> None:
    payload = {
        "panels": [
            {
                "panel": c.panel,
                "weights": [float(w) for w in c.weights],
                "bias": float(c.bias),
                "decision_threshold": c.decision_threshold,
                "training": c.training_meta,
            }
            for c in classifiers
        ]
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


def read_classifiers(path: str | Path) -> list[PanelClassifier]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        PanelClassifier(
            panel=entry["panel"],
            weights=np.asarray(entry["weights"], dtype=np.float64),
            bias=entry["bias"],
            decision_threshold=entry.get("decision_threshold", 0.5),
            training_meta=entry.get("training", {}),
        )
        for entry in payload["panels"]
    ]


def write_predictions(predictions: Mapping[str, set[str]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for rec_id in sorted(predictions):
            handle.write(
                json.dumps({"id": rec_id, "panels": sorted(predictions[rec_id])})
            )
            handle.write("\n")


def read_predictions(path: str | Path) -> dict[str, set[str]]:
    predictions: dict[str, set[str]] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                entry = json.loads(line)
                predictions[entry["id"]] = set(entry.get("panels", []))
    return predictions
