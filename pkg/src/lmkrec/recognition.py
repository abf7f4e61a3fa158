"""Recognition by retrieval: neighbor lists -> one (landmark, confidence) per query."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import IntegrityError, ParamError
from .knn import SearchResult, top_k_search
from .store import NON_LANDMARK


@dataclass(frozen=True)
class Prediction:
    """One submission row.

    A negative confidence marks a row demoted by frequency suppression.
    """

    query_id: str
    landmark: int
    confidence: float

    def __post_init__(self):
        if self.landmark < NON_LANDMARK:
            raise IntegrityError(f"landmark id {self.landmark} < -1")
        if not np.isfinite(self.confidence):
            raise IntegrityError(f"non-finite confidence for {self.query_id!r}")
        if self.landmark == NON_LANDMARK and self.confidence != 0.0:
            raise IntegrityError(f"abstention for {self.query_id!r} must have confidence 0")

    @property
    def abstains(self) -> bool:
        return self.landmark == NON_LANDMARK

    @property
    def suppressed(self) -> bool:
        return self.confidence < 0.0

    def with_confidence(self, confidence: float) -> "Prediction":
        return Prediction(self.query_id, self.landmark, float(confidence))


@dataclass(frozen=True)
class FusionParams:
    k_agg: int = 3
    alpha: float = 0.5

    def __post_init__(self):
        if int(self.k_agg) != self.k_agg or self.k_agg < 1:
            raise ParamError(f"k_agg must be a positive integer, got {self.k_agg}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParamError(f"alpha must lie in [0, 1], got {self.alpha}")


def canonical(confidence: float) -> float:
    """Round-trip a confidence through its 6-decimal CSV representation."""
    return float(f"{confidence:.6f}")


def aggregate_row(neighbor_idx, neighbor_sims, index_labels, k_agg: int) -> dict:
    """Per-class sum of the top ``k_agg`` neighbor similarities.

    Neighbors labelled -1 are skipped. Negative similarities contribute 0 and
    classes ending with a zero score are dropped, so all scores are > 0.
    """
    scores: dict = {}
    seen: dict = {}
    for j, s in zip(neighbor_idx, neighbor_sims):
        lab = int(index_labels[j])
        if lab == NON_LANDMARK:
            continue
        n = seen.get(lab, 0)
        if n >= k_agg:
            continue
        seen[lab] = n + 1
        scores[lab] = scores.get(lab, 0.0) + max(float(s), 0.0)
    return {lab: v for lab, v in scores.items() if v > 0.0}


def aggregate_class_scores(result: SearchResult, index_labels, k_agg: int) -> list:
    if index_labels is None:
        raise IntegrityError("index set carries no landmark labels")
    labels = np.asarray(index_labels)
    if result.indices.size and result.indices.max() >= labels.shape[0]:
        raise IntegrityError("neighbor row outside the labelled index")
    return [
        aggregate_row(idx, sims, labels, k_agg)
        for idx, sims in zip(result.indices, result.similarities)
    ]


def fuse_with_classifier(retrieval_score: float, class_prob: Optional[float], alpha: float) -> float:
    if retrieval_score < 0:
        raise ParamError(f"retrieval score must be >= 0, got {retrieval_score}")
    if not 0.0 <= alpha <= 1.0:
        raise ParamError(f"alpha must lie in [0, 1], got {alpha}")
    if class_prob is None:
        return float(retrieval_score)
    if not 0.0 <= class_prob <= 1.0:
        raise ParamError(f"class probability must lie in [0, 1], got {class_prob}")
    return float(retrieval_score * class_prob ** alpha)


def predict_from_search(result: SearchResult, index_labels, classifier_probs: Optional[Mapping] = None,
                        params: FusionParams = FusionParams()) -> list:
    """Argmax of fused class scores per query; ties go to the lower landmark id."""
    if params.k_agg > result.k:
        raise ParamError(f"k_agg={params.k_agg} exceeds k_search={result.k}")
    tables = aggregate_class_scores(result, index_labels, params.k_agg)
    probs = classifier_probs or {}
    out = []
    for qid, table in zip(result.query_ids, tables):
        qprobs = probs.get(qid, {})
        best_lab, best = NON_LANDMARK, 0.0
        for lab in sorted(table):
            conf = fuse_with_classifier(table[lab], qprobs.get(lab), params.alpha)
            if conf > best:
                best_lab, best = lab, conf
        out.append(Prediction(qid, best_lab, best))
    return out


def predict(queries, index, classifier_probs: Optional[Mapping] = None,
            params: FusionParams = FusionParams(), k_search: int = 100, workers: int = 1) -> list:
    """Search ``index`` for every query and turn neighbors into predictions."""
    k = min(k_search, len(index))
    result = top_k_search(queries, index, k, workers=workers)
    if params.k_agg > k:
        params = FusionParams(k_agg=k, alpha=params.alpha)
    return predict_from_search(result, index.labels, classifier_probs, params)


def canonicalize(predictions: Sequence[Prediction]) -> list:
    return [p.with_confidence(canonical(p.confidence)) for p in predictions]


def write_predictions_csv(predictions: Sequence[Prediction], path, abstain_as_empty: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("query_id,landmark_id,confidence\n")
        for p in predictions:
            lab = "" if (p.abstains and abstain_as_empty) else str(p.landmark)
            fh.write(f"{p.query_id},{lab},{p.confidence:.6f}\n")


def read_predictions_csv(path) -> list:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "landmark_id", "confidence"]:
            raise IntegrityError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            lab = row["landmark_id"].strip()
            out.append(Prediction(row["query_id"], int(lab) if lab else NON_LANDMARK,
                                  float(row["confidence"])))
    return out


def read_classifier_probs(path) -> dict:
    """CSV ``query_id,landmark_id,prob`` -> {query_id: {landmark: prob}}."""
    probs: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "landmark_id", "prob"]:
            raise IntegrityError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            p = float(row["prob"])
            if not 0.0 <= p <= 1.0:
                raise ParamError(f"{path}: probability {p} outside [0, 1]")
            probs.setdefault(row["query_id"], {})[int(row["landmark_id"])] = p
    return probs
