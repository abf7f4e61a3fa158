"""Distractor suppression rules and re-rank feature extraction.

Rule 1 lowers the confidence of queries that look like known non-landmark
images. Rule 2 demotes every prediction of a landmark that is predicted
suspiciously often across the test set.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import IntegrityError, ParamError
from .knn import SearchResult, top_k_search
from .recognition import Prediction
from .store import NON_LANDMARK

PENALTY_MODES = ("subtract", "zero")
NL_STATS = ("mean", "max")

FEATURE_NAMES = (
    "top1_sim",
    "mean_top3_sim",
    "top1_nonlandmark_sim",
    "mean_top3_nonlandmark_sim",
    "class_vote_count",
    "class_test_frequency",
    "classifier_prob",
)


@dataclass(frozen=True)
class PostprocessParams:
    tau: float = 0.3
    topk_nl: int = 3
    cap: int = 20
    penalty_mode: str = "subtract"
    nl_stat: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParamError(f"tau must lie in [0, 1], got {self.tau}")
        if self.topk_nl < 1 or self.cap < 1:
            raise ParamError("topk_nl and cap must be >= 1")
        if self.penalty_mode not in PENALTY_MODES:
            raise ParamError(f"penalty_mode must be one of {PENALTY_MODES}")
        if self.nl_stat not in NL_STATS:
            raise ParamError(f"nl_stat must be one of {NL_STATS}")


def nonlandmark_search(queries, nonlandmark_set, topk_nl: int, workers: int = 1) -> SearchResult:
    if len(nonlandmark_set) == 0:
        raise ParamError("non-landmark reference set is empty")
    return top_k_search(queries, nonlandmark_set, min(topk_nl, len(nonlandmark_set)), workers=workers)


def nonlandmark_scores(nl_result: SearchResult, topk_nl: int = 3, stat: str = "mean") -> dict:
    """Per-query statistic over the top ``topk_nl`` non-landmark similarities."""
    if stat not in NL_STATS:
        raise ParamError(f"stat must be one of {NL_STATS}")
    top = nl_result.similarities[:, :topk_nl].astype(np.float64)
    vals = top.mean(axis=1) if stat == "mean" else top.max(axis=1)
    return dict(zip(nl_result.query_ids, (float(v) for v in vals)))


def apply_nonlandmark_rule(predictions: Sequence[Prediction], scores: Mapping[str, float],
                           params: PostprocessParams = PostprocessParams()) -> list:
    """Penalize predictions whose non-landmark score is strictly above tau."""
    out = []
    for p in predictions:
        if p.query_id not in scores:
            raise IntegrityError(f"no non-landmark score for query {p.query_id!r}")
        s = scores[p.query_id]
        if p.abstains or p.confidence <= 0.0 or not s > params.tau:
            out.append(p)
        elif params.penalty_mode == "subtract":
            out.append(p.with_confidence(max(0.0, p.confidence - s)))
        else:
            out.append(p.with_confidence(0.0))
    return out


def nonlandmark_penalty(predictions: Sequence[Prediction], queries, nonlandmark_set,
                        params: PostprocessParams = PostprocessParams(), workers: int = 1) -> list:
    nl = nonlandmark_search(queries, nonlandmark_set, params.topk_nl, workers)
    return apply_nonlandmark_rule(predictions, nonlandmark_scores(nl, params.topk_nl, params.nl_stat), params)


def landmark_frequencies(predictions: Sequence[Prediction]) -> Counter:
    return Counter(p.landmark for p in predictions if not p.abstains)


def frequency_suppression(predictions: Sequence[Prediction], cap: int = 20) -> list:
    """Shift every prediction of an over-predicted landmark below all others.

    A landmark predicted more than ``cap`` times has each of its rows moved
    to ``confidence - (1 + max confidence)``. Rows already negative were
    demoted by an earlier pass and are left alone, which makes the rule
    idempotent.
    """
    if not predictions:
        return []
    counts = landmark_frequencies(predictions)
    flagged = {lab for lab, n in counts.items() if n > cap}
    if not flagged:
        return list(predictions)
    shift = 1.0 + max(p.confidence for p in predictions)
    return [
        p.with_confidence(p.confidence - shift)
        if p.landmark in flagged and not p.suppressed else p
        for p in predictions
    ]


def redemote(predictions: Sequence[Prediction], was_suppressed: Sequence[bool]) -> list:
    """Re-apply the frequency demotion after confidences were replaced."""
    if not any(was_suppressed):
        return list(predictions)
    shift = 1.0 + max(p.confidence for p in predictions)
    return [p.with_confidence(p.confidence - shift) if s else p
            for p, s in zip(predictions, was_suppressed)]


def extract_rerank_features(predictions: Sequence[Prediction], search: SearchResult, index_labels,
                            nl_result: SearchResult,
                            classifier_probs: Optional[Mapping] = None) -> np.ndarray:
    """One row of FEATURE_NAMES per prediction, aligned on query id."""
    if index_labels is None:
        raise IntegrityError("index set carries no landmark labels")
    labels = np.asarray(index_labels)
    qrow = {q: i for i, q in enumerate(search.query_ids)}
    nrow = {q: i for i, q in enumerate(nl_result.query_ids)}
    freq = landmark_frequencies(predictions)
    probs = classifier_probs or {}
    out = np.zeros((len(predictions), len(FEATURE_NAMES)), dtype=np.float64)
    for r, p in enumerate(predictions):
        if p.query_id not in qrow or p.query_id not in nrow:
            raise IntegrityError(f"query {p.query_id!r} missing from search results")
        sims = search.similarities[qrow[p.query_id]].astype(np.float64)
        nl = nl_result.similarities[nrow[p.query_id]].astype(np.float64)
        votes = 0
        if not p.abstains:
            votes = int(np.count_nonzero(labels[search.indices[qrow[p.query_id]]] == p.landmark))
        out[r] = (
            sims[0],
            sims[:3].mean(),
            nl[0],
            nl[:3].mean(),
            votes,
            0 if p.abstains else freq[p.landmark],
            probs.get(p.query_id, {}).get(p.landmark, 0.0) if not p.abstains else 0.0,
        )
    return out


def write_features_csv(predictions: Sequence[Prediction], features: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("query_id", "landmark_id") + FEATURE_NAMES)
        for p, row in zip(predictions, features):
            w.writerow([p.query_id, p.landmark] + [repr(float(v)) for v in row])


def read_features_csv(path):
    ids, rows = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != ("query_id", "landmark_id") + FEATURE_NAMES:
            raise IntegrityError(f"{path}: unexpected feature header")
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(v) for v in rec[2:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(-1, len(FEATURE_NAMES))
