"""GAP@1 (micro average precision over one prediction per query) and mAP@100."""
from __future__ import annotations

import csv
import logging
from typing import Mapping, Sequence

from .errors import IntegrityError, UndefinedMetricError
from .recognition import Prediction
from .store import NON_LANDMARK

log = logging.getLogger(__name__)


def ranked_predictions(predictions: Sequence[Prediction]) -> list:
    """Non-abstaining predictions sorted by confidence desc, query id asc."""
    seen = set()
    for p in predictions:
        if p.query_id in seen:
            raise IntegrityError(f"duplicate prediction for query {p.query_id!r}")
        seen.add(p.query_id)
    kept = [p for p in predictions if not p.abstains]
    return sorted(kept, key=lambda p: (-p.confidence, p.query_id))


def precision_trace(predictions: Sequence[Prediction], truth: Mapping[str, int]) -> list:
    """(rank, prediction, correct, precision-at-rank) for the GAP ranking."""
    rows, hits = [], 0
    for rank, p in enumerate(ranked_predictions(predictions), start=1):
        if p.query_id not in truth:
            raise IntegrityError(f"prediction for unknown query {p.query_id!r}")
        correct = p.landmark == truth[p.query_id]
        hits += correct
        rows.append((rank, p, correct, hits / rank))
    return rows


def gap_at_1(predictions: Sequence[Prediction], truth: Mapping[str, int]) -> float:
    m = sum(1 for lab in truth.values() if lab != NON_LANDMARK)
    trace = precision_trace(predictions, truth)
    if m == 0:
        raise UndefinedMetricError("ground truth has no landmark queries")
    return sum(prec for _, _, correct, prec in trace if correct) / m


def write_trace_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("rank,query_id,landmark_id,confidence,correct,precision\n")
        for rank, p, correct, prec in trace:
            fh.write(f"{rank},{p.query_id},{p.landmark},{p.confidence:.6f},{int(correct)},{prec:.6f}\n")


def average_precision_at_k(ranked: Sequence[str], relevant, k: int = 100) -> float:
    if len(set(ranked)) != len(ranked):
        raise IntegrityError("ranked list contains duplicates")
    if not relevant:
        raise UndefinedMetricError("AP is undefined without relevant items")
    hits, total = 0, 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), k)


def map_at_k(ranked_neighbors: Mapping[str, Sequence[str]], truth: Mapping[str, set], k: int = 100) -> float:
    """Mean AP@k over queries that have at least one relevant item."""
    aps = []
    skipped = 0
    for qid, ranked in ranked_neighbors.items():
        relevant = truth.get(qid) or set()
        if not relevant:
            skipped += 1
            continue
        aps.append(average_precision_at_k(list(ranked), relevant, k))
    if skipped:
        log.info("mAP@%d: %d queries without relevant items excluded", k, skipped)
    if not aps:
        raise UndefinedMetricError("no query has a relevant item")
    return sum(aps) / len(aps)


def map_at_100(ranked_neighbors, truth) -> float:
    return map_at_k(ranked_neighbors, truth, 100)


def read_truth_csv(path) -> dict:
    """CSV ``query_id,landmark_id``; -1 or an empty cell marks a distractor."""
    truth = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "landmark_id"]:
            raise IntegrityError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            lab = row["landmark_id"].strip()
            if row["query_id"] in truth:
                raise IntegrityError(f"{path}: duplicate query {row['query_id']!r}")
            truth[row["query_id"]] = int(lab) if lab else NON_LANDMARK
    return truth


def write_truth_csv(truth: Mapping[str, int], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("query_id,landmark_id\n")
        for qid, lab in truth.items():
            fh.write(f"{qid},{lab}\n")
