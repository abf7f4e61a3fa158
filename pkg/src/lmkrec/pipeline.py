"""End-to-end orchestration: load -> search -> predict -> rules -> re-rank -> evaluate.

Every stage's predictions pass through their 6-decimal CSV form before the
next stage consumes them, so running the stages one at a time from the
command line reproduces the orchestrated run byte for byte.
"""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import EXECUTION_KEYS, PipelineConfig, dump_config
from .errors import LmkError
from .knn import FeatureSetBundle, SearchResult, top_k_search, write_neighbors_csv
from .metrics import gap_at_1, map_at_100
from .postprocess import (
    FEATURE_NAMES,
    apply_nonlandmark_rule,
    extract_rerank_features,
    frequency_suppression,
    nonlandmark_scores,
    nonlandmark_search,
    redemote,
    write_features_csv,
)
from .recognition import (
    Prediction,
    canonicalize,
    predict_from_search,
    read_classifier_probs,
    write_predictions_csv,
)
from .rerank import TreeHyper, TreeModel, apply_rerank, load_model, save_model, train_rerank_tree
from .metrics import read_truth_csv
from .store import NON_LANDMARK, l2_normalize, load_descriptors

log = logging.getLogger(__name__)

STAGES = ("raw", "rule1", "rule2", "rerank")


class StageError(LmkError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def load_bundle(paths: Sequence[str], weights: Optional[Sequence[float]] = None) -> FeatureSetBundle:
    """Load one LMKE file per feature type, normalizing any raw ones."""
    sets = []
    for p in paths:
        s = load_descriptors(p)
        if not s.normalized:
            log.info("normalizing %s before search", p)
            s = l2_normalize(s)
        sets.append(s)
    names = [Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    w = list(weights) if weights else [1.0] * len(sets)
    return FeatureSetBundle(names, sets, w)


def search_index(queries: FeatureSetBundle, index: FeatureSetBundle, k_search: int,
                 workers: int = 1) -> SearchResult:
    return top_k_search(queries, index, min(k_search, len(index)), workers=workers)


def correctness(predictions: Sequence[Prediction], truth) -> np.ndarray:
    return np.array([
        (not p.abstains) and truth.get(p.query_id, NON_LANDMARK) == p.landmark
        for p in predictions
    ], dtype=np.int64)


def training_split(query_ids: Sequence[str], fraction: float, seed: int):
    """Deterministic (train, holdout) partition of query ids."""
    ids = list(query_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    train = {ids[i] for i in perm[:n_train]}
    return train, set(ids) - train


def train_on_split(predictions, features, truth, fraction: float, seed: int, hyper: TreeHyper):
    train_ids, holdout = training_split([p.query_id for p in predictions], fraction, seed)
    rows = np.array([p.query_id in train_ids for p in predictions])
    labels = correctness(predictions, truth)
    model = train_rerank_tree(features[rows], labels[rows], hyper, feature_names=FEATURE_NAMES)
    return model, holdout


def rerank_predictions(model: TreeModel, predictions: Sequence[Prediction], features) -> list:
    """Replace confidences by model output, keeping abstentions and demotions."""
    scores = apply_rerank(model, features)
    out = [p if p.abstains else p.with_confidence(float(s)) for p, s in zip(predictions, scores)]
    return canonicalize(redemote(out, [p.suppressed for p in predictions]))


def relevance_sets(index: FeatureSetBundle, truth) -> dict:
    by_label: dict = {}
    for iid, lab in zip(index.ids, index.labels):
        by_label.setdefault(int(lab), set()).add(iid)
    return {q: by_label.get(lab, set()) for q, lab in truth.items() if lab != NON_LANDMARK}


class _Timer:
    def __init__(self):
        self.timings = {}
        self.current = None

    @contextmanager
    def stage(self, name):
        self.current = name
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (LmkError, OSError, ValueError, KeyError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every enabled stage and write per-stage outputs into ``cfg.out_dir``.

    Returns the report dict (also written as report.json). Wall-clock timings
    go to timings.json so that report.json stays deterministic.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    files = {}
    stage_preds = {}

    with timer.stage("load"):
        weights = cfg.feature_weights()
        queries = load_bundle(cfg.queries, weights)
        index = load_bundle(cfg.index, weights)
        if index.labels is None:
            raise LmkError("index set carries no landmark labels")
        nonlandmark = load_bundle(cfg.nonlandmark, weights) if cfg.nonlandmark else None
        probs = read_classifier_probs(cfg.classifier_probs) if cfg.classifier_probs else None
        truth = read_truth_csv(cfg.truth) if cfg.truth else None

    with timer.stage("search"):
        result = search_index(queries, index, cfg.k_search, cfg.workers)
        if cfg.write_neighbors:
            files["neighbors"] = str(out / "neighbors.csv")
            write_neighbors_csv(result, index.ids, files["neighbors"])

    def emit(stage, preds):
        stage_preds[stage] = preds
        files[f"predictions_{stage}"] = str(out / f"predictions_{stage}.csv")
        write_predictions_csv(preds, files[f"predictions_{stage}"], cfg.abstain_as_empty)

    with timer.stage("predict"):
        preds = canonicalize(predict_from_search(result, index.labels, probs, cfg.fusion()))
        emit("raw", preds)

    nl_result = None
    if nonlandmark is not None and (cfg.rule1 or cfg.rerank):
        with timer.stage("nonlandmark_search"):
            nl_result = nonlandmark_search(queries, nonlandmark, cfg.topk_nl, cfg.workers)

    if cfg.rule1:
        with timer.stage("rule1"):
            scores = nonlandmark_scores(nl_result, cfg.topk_nl, cfg.nl_stat)
            preds = canonicalize(apply_nonlandmark_rule(preds, scores, cfg.postprocess()))
            emit("rule1", preds)

    if cfg.rule2:
        with timer.stage("rule2"):
            preds = canonicalize(frequency_suppression(preds, cfg.cap))
            emit("rule2", preds)

    holdout = None
    if cfg.rerank:
        with timer.stage("rerank"):
            features = extract_rerank_features(preds, result, index.labels, nl_result, probs)
            files["rerank_features"] = str(out / "rerank_features.csv")
            write_features_csv(preds, features, files["rerank_features"])
            if cfg.rerank_model:
                model = load_model(cfg.rerank_model)
            else:
                model, holdout = train_on_split(preds, features, truth, cfg.rerank_train_fraction,
                                                cfg.seed, cfg.tree_hyper())
                files["rerank_model"] = str(out / "rerank_model.json")
                save_model(model, files["rerank_model"])
            preds = rerank_predictions(model, preds, features)
            emit("rerank", preds)

    report = {"config": dump_config(cfg, skip=EXECUTION_KEYS), "n_queries": len(queries),
              "n_index": len(index), "k_search": result.k, "feature_sets": list(queries.names),
              "files": {k: Path(v).name for k, v in files.items()}}
    if truth is not None:
        with timer.stage("evaluate"):
            report["gap"] = {s: gap_at_1(p, truth) for s, p in stage_preds.items()}
            if holdout is not None:
                sub_truth = {q: lab for q, lab in truth.items() if q in holdout}
                report["gap_holdout"] = {
                    s: gap_at_1([x for x in p if x.query_id in holdout], sub_truth)
                    for s, p in stage_preds.items()
                }
            relevant = relevance_sets(index, truth)
            if any(relevant.values()):
                ranked = {q: [index.ids[j] for j in row]
                          for q, row in zip(result.query_ids, result.indices) if q in relevant}
                report["map_at_100"] = map_at_100(ranked, relevant)

    files["report"] = str(out / "report.json")
    files["timings"] = str(out / "timings.json")
    report["files"].update(report="report.json", timings="timings.json")
    Path(files["report"]).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    Path(files["timings"]).write_text(json.dumps(timer.timings, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    report["timings"] = timer.timings
    report["files"] = files
    return report
