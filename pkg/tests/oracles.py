"""Independent, deliberately naive reference implementations used as test oracles."""
import math

import numpy as np

from lmkrec.recognition import Prediction


def naive_gap(predictions, truth):
    # O(n^2) prefix recount over a list built with insertion sort
    rows = []
    for p in predictions:
        if p.landmark == -1:
            continue
        pos = 0
        while pos < len(rows) and (rows[pos].confidence > p.confidence or (
                rows[pos].confidence == p.confidence and rows[pos].query_id < p.query_id)):
            pos += 1
        rows.insert(pos, p)
    m = len([q for q in truth if truth[q] != -1])
    terms = []
    for i in range(len(rows)):
        if rows[i].landmark == truth[rows[i].query_id]:
            correct_so_far = len([r for r in rows[: i + 1] if r.landmark == truth[r.query_id]])
            terms.append(correct_so_far / (i + 1))
    return math.fsum(terms) / m


def naive_ap(ranked, relevant, k=100):
    positions = sorted(ranked.index(item) + 1 for item in relevant if item in ranked[:k])
    terms = [(j + 1) / pos for j, pos in enumerate(positions)]
    return math.fsum(terms) / min(len(relevant), k)


def naive_map(ranked_neighbors, truth, k=100):
    aps = [naive_ap(list(r), truth[q], k) for q, r in ranked_neighbors.items() if truth.get(q)]
    return math.fsum(aps) / len(aps)


def random_gap_instance(rng, n_max=60):
    n = int(rng.integers(2, n_max))
    n_classes = int(rng.integers(1, 6))
    truth, preds = {}, []
    for i in range(n):
        qid = f"q{i:03d}"
        truth[qid] = int(rng.integers(-1, n_classes))
        if rng.random() < 0.1:
            preds.append(Prediction(qid, -1, 0.0))
            continue
        # coarse confidences so that ties actually occur
        conf = float(np.round(rng.uniform(0, 3), 1))
        preds.append(Prediction(qid, int(rng.integers(0, n_classes)), conf))
    if all(v == -1 for v in truth.values()):
        truth["q000"] = 0
    order = rng.permutation(len(preds))
    return [preds[i] for i in order], truth


def random_map_instance(rng):
    n_queries = int(rng.integers(1, 8))
    pool = [f"i{j}" for j in range(250)]
    ranked, truth = {}, {}
    for q in range(n_queries):
        length = int(rng.integers(1, 150))
        ranked[f"q{q}"] = list(rng.choice(pool, size=length, replace=False))
        n_rel = int(rng.integers(0, 120))
        truth[f"q{q}"] = set(rng.choice(pool, size=n_rel, replace=False))
    if not any(truth.values()):
        truth["q0"] = {ranked["q0"][0]}
    return ranked, truth


def naive_topk_all(queries, index, ks):
    """Exact top-k for several k from one similarity pass.

    Similarities are float64 dot products rounded to float32; ordering is
    similarity descending, then index row ascending.
    """
    sims = (queries.astype(np.float64) @ index.astype(np.float64).T).astype(np.float32)
    desc = -np.sort(-sims, axis=1)
    out = {}
    for k in ks:
        kth = desc[:, k - 1]
        idx = np.empty((sims.shape[0], k), dtype=np.int64)
        for i in range(sims.shape[0]):
            cand = np.flatnonzero(sims[i] >= kth[i])
            order = np.argsort(-sims[i, cand], kind="stable")
            idx[i] = cand[order[:k]]
        out[k] = (idx, np.take_along_axis(sims, idx, axis=1))
    return out
