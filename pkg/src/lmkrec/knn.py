"""Exact blocked top-k cosine search and multi-feature similarity fusion.

Similarities are accumulated in float64 and rounded once to float32, the
descriptor element type. Ordering is (similarity desc, index row asc).
Block shapes never depend on the worker count, so every BLAS call sees the
same operands regardless of parallelism and the output is byte-identical
for 1 or many workers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import IntegrityError, NormError, ParamError
from .store import DescriptorSet

log = logging.getLogger(__name__)

QUERY_BLOCK = 256
INDEX_BLOCK = 16384


@dataclass(frozen=True, eq=False)
class SearchResult:
    """Top-k neighbors for a block of queries.

    ``indices`` and ``similarities`` are (n_query, k); row i belongs to
    ``query_ids[i]`` and is sorted by similarity desc, index row asc.
    """

    query_ids: tuple
    indices: np.ndarray
    similarities: np.ndarray

    def __len__(self):
        return len(self.query_ids)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def equals(self, other: "SearchResult") -> bool:
        return (
            self.query_ids == other.query_ids
            and np.array_equal(self.indices, other.indices)
            and self.similarities.tobytes() == other.similarities.tobytes()
        )


@dataclass(frozen=True)
class FeatureSetBundle:
    """Several descriptor sets for the same images, one per feature type."""

    names: tuple
    sets: tuple
    weights: tuple

    def __post_init__(self):
        names, sets, weights = tuple(self.names), tuple(self.sets), tuple(float(w) for w in self.weights)
        if not sets or not (len(names) == len(sets) == len(weights)):
            raise ParamError("bundle needs matching, non-empty names/sets/weights")
        ids = sets[0].ids
        for name, s in zip(names, sets):
            if s.ids != ids:
                raise IntegrityError(f"feature set {name!r} ids differ from {names[0]!r}")
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ParamError("weights must be non-negative with at least one positive")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def single(cls, dset: DescriptorSet, name: str = "f0") -> "FeatureSetBundle":
        return cls((name,), (dset,), (1.0,))

    @property
    def ids(self) -> tuple:
        return self.sets[0].ids

    @property
    def labels(self):
        return self.sets[0].labels

    def __len__(self):
        return len(self.sets[0])


def fuse_similarities(sims: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of per-feature similarity arrays, rounded to float32."""
    if len(sims) != len(weights) or not sims:
        raise ParamError("need one weight per similarity array")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise ParamError("weights must be non-negative with a positive sum")
    shape = np.shape(sims[0])
    acc = np.zeros(shape, dtype=np.float64)
    for s, wf in zip(sims, w):
        if np.shape(s) != shape:
            raise IntegrityError(f"similarity shapes differ: {np.shape(s)} vs {shape}")
        if wf:
            acc += wf * np.asarray(s, dtype=np.float64)
    return (acc / w.sum()).astype(np.float32)


def _as_bundle(x) -> FeatureSetBundle:
    return x if isinstance(x, FeatureSetBundle) else FeatureSetBundle.single(x)


def _tile_similarities(qb: FeatureSetBundle, ib: FeatureSetBundle, q0, q1, i0, i1) -> np.ndarray:
    parts = []
    for qs, is_ in zip(qb.sets, ib.sets):
        q = qs.matrix[q0:q1].astype(np.float64)
        x = is_.matrix[i0:i1].astype(np.float64)
        parts.append(q @ x.T)
    if len(parts) == 1:
        return parts[0].astype(np.float32)
    return fuse_similarities(parts, qb.weights)


def _tile_topk(sims: np.ndarray, k: int, offset: int):
    """Top-k of each row with ties to the lowest column; global row indices."""
    nrow, ncol = sims.shape
    if k >= ncol:
        order = np.argsort(-sims, axis=1, kind="stable")
        return order + offset, np.take_along_axis(sims, order, axis=1)
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(sims, part, axis=1)
    kth = vals.min(axis=1)
    order = np.lexsort((part, -vals), axis=1)
    idx = np.take_along_axis(part, order, axis=1).astype(np.int64)
    val = np.take_along_axis(vals, order, axis=1)
    # boundary ties: argpartition picked arbitrary columns among equals
    tied = np.flatnonzero((sims >= kth[:, None]).sum(axis=1) > k)
    for r in tied:
        cols = np.flatnonzero(sims[r] >= kth[r])
        v = sims[r, cols]
        o = np.lexsort((cols, -v))[:k]
        idx[r] = cols[o]
        val[r] = v[o]
    return idx + offset, val


def _merge(idx_a, val_a, idx_b, val_b, k):
    idx = np.concatenate([idx_a, idx_b], axis=1)
    val = np.concatenate([val_a, val_b], axis=1)
    order = np.lexsort((idx, -val), axis=1)[:, :k]
    return np.take_along_axis(idx, order, axis=1), np.take_along_axis(val, order, axis=1)


def _check_normalized(b: FeatureSetBundle, role: str) -> None:
    for name, s in zip(b.names, b.sets):
        if not s.normalized:
            raise NormError(f"{role} feature set {name!r} is not normalized")


def top_k_search(queries, index, k: int, workers: int = 1,
                 query_block: int = QUERY_BLOCK, index_block: int = INDEX_BLOCK) -> SearchResult:
    """Exact top-k inner-product search of normalized queries against an index.

    ``queries`` and ``index`` are DescriptorSets or FeatureSetBundles (whose
    per-feature similarities are fused by weighted mean before ranking).
    """
    qb, ib = _as_bundle(queries), _as_bundle(index)
    if len(qb.sets) != len(ib.sets):
        raise ParamError(f"{len(qb.sets)} query feature sets vs {len(ib.sets)} index sets")
    for qs, is_ in zip(qb.sets, ib.sets):
        if qs.dim != is_.dim:
            raise ParamError(f"query dim {qs.dim} != index dim {is_.dim}")
    if qb.weights != ib.weights:
        raise ParamError("query and index bundles carry different feature weights")
    _check_normalized(qb, "query")
    _check_normalized(ib, "index")
    n_index, n_query = len(ib), len(qb)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n_index:
        raise ParamError(f"k must be in [1, {n_index}], got {k}")
    if query_block < 1 or index_block < 1 or workers < 1:
        raise ParamError("block sizes and worker count must be positive")

    indices = np.empty((n_query, k), dtype=np.int64)
    sims = np.empty((n_query, k), dtype=np.float32)

    def run_block(q0):
        q1 = min(q0 + query_block, n_query)
        best_i = best_v = None
        for i0 in range(0, n_index, index_block):
            i1 = min(i0 + index_block, n_index)
            tile = _tile_similarities(qb, ib, q0, q1, i0, i1)
            ti, tv = _tile_topk(tile, min(k, i1 - i0), i0)
            if best_i is None:
                best_i, best_v = ti, tv
            else:
                best_i, best_v = _merge(best_i, best_v, ti, tv, min(k, best_i.shape[1] + ti.shape[1]))
        indices[q0:q1] = best_i
        sims[q0:q1] = best_v

    starts = range(0, n_query, query_block)
    if workers == 1:
        for q0 in starts:
            run_block(q0)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_block, starts))
    indices.setflags(write=False)
    sims.setflags(write=False)
    return SearchResult(query_ids=qb.ids, indices=indices, similarities=sims)


def write_neighbors_csv(result: SearchResult, index_ids: Sequence[str], path) -> None:
    """CSV ``query_id,rank,index_id,similarity`` with 1-based ranks."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("query_id,rank,index_id,similarity\n")
        for qid, idx_row, sim_row in zip(result.query_ids, result.indices, result.similarities):
            for rank, (j, s) in enumerate(zip(idx_row, sim_row), start=1):
                fh.write(f"{qid},{rank},{index_ids[j]},{float(s):.6f}\n")
