"""Synthetic index / query / non-landmark sets with known ground truth.

Landmark images are noisy copies of per-class random unit centroids. A few
"junk" landmark classes share their centroid direction with a non-landmark
cluster (``confusion`` is the cosine between the two). Near distractors are
drawn around those clusters, so they retrieve junk-class images with high
similarity and also match the non-landmark reference set strongly: the
situation both suppression rules are meant to repair. Far distractors are
random directions that match nothing in particular.

Noise is isotropic Gaussian with per-coordinate std ``sigma / sqrt(dim)``,
so ``sigma`` is the expected noise norm regardless of dimension.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParamError
from .knn import top_k_search
from .metrics import write_truth_csv
from .postprocess import nonlandmark_scores
from .store import DEFAULT_DIM, NON_LANDMARK, DescriptorSet, save_descriptors

MAX_RESAMPLE_ROUNDS = 200


@dataclass(frozen=True)
class SynthSpec:
    num_landmarks: int = 50
    images_per_landmark: int = 20
    queries_per_landmark: int = 5
    num_distractor_queries: int = 200
    num_nonlandmark_refs: int = 100
    dim: int = DEFAULT_DIM
    sigma: float = 0.05
    rho: float = 0.3
    seed: int = 7
    nonlandmark_clusters: int = 2
    confusion: float = 1.0
    tau: float = 0.3
    topk_nl: int = 3

    def __post_init__(self):
        for name in ("num_landmarks", "images_per_landmark", "queries_per_landmark",
                     "num_nonlandmark_refs", "dim", "nonlandmark_clusters", "topk_nl"):
            if getattr(self, name) < 1:
                raise ParamError(f"{name} must be >= 1")
        if self.num_distractor_queries < 0:
            raise ParamError("num_distractor_queries must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ParamError("rho must lie in [0, 1]")
        if not self.sigma > 0:
            raise ParamError("sigma must be > 0")
        if not 0.0 <= self.confusion <= 1.0:
            raise ParamError("confusion must lie in [0, 1]")

    @property
    def num_near_distractors(self) -> int:
        # round() guards against 0.3 * 200 == 60.000000000000007 style drift
        return math.ceil(round(self.rho * self.num_distractor_queries, 9))


@dataclass(frozen=True, eq=False)
class SynthData:
    spec: SynthSpec
    index: DescriptorSet
    queries: DescriptorSet
    nonlandmark: DescriptorSet
    truth: dict
    near_distractors: frozenset
    junk_landmarks: tuple


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _normalized_set(ids, mat, labels=None) -> DescriptorSet:
    return DescriptorSet(ids=ids, matrix=_unit(mat).astype(np.float32), labels=labels, normalized=True)


def generate_synthetic(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    scale = spec.sigma / math.sqrt(d)

    def noisy(center: np.ndarray) -> np.ndarray:
        return center + rng.standard_normal(center.shape) * scale

    K = spec.num_landmarks
    centroids = _unit(rng.standard_normal((K, d)))

    n_clusters = min(spec.nonlandmark_clusters, K)
    junk = tuple(int(c) for c in np.sort(rng.permutation(K)[:n_clusters]))
    nl_centroids = []
    for c in junk:
        r = rng.standard_normal(d)
        r -= (r @ centroids[c]) * centroids[c]
        r /= np.linalg.norm(r)
        nl_centroids.append(spec.confusion * centroids[c] + math.sqrt(1.0 - spec.confusion ** 2) * r)
    nl_centroids = np.asarray(nl_centroids)

    index_labels = np.repeat(np.arange(K), spec.images_per_landmark)
    index = _normalized_set(
        [f"i{i:07d}" for i in range(index_labels.size)], noisy(centroids[index_labels]), index_labels
    )

    nl_assign = np.arange(spec.num_nonlandmark_refs) % n_clusters
    nonlandmark = _normalized_set(
        [f"n{i:06d}" for i in range(spec.num_nonlandmark_refs)], noisy(nl_centroids[nl_assign])
    )

    q_labels = np.repeat(np.arange(K), spec.queries_per_landmark)
    landmark_q = _unit(noisy(centroids[q_labels]))

    n_near = spec.num_near_distractors
    n_far = spec.num_distractor_queries - n_near
    near_q = _unit(noisy(nl_centroids[np.arange(n_near) % n_clusters]))
    far_q = _unit(rng.standard_normal((n_far, d)))

    def nl_stat(mat):
        if mat.shape[0] == 0:
            return np.zeros(0)
        probe = DescriptorSet(ids=[str(i) for i in range(mat.shape[0])],
                              matrix=mat.astype(np.float32), normalized=True)
        res = top_k_search(probe, nonlandmark, min(spec.topk_nl, len(nonlandmark)))
        scores = nonlandmark_scores(res, spec.topk_nl)
        return np.array([scores[str(i)] for i in range(mat.shape[0])])

    near_stat = nl_stat(near_q)
    if np.any(near_stat <= spec.tau):
        raise GenerationError(
            f"{int(np.sum(near_stat <= spec.tau))} of {n_near} near distractors have non-landmark "
            f"similarity <= tau={spec.tau} (min {near_stat.min():.3f}); "
            f"sigma={spec.sigma} is too large for rho={spec.rho}"
        )
    for _ in range(MAX_RESAMPLE_ROUNDS):
        bad = np.flatnonzero(nl_stat(far_q) > spec.tau)
        if bad.size == 0:
            break
        far_q[bad] = _unit(rng.standard_normal((bad.size, d)))
    else:
        raise GenerationError(
            f"could not draw {n_far} far distractors with non-landmark similarity <= tau={spec.tau} "
            f"at dim={d}; rho={spec.rho} is infeasible"
        )

    mat = np.concatenate([landmark_q, near_q, far_q])
    labels = np.concatenate([q_labels, np.full(n_near + n_far, NON_LANDMARK)])
    kind = np.array(["l"] * q_labels.size + ["near"] * n_near + ["far"] * n_far)
    perm = rng.permutation(mat.shape[0])
    mat, labels, kind = mat[perm], labels[perm], kind[perm]
    qids = [f"q{i:06d}" for i in range(mat.shape[0])]
    queries = DescriptorSet(ids=qids, matrix=mat.astype(np.float32), normalized=True)
    truth = {q: int(lab) for q, lab in zip(qids, labels)}
    near = frozenset(q for q, k in zip(qids, kind) if k == "near")
    return SynthData(spec, index, queries, nonlandmark, truth, near, junk)


def write_synthetic(data: SynthData, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "index": out / "index.lmke",
        "queries": out / "queries.lmke",
        "nonlandmark": out / "nonlandmark.lmke",
        "truth": out / "truth.csv",
    }
    save_descriptors(data.index, paths["index"])
    save_descriptors(data.queries, paths["queries"])
    save_descriptors(data.nonlandmark, paths["nonlandmark"])
    write_truth_csv(data.truth, paths["truth"])
    return paths


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
