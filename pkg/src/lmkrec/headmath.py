"""Retrieval-head math: GeM pooling, ArcMargin logits/loss, cosine similarity.

All computation happens in float64. p is a fixed hyper-parameter, so there is
no gradient with respect to it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NormError, ParamError, ZeroVectorError

UNIT_TOL = 1e-5


@dataclass(frozen=True)
class GemParams:
    p: float = 3.0
    eps: float = 1e-6

    def __post_init__(self):
        if not (math.isfinite(self.p) and self.p >= 1.0):
            raise ParamError(f"GeM exponent p must be >= 1, got {self.p}")
        if not self.eps > 0:
            raise ParamError(f"GeM eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class ArcMarginParams:
    s: float = 30.0
    m: float = 0.3
    num_classes: Optional[int] = None
    dim: Optional[int] = None

    def __post_init__(self):
        if not self.s > 0:
            raise ParamError(f"scale s must be > 0, got {self.s}")
        if not 0.0 <= self.m < math.pi / 2:
            raise ParamError(f"margin m must lie in [0, pi/2), got {self.m}")


def _feature_map(fmap) -> np.ndarray:
    x = np.asarray(fmap, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ParamError(f"feature map must be c x h x w with positive sizes, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParamError("feature map contains non-finite values")
    return x


def gem_pool(fmap, params: GemParams = GemParams()) -> np.ndarray:
    """Generalized-mean pool each channel of a c x h x w map.

    f_c = (mean_hw max(x, eps) ** p) ** (1 / p)
    """
    x = _feature_map(fmap)
    c = x.shape[0]
    xp = np.maximum(x, params.eps).reshape(c, -1) ** params.p
    return xp.mean(axis=1) ** (1.0 / params.p)


def gem_pool_grad(fmap, params: GemParams, upstream) -> np.ndarray:
    """Gradient of ``upstream . gem_pool(fmap)`` with respect to ``fmap``.

    Entries at or below eps sit on the flat part of the clamp and get 0.
    """
    x = _feature_map(fmap)
    c, h, w = x.shape
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if up.shape[0] != c:
        raise ParamError(f"upstream has {up.shape[0]} entries for {c} channels")
    p = params.p
    xc = np.maximum(x, params.eps)
    pooled = gem_pool(x, params)
    n = h * w
    # d f / d x = x^(p-1) * f^(1-p) / n
    grad = xc ** (p - 1.0) * (pooled ** (1.0 - p))[:, None, None] / n
    grad = np.where(x > params.eps, grad, 0.0)
    return grad * up[:, None, None]


def finite_difference_grad(fmap, params: GemParams, upstream, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``upstream . gem_pool(fmap)``; test oracle."""
    x = _feature_map(fmap).copy()
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = float(up @ gem_pool(x, params))
        x[idx] = orig - step
        lo = float(up @ gem_pool(x, params))
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gem_gradients(n_maps: int = 20, p: float = 3.0, step: float = 1e-3,
                        max_size: int = 8, seed: int = 0) -> list[float]:
    """Max relative error of analytic vs numeric GeM gradients on random maps.

    Map sizes are drawn from [1, max_size] per axis and entries from
    U(0.25, 2), keeping every entry well clear of the eps clamp.
    """
    rng = np.random.default_rng(seed)
    params = GemParams(p=p)
    errors = []
    for _ in range(n_maps):
        shape = tuple(int(v) for v in rng.integers(1, max_size + 1, size=3))
        fmap = rng.uniform(0.25, 2.0, size=shape)
        upstream = rng.standard_normal(shape[0])
        errors.append(
            max_relative_error(
                gem_pool_grad(fmap, params, upstream),
                finite_difference_grad(fmap, params, upstream, step),
            )
        )
    return errors


def gem_lower_bound(n_spatial: int, p: float) -> float:
    """Smallest possible gem_pool / channel-max ratio for h*w == n_spatial."""
    return (1.0 / n_spatial) ** (1.0 / p)


def _check_unit_rows(arr: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise NormError(f"{what} must be unit-normalized (max norm deviation "
                        f"{float(np.max(np.abs(norms - 1.0))):.3g})")


def cosine_logits(embeddings, weights, s: float) -> np.ndarray:
    """Plain scaled cosine logits ``s * clip(E @ W.T)``."""
    e = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return s * np.clip(e @ w.T, -1.0, 1.0)


def arcmargin_logits_batch(embeddings, weights, targets, params: ArcMarginParams) -> np.ndarray:
    """ArcMargin logits for a batch (B x dim embeddings, C x dim weights)."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    t = np.atleast_1d(np.asarray(targets))
    if e.shape[1] != w.shape[1]:
        raise ParamError(f"embedding dim {e.shape[1]} != weight dim {w.shape[1]}")
    if params.num_classes is not None and w.shape[0] != params.num_classes:
        raise ParamError(f"expected {params.num_classes} classes, weights have {w.shape[0]}")
    if params.dim is not None and w.shape[1] != params.dim:
        raise ParamError(f"expected dim {params.dim}, weights have {w.shape[1]}")
    if t.shape[0] != e.shape[0]:
        raise ParamError(f"{t.shape[0]} targets for {e.shape[0]} embeddings")
    if not np.issubdtype(t.dtype, np.integer):
        raise IndexError("targets must be integer class indices")
    if np.any(t < 0) or np.any(t >= w.shape[0]):
        raise IndexError(f"target out of range [0, {w.shape[0]})")
    _check_unit_rows(e, "embeddings")
    _check_unit_rows(w, "weight rows")

    s, m = params.s, params.m
    cos = np.clip(e @ w.T, -1.0, 1.0)
    rows = np.arange(e.shape[0])
    cos_t = cos[rows, t]
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    with_margin = cos_t * math.cos(m) - sin_t * math.sin(m)
    # past theta = pi - m, cos(theta + m) stops being monotone in theta
    fallback = cos_t - m * math.sin(m)
    phi = np.where(cos_t > math.cos(math.pi - m), with_margin, fallback)
    logits = s * cos
    logits[rows, t] = s * phi
    return logits


def arcmargin_logits(embedding, weights, target: int, params: ArcMarginParams) -> np.ndarray:
    return arcmargin_logits_batch(
        np.asarray(embedding)[None, :], weights, np.array([target]), params
    )[0]


def _cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(logits.shape[0])
    diff = logits - logits[rows, targets][:, None]
    top = diff.max(axis=1)
    diff[rows, targets] = -np.inf
    # target is the max: log1p keeps tiny losses accurate
    tail = np.exp(diff - np.maximum(top, 0.0)[:, None]).sum(axis=1)
    return np.where(top <= 0.0, np.log1p(tail), top + np.log(tail + np.exp(-top)))


def arcmargin_loss(embeddings, weights, targets, params: ArcMarginParams) -> float:
    """Mean softmax cross-entropy over ArcMargin logits."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] == 0:
        raise ParamError("empty batch")
    t = np.atleast_1d(np.asarray(targets))
    logits = arcmargin_logits_batch(e, weights, t, params)
    return float(_cross_entropy(logits, t.astype(np.int64)).mean())


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ParamError(f"length mismatch {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))
